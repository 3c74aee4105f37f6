"""Optimiser, training loop, search, metrics, export and CLI."""
from .config import RunConfig, load_run_config
from .metrics import MetricsReport, compute_metrics, evaluate
from .optim import Adam, OptimizerState, adam_step
from .search import staged_grid_search
from .train import PreparedData, TrainResult, prepare_data, train
