"""Dual-branch spatio-temporal traffic forecasting on a small numpy autodiff core."""
from .backbone import DualCast, ForwardResult, ModelConfig, load_checkpoint, save_checkpoint
from .graphs import SensorGraph, build_rct_adjacency, build_sim_adjacency, load_sensor_graph
from .losses import LossWeights
from .patterns import N_PATTERNS, PatternCalendar, assign_pattern

__version__ = "0.1.0"
