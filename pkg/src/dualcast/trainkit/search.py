"""Staged (coordinate-wise) grid search over the auxiliary loss weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

from .config import RunConfig

GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0)
STAGES = ("alpha", "beta", "gamma")
TRIAL_COLUMNS = ("trial", "stage", "alpha", "beta", "gamma", "val_rmse")

# maps a configuration to its validation RMSE
Runner = Callable[[RunConfig], float]


@dataclass
class SearchResult:
    best: tuple[float, float, float]
    trials: list[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRIAL_COLUMNS)
            writer.writeheader()
            for row in self.trials:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def staged_grid_search(base: RunConfig, runner: Runner, grid=GRID) -> SearchResult:
    """Sweep alpha with beta and gamma at the smallest grid value, fix the best
    alpha, then sweep beta, then gamma. Ties go to the smaller weight."""
    grid = tuple(sorted(grid))
    current = {name: grid[0] for name in STAGES}
    trials: list[dict] = []
    for stage in STAGES:
        best_value, best_score = None, float("inf")
        for value in grid:
            trial = dict(current, **{stage: value})
            score = float(runner(base.with_weights(trial["alpha"], trial["beta"], trial["gamma"])))
            trials.append({"trial": len(trials), "stage": stage, **trial, "val_rmse": score})
            if score < best_score:  # strict: an equal score keeps the smaller weight
                best_value, best_score = value, score
        current[stage] = grid[0] if best_value is None else best_value
    return SearchResult((current["alpha"], current["beta"], current["gamma"]), trials)


def training_runner(data) -> Runner:
    """Runner that trains on prepared data and reports the best validation RMSE."""
    from .train import train

    return lambda cfg: train(cfg, data).best_val_rmse
