"""Data preparation and the seeded training loop."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import ndtensor as nd
from ..backbone import DualCast, ForwardResult, load_checkpoint, save_checkpoint
from ..data import Dataset, Normalizer, WindowSet, load_dataset, make_windows, split_7_1_2
from ..losses import (LossBreakdown, dbi_loss, environment_loss, filter_loss, prediction_loss,
                      total_loss)
from ..patterns import PatternCalendar, load_holidays
from .config import RunConfig
from .metrics import predict, rmse
from .optim import Adam

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_pred", "l_flt", "l_env", "l_dbi", "total", "val_rmse")


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedData:
    dataset: Dataset
    normalizer: Normalizer
    calendar: PatternCalendar
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def interval_minutes(self) -> int:
        return self.calendar.interval_minutes


def prepare_data(dataset: Dataset, steps_in: int, steps_out: int, calendar_cfg: dict | None = None,
                 extra_holidays=()) -> PreparedData:
    """Split 7:1:2, z-score with training statistics, window each split."""
    interval = dataset.manifest.interval_minutes if dataset.manifest else 5
    holidays = frozenset(dataset.holidays) | frozenset(extra_holidays)
    calendar = PatternCalendar.from_dict({**(calendar_cfg or {}), "interval_minutes": interval}, holidays)
    train_s, val_s, test_s = split_7_1_2(dataset.readings, steps_in, steps_out)
    norm = Normalizer.fit(train_s.values)
    windows = []
    for s in (train_s, val_s, test_s):
        s = type(s)(norm.transform(s.values), s.offset)
        windows.append(make_windows(s, dataset.timestamps, steps_in, steps_out, calendar, dataset.incidents))
    return PreparedData(dataset, norm, calendar, *windows)


def prepare_from_config(cfg: RunConfig) -> PreparedData:
    if not cfg.manifest:
        raise ValueError("run configuration has no data.manifest")
    extra = load_holidays(cfg.holidays) if cfg.holidays else ()
    return prepare_data(load_dataset(cfg.manifest), cfg.model.steps_in, cfg.model.steps_out, cfg.calendar, extra)


def compute_losses(model: DualCast, batch: WindowSet, cfg: RunConfig,
                   rng: np.random.Generator | None = None) -> tuple[ForwardResult, LossBreakdown]:
    out = model(batch.x, batch.pattern_ids)
    l_pred = prediction_loss(out.pred, batch.y, cfg.loss.p_norm)
    l_flt = filter_loss(out.g_i, out.g_e)
    l_env = environment_loss(out.g_e, rng if cfg.permutation == "random" else None)
    l_dbi = dbi_loss(out.z_i, model.prototypes, batch.pattern_ids)
    return out, total_loss(l_pred, l_flt, l_env, l_dbi, cfg.loss)


@dataclass
class TrainResult:
    model: DualCast
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = float("inf")


def train(cfg: RunConfig, data: PreparedData,
          hooks: Sequence[Callable[[ForwardResult, WindowSet], None]] = ()) -> TrainResult:
    """Adam on the weighted objective; keeps the parameters with the lowest
    validation RMSE (denormalised)."""
    model = DualCast(cfg.model, data.dataset.graph, seed=cfg.seed)
    params = dict(model.named_parameters())
    opt = Adam(params, lr=cfg.optimizer.lr)
    rng = np.random.default_rng(cfg.seed)
    perm_rng = np.random.default_rng(cfg.seed + 7919)
    result = TrainResult(model)
    best_state = model.state_dict()
    val_target = data.normalizer.inverse(data.val.y)
    for epoch in range(1, cfg.optimizer.epochs + 1):
        sums = dict.fromkeys(LOG_COLUMNS[1:6], 0.0)
        n_batches = 0
        for b, batch in enumerate(data.train.batches(cfg.optimizer.batch_size, rng)):
            try:
                out, losses = compute_losses(model, batch, cfg, perm_rng)
                for hook in hooks:
                    hook(out, batch)
                total = losses.total.item()
                if not np.isfinite(total):
                    raise nd.NonFiniteError("total loss is not finite")
                opt.zero_grad()
                nd.backward(losses.total)
                opt.step()
            except ArithmeticError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            for key, value in losses.as_floats().items():
                sums[key] += value
            n_batches += 1
        val_rmse = rmse(predict(model, data.val, data.normalizer), val_target)
        row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}, "val_rmse": val_rmse}
        result.log.append(row)
        log.info("epoch %d: total %.5f pred %.5f val_rmse %.4f", epoch, row["total"], row["l_pred"], val_rmse)
        if val_rmse < result.best_val_rmse:
            result.best_val_rmse, result.best_epoch = val_rmse, epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return result


def write_epoch_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def save_run(result: TrainResult, cfg: RunConfig, data: PreparedData, out_dir) -> str:
    """Checkpoint (with normaliser, calendar and run config) plus epoch log."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(result.model, ckpt, {
        "normalizer": data.normalizer.to_dict(),
        "run": cfg.to_dict(),
        "best_epoch": result.best_epoch,
    })
    write_epoch_log(result.log, os.path.join(out_dir, "epochs.csv"))
    return ckpt


def restore_run(checkpoint_dir) -> tuple[DualCast, Normalizer, RunConfig]:
    model, meta = load_checkpoint(checkpoint_dir)
    return model, Normalizer.from_dict(meta["normalizer"]), RunConfig.from_dict(meta["run"])


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
