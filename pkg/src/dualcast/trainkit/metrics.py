"""Forecast metrics on denormalised values, with complex-time and incident slices."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import Normalizer, WindowSet
from ..ndtensor import no_grad
from ..patterns import PatternCalendar

HORIZON_MINUTES = (15, 30, 60)


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - target)))


def horizon_steps(interval_minutes: int, steps_out: int) -> dict[int, int]:
    """Minutes -> 1-based output step for each reportable horizon mark."""
    out = {}
    for minutes in HORIZON_MINUTES:
        if minutes % interval_minutes == 0 and minutes // interval_minutes <= steps_out:
            out[minutes] = minutes // interval_minutes
    return out


def hour_step(interval_minutes: int, steps_out: int) -> int:
    return horizon_steps(interval_minutes, steps_out).get(60, steps_out)


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    horizons: dict[str, dict] = field(default_factory=dict)
    rmse_1h: float | None = None
    cpx_rmse_1h: float | None = None
    incident_rmse: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def complex_mask(windows: WindowSet, calendar: PatternCalendar) -> np.ndarray:
    """Samples whose target window starts inside the complex-time window of a
    non-holiday workday."""
    return np.array([calendar.in_complex_window(t) for t in windows.target_times], dtype=bool)


def compute_metrics(pred: np.ndarray, target: np.ndarray, windows: WindowSet,
                    calendar: PatternCalendar, interval_minutes: int) -> MetricsReport:
    """``pred`` and ``target`` are denormalised, shaped (S, T', N, C)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} shapes differ")
    steps_out = pred.shape[1]
    horizons = {f"{m}min": {"step": k, "rmse": rmse(pred[:, k - 1], target[:, k - 1]),
                            "mae": mae(pred[:, k - 1], target[:, k - 1])}
                for m, k in horizon_steps(interval_minutes, steps_out).items()}
    h = hour_step(interval_minutes, steps_out) - 1
    cpx = complex_mask(windows, calendar)
    inc = np.asarray(windows.incident, dtype=bool)
    report = MetricsReport(
        rmse=rmse(pred, target),
        mae=mae(pred, target),
        horizons=horizons,
        rmse_1h=rmse(pred[:, h], target[:, h]),
        cpx_rmse_1h=rmse(pred[cpx, h], target[cpx, h]) if cpx.any() else None,
        incident_rmse=rmse(pred[inc], target[inc]) if inc.any() else None,
        counts={"all": int(len(pred)), "cpx": int(cpx.sum()), "non_cpx": int((~cpx).sum()),
                "incident": int(inc.sum()), "non_incident": int((~inc).sum())},
    )
    return report


def predict(model, windows: WindowSet, normalizer: Normalizer, batch_size: int = 256) -> np.ndarray:
    """Denormalised forecasts for every window, in window order."""
    chunks = []
    with no_grad():
        for batch in windows.batches(batch_size):
            chunks.append(model(batch.x, batch.pattern_ids).pred.data)
    return normalizer.inverse(np.concatenate(chunks))


def evaluate(model, windows: WindowSet, normalizer: Normalizer, calendar: PatternCalendar,
             interval_minutes: int) -> tuple[MetricsReport, np.ndarray, np.ndarray]:
    pred = predict(model, windows, normalizer)
    target = normalizer.inverse(windows.y)
    return compute_metrics(pred, target, windows, calendar, interval_minutes), pred, target


def persistence_forecast(windows: WindowSet, normalizer: Normalizer) -> np.ndarray:
    """Repeat the last observed step across the output window (denormalised)."""
    last = windows.x[:, -1:]
    return normalizer.inverse(np.repeat(last, windows.y.shape[1], axis=1))
