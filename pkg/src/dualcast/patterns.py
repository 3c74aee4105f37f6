"""The 17-way time-pattern calendar and the learnable prototype bank.

Ids 0..14 are ``3 * weekday + segment`` for Monday..Friday with segment
0 = morning peak, 1 = off-peak, 2 = evening peak; 15 is Saturday and 16 is
Sunday or a public holiday.
"""
from __future__ import annotations

import datetime as dt
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ndtensor import Tensor

N_PATTERNS = 17
SATURDAY = 15
SUNDAY_OR_HOLIDAY = 16


def _minutes(hhmm: str) -> int:
    h, m = hhmm.split(":")
    return int(h) * 60 + int(m)


@dataclass(frozen=True)
class PatternCalendar:
    morning: tuple[str, str] = ("06:00", "09:00")
    evening: tuple[str, str] = ("16:00", "22:00")
    holidays: frozenset[dt.date] = field(default_factory=frozenset)
    interval_minutes: int = 5
    # complex-time evaluation slice on non-holiday workdays
    complex_window: tuple[str, str] = ("16:00", "20:00")

    def __post_init__(self):
        am = tuple(map(_minutes, self.morning))
        pm = tuple(map(_minutes, self.evening))
        for lo, hi in (am, pm):
            if not 0 <= lo < hi <= 24 * 60:
                raise ValueError(f"bad window {lo}-{hi} minutes")
        if am[1] > pm[0] and pm[1] > am[0]:
            raise ValueError("morning and evening windows overlap")

    def is_holiday(self, when: dt.datetime | dt.date) -> bool:
        day = when.date() if isinstance(when, dt.datetime) else when
        return day in self.holidays

    def is_workday(self, when: dt.datetime) -> bool:
        return when.weekday() < 5 and not self.is_holiday(when)

    def in_complex_window(self, when: dt.datetime) -> bool:
        lo, hi = map(_minutes, self.complex_window)
        return self.is_workday(when) and lo <= when.hour * 60 + when.minute < hi

    @classmethod
    def from_dict(cls, cfg: dict, holidays: Iterable[dt.date] = ()) -> "PatternCalendar":
        return cls(
            morning=tuple(cfg.get("morning", ("06:00", "09:00"))),
            evening=tuple(cfg.get("evening", ("16:00", "22:00"))),
            holidays=frozenset(holidays),
            interval_minutes=int(cfg.get("interval_minutes", 5)),
            complex_window=tuple(cfg.get("complex_window", ("16:00", "20:00"))),
        )


def load_holidays(source) -> frozenset[dt.date]:
    """One ISO date per line; blank lines and ``#`` comments ignored."""
    if source is None:
        return frozenset()
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    days = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            days.add(dt.date.fromisoformat(line))
        except ValueError:
            raise ValueError(f"line {lineno}: not an ISO date: {raw!r}") from None
    return frozenset(days)


def assign_pattern(start: dt.datetime, calendar: PatternCalendar) -> int:
    weekday = start.weekday()
    if weekday == 6 or calendar.is_holiday(start):
        return SUNDAY_OR_HOLIDAY
    if weekday == 5:
        return SATURDAY
    minute = start.hour * 60 + start.minute
    am_lo, am_hi = map(_minutes, calendar.morning)
    pm_lo, pm_hi = map(_minutes, calendar.evening)
    if am_lo <= minute < am_hi:
        segment = 0
    elif pm_lo <= minute < pm_hi:
        segment = 2
    else:
        segment = 1
    return 3 * weekday + segment


def one_hot_membership(ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= N_PATTERNS):
        raise ValueError(f"pattern ids must lie in [0, {N_PATTERNS}), got {ids.tolist()}")
    w = np.zeros((ids.size, N_PATTERNS))
    w[np.arange(ids.size), ids] = 1.0
    return w


def init_prototypes(steps: int, n_nodes: int, width: int, seed: int, std: float = 0.02) -> Tensor:
    """Prototype bank of shape (17, steps, n_nodes, width), N(0, std^2)."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, std, size=(N_PATTERNS, steps, n_nodes, width)), requires_grad=True)
