"""Synthetic traffic with planted incidents, dataset files, normalisation,
chronological splits and sliding windows."""
from __future__ import annotations

import csv
import datetime as dt
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .graphs import SensorGraph, grid_graph, load_sensor_graph, path_graph, random_graph, write_edge_list
from .patterns import PatternCalendar, assign_pattern, load_holidays

# Published statistics of the reference datasets (sensors, edges, interval).
KNOWN_DATASETS = {
    "PEMS03": {"sensor_count": 358, "edge_count": 547, "interval_minutes": 5},
    "PEMS08": {"sensor_count": 170, "edge_count": 277, "interval_minutes": 5},
    "Melbourne": {"sensor_count": 182, "edge_count": 398, "interval_minutes": 15},
}


@dataclass(frozen=True)
class Incident:
    node: int
    start: int  # absolute step
    duration: int
    magnitude: float

    def overlaps(self, lo: int, hi: int) -> bool:
        """True if [start, start + duration) meets [lo, hi)."""
        return self.start < hi and lo < self.start + self.duration


@dataclass
class DatasetManifest:
    name: str
    sensor_count: int
    interval_minutes: int
    start_timestamp: str
    reading_channels: int = 1
    readings_path: str = "readings.csv"
    edges_path: str = "edges.csv"
    holidays_path: str | None = None
    incidents_path: str | None = None
    steps: int | None = None

    def __post_init__(self):
        if self.interval_minutes <= 0 or (24 * 60) % self.interval_minutes:
            raise ValueError(f"interval {self.interval_minutes} min does not divide a day")

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.interval_minutes

    @classmethod
    def read(cls, path) -> tuple["DatasetManifest", str]:
        with open(path) as fh:
            raw = json.load(fh)
        return cls(**raw), os.path.dirname(os.path.abspath(path))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


@dataclass
class SyntheticConfig:
    n_nodes: int = 8
    days: int = 28
    interval_minutes: int = 15
    graph_kind: str = "path"  # path | grid | random
    edge_prob: float = 0.2
    base_level: tuple[float, float] = (80.0, 120.0)
    daily_amplitude: tuple[float, float] = (0.3, 0.6)  # fraction of base level
    daily_phase_hours: tuple[float, float] = (-1.5, 1.5)
    weekly_amplitude: tuple[float, float] = (0.02, 0.08)
    noise_std: float = 2.0
    incident_rate: float = 0.05  # per node-day
    incident_magnitude: float = 0.5
    incident_duration: int = 4  # steps
    start_timestamp: str = "2024-01-01T00:00:00"  # a Monday
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1 or self.days < 1:
            raise ValueError("n_nodes and days must be positive")
        if (24 * 60) % self.interval_minutes:
            raise ValueError("interval must divide a day")
        if self.noise_std < 0 or self.incident_rate < 0 or self.incident_duration < 1:
            raise ValueError("noise_std and incident_rate must be >= 0, duration >= 1")
        if not 0 <= self.incident_magnitude <= 1:
            raise ValueError("incident magnitude must lie in [0, 1]")
        if self.graph_kind not in ("path", "grid", "random"):
            raise ValueError(f"unknown graph kind {self.graph_kind!r}")


@dataclass
class Dataset:
    readings: np.ndarray  # (steps, N, C)
    graph: SensorGraph
    timestamps: list[dt.datetime]
    incidents: list[Incident] = field(default_factory=list)
    holidays: frozenset[dt.date] = frozenset()
    manifest: DatasetManifest | None = None


def _build_graph(cfg: SyntheticConfig, rng: np.random.Generator) -> SensorGraph:
    if cfg.graph_kind == "path":
        return path_graph(cfg.n_nodes)
    if cfg.graph_kind == "grid":
        cols = int(np.ceil(np.sqrt(cfg.n_nodes)))
        if cfg.n_nodes % cols:
            raise ValueError(f"grid graph needs n_nodes divisible by {cols}")
        return grid_graph(cfg.n_nodes // cols, cols)
    return random_graph(cfg.n_nodes, cfg.edge_prob, rng)


def generate_synthetic(cfg: SyntheticConfig):
    """Returns (readings (steps, N, 1), incidents, graph, manifest).

    Each node carries a daily sinusoid times a weekly modulation plus Gaussian
    noise. Incidents scale the node's flow by (1 - magnitude) for their
    duration; one-hop neighbours drop by half the magnitude, fading linearly
    to nothing over the same duration. Flows are clamped at 0.
    """
    rng = np.random.default_rng(cfg.seed)
    graph = _build_graph(cfg, rng)
    n = cfg.n_nodes
    per_day = 24 * 60 // cfg.interval_minutes
    steps = cfg.days * per_day
    base = rng.uniform(*cfg.base_level, size=n)
    amp = rng.uniform(*cfg.daily_amplitude, size=n)
    phase = rng.uniform(*cfg.daily_phase_hours, size=n) / 24.0
    wamp = rng.uniform(*cfg.weekly_amplitude, size=n)
    wphase = rng.uniform(0.0, 2 * np.pi, size=n)

    day_frac = (np.arange(steps) % per_day) / per_day
    week_pos = np.arange(steps) / (7 * per_day)
    daily = np.sin(2 * np.pi * (day_frac[:, None] - 0.25 - phase[None, :]))
    weekly = np.sin(2 * np.pi * week_pos[:, None] + wphase[None, :])
    clean = base * (1.0 + amp * daily) * (1.0 + wamp * weekly)

    factor = np.ones((steps, n))
    incidents: list[Incident] = []
    nbrs = graph.neighbours()
    dur, mag = cfg.incident_duration, cfg.incident_magnitude
    for node in range(n):
        count = rng.poisson(cfg.incident_rate * cfg.days)
        starts = np.sort(rng.integers(0, steps - dur + 1, size=count))
        for s in starts.tolist():
            incidents.append(Incident(node, s, dur, mag))
            factor[s:s + dur, node] *= 1.0 - mag
            fade = 1.0 - 0.5 * mag * (1.0 - np.arange(dur) / dur)
            for nb in nbrs[node]:
                factor[s:s + dur, nb] *= fade
    incidents.sort(key=lambda e: (e.start, e.node))

    noise = rng.normal(0.0, cfg.noise_std, size=(steps, n))
    readings = np.maximum(clean * factor + noise, 0.0)[:, :, None]
    manifest = DatasetManifest(
        name=f"synthetic-{cfg.seed}",
        sensor_count=n,
        interval_minutes=cfg.interval_minutes,
        start_timestamp=cfg.start_timestamp,
        reading_channels=1,
        incidents_path="incidents.csv",
        steps=steps,
    )
    return readings, incidents, graph, manifest


# ---------------------------------------------------------------- files

def write_dataset(out_dir, readings: np.ndarray, graph: SensorGraph, incidents: Sequence[Incident],
                  manifest: DatasetManifest, holidays: Sequence[dt.date] = ()) -> str:
    """Write manifest.json, readings.csv, edges.csv, incidents.csv (and
    holidays.txt when given); returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    steps, n, c = readings.shape
    with open(os.path.join(out_dir, manifest.readings_path), "w", newline="") as fh:
        fh.write("# " + ",".join(f"n{i}c{j}" for i in range(n) for j in range(c)) + "\n")
        writer = csv.writer(fh)
        for row in readings.reshape(steps, n * c):
            writer.writerow([repr(float(v)) for v in row])
    write_edge_list(graph, os.path.join(out_dir, manifest.edges_path))
    if manifest.incidents_path:
        write_incidents(incidents, os.path.join(out_dir, manifest.incidents_path))
    if holidays:
        manifest = replace(manifest, holidays_path="holidays.txt")
        with open(os.path.join(out_dir, "holidays.txt"), "w") as fh:
            fh.writelines(f"{d.isoformat()}\n" for d in sorted(holidays))
    path = os.path.join(out_dir, "manifest.json")
    manifest.write(path)
    return path


def write_incidents(incidents: Sequence[Incident], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "start_step", "duration_steps", "magnitude"])
        for e in incidents:
            writer.writerow([e.node, e.start, e.duration, repr(e.magnitude)])


def read_incidents(path) -> list[Incident]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Incident(int(r["node"]), int(r["start_step"]), int(r["duration_steps"]), float(r["magnitude"]))
            for r in rows]


def read_readings(path, n_nodes: int, channels: int) -> np.ndarray:
    width = n_nodes * channels
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if len(cells) != width:
                raise ValueError(f"{path}: row {lineno} has {len(cells)} values, expected {width}")
            try:
                values = [float(v) for v in cells]
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has a non-numeric cell") from None
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{path}: row {lineno} has a non-finite cell")
            rows.append(values)
    return np.array(rows, dtype=np.float64).reshape(len(rows), n_nodes, channels)


def load_dataset(manifest_path) -> Dataset:
    manifest, root = DatasetManifest.read(manifest_path)
    at = lambda p: p if os.path.isabs(p) else os.path.join(root, p)
    readings = read_readings(at(manifest.readings_path), manifest.sensor_count, manifest.reading_channels)
    if manifest.steps is not None and readings.shape[0] != manifest.steps:
        raise ValueError(f"manifest declares {manifest.steps} steps, readings hold {readings.shape[0]}")
    graph = load_sensor_graph(at(manifest.edges_path), manifest.sensor_count)
    start = dt.datetime.fromisoformat(manifest.start_timestamp)
    step = dt.timedelta(minutes=manifest.interval_minutes)
    timestamps = [start + k * step for k in range(readings.shape[0])]
    incidents = read_incidents(at(manifest.incidents_path)) if manifest.incidents_path else []
    holidays = load_holidays(at(manifest.holidays_path)) if manifest.holidays_path else frozenset()
    return Dataset(readings, graph, timestamps, incidents, holidays, manifest)


# ---------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    @classmethod
    def fit(cls, train: np.ndarray) -> "Normalizer":
        flat = train.reshape(-1, train.shape[-1])
        mean, std = flat.mean(axis=0), flat.std(axis=0)
        if np.any(std <= 0):
            raise ValueError(f"channel(s) {np.nonzero(std <= 0)[0].tolist()} have zero std in the training split")
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def zscore(readings: np.ndarray, train: np.ndarray) -> tuple[np.ndarray, Normalizer]:
    """Normalise with statistics of the training split only."""
    norm = Normalizer.fit(train)
    return norm.transform(readings), norm


@dataclass(frozen=True)
class Split:
    values: np.ndarray
    offset: int  # absolute index of the first step

    def __len__(self) -> int:
        return self.values.shape[0]


def split_7_1_2(readings: np.ndarray, steps_in: int = 1, steps_out: int = 1) -> tuple[Split, Split, Split]:
    """Chronological 70/10/20 split (floor on the first two parts).

    Rejects series too short to give every part a step. Whether a part can
    hold a full ``steps_in + steps_out`` window is checked when windowing.
    """
    total = readings.shape[0]
    if total < 10:
        raise ValueError(f"{total} steps is too short for a 7:1:2 split; need >= 10")
    if steps_in < 1 or steps_out < 1:
        raise ValueError("window lengths must be positive")
    n_train = 7 * total // 10
    n_val = total // 10
    return (Split(readings[:n_train], 0),
            Split(readings[n_train:n_train + n_val], n_train),
            Split(readings[n_train + n_val:], n_train + n_val))


@dataclass
class WindowSet:
    x: np.ndarray  # (S, T, N, C)
    y: np.ndarray  # (S, T', N, C)
    start_steps: np.ndarray  # absolute step of each input window start
    start_times: list[dt.datetime]
    target_times: list[dt.datetime]
    pattern_ids: np.ndarray
    incident: np.ndarray  # bool

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.x[idx], self.y[idx], self.start_steps[idx],
                         [self.start_times[i] for i in idx], [self.target_times[i] for i in idx],
                         self.pattern_ids[idx], self.incident[idx])

    def batches(self, size: int, rng: np.random.Generator | None = None) -> Iterator["WindowSet"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), size):
            yield self.subset(order[lo:lo + size])


def make_windows(split: Split, timestamps: Sequence[dt.datetime], steps_in: int, steps_out: int,
                 calendar: PatternCalendar, incidents: Sequence[Incident] = ()) -> WindowSet:
    """Stride-1 windows inside one split, tagged with the pattern of the input
    start time and whether any incident overlaps the target window."""
    length = len(split)
    if length < steps_in + steps_out:
        raise ValueError(f"split of {length} steps is shorter than one window ({steps_in + steps_out})")
    count = length - (steps_in + steps_out) + 1
    starts = np.arange(count)
    x = np.stack([split.values[s:s + steps_in] for s in starts]) if count else np.zeros(0)
    y = np.stack([split.values[s + steps_in:s + steps_in + steps_out] for s in starts])
    absolute = starts + split.offset
    start_times = [timestamps[s] for s in absolute]
    target_times = [timestamps[s + steps_in] for s in absolute]
    ids = np.array([assign_pattern(t, calendar) for t in start_times], dtype=np.int64)
    flags = np.zeros(count, dtype=bool)
    for e in incidents:
        lo = e.start - steps_in - steps_out + 1  # earliest window start whose target meets e
        hi = e.start + e.duration - steps_in  # exclusive
        a, b = max(lo - split.offset, 0), min(hi - split.offset, count)
        if a < b:
            flags[a:b] = True
    return WindowSet(x, y, absolute, start_times, target_times, ids, flags)
