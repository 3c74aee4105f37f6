"""Run configuration: one JSON document, every field overridable with
``--section.key=value`` (or ``--key=value`` when the key is unambiguous)."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields

from ..backbone import ModelConfig
from ..losses import LossWeights

SEED_ENV = "DUALCAST_SEED"

DEFAULTS = {
    "seed": 0,
    "model": asdict(ModelConfig()),
    "loss": {"alpha": 0.0, "beta": 0.0, "gamma": 0.0, "p_norm": 2, "permutation": "shift"},
    "calendar": {"morning": ["06:00", "09:00"], "evening": ["16:00", "22:00"],
                 "complex_window": ["16:00", "20:00"]},
    "optimizer": {"lr": 0.001, "epochs": 30, "batch_size": 16},
    "data": {"manifest": None, "holidays": None},
    "output_dir": "runs/default",
}


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    permutation: str = "shift"  # or "random": seeded derangement per batch
    calendar: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["calendar"]))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    manifest: str | None = None
    holidays: str | None = None
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        loss = asdict(self.loss)
        loss["permutation"] = self.permutation
        return {
            "seed": self.seed,
            "model": asdict(self.model),
            "loss": loss,
            "calendar": copy.deepcopy(self.calendar),
            "optimizer": asdict(self.optimizer),
            "data": {"manifest": self.manifest, "holidays": self.holidays},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        merged = _merge(copy.deepcopy(DEFAULTS), raw)
        loss = dict(merged["loss"])
        permutation = loss.pop("permutation", "shift")
        if permutation not in ("shift", "random"):
            raise ValueError(f"unknown permutation mode {permutation!r}")
        _reject_unknown("model", merged["model"], ModelConfig)
        _reject_unknown("loss", loss, LossWeights)
        _reject_unknown("optimizer", merged["optimizer"], OptimizerConfig)
        return cls(
            seed=int(merged["seed"]),
            model=ModelConfig(**merged["model"]),
            loss=LossWeights(**loss),
            permutation=permutation,
            calendar=merged["calendar"],
            optimizer=OptimizerConfig(**merged["optimizer"]),
            manifest=merged["data"].get("manifest"),
            holidays=merged["data"].get("holidays"),
            output_dir=merged["output_dir"],
        )

    def with_weights(self, alpha: float, beta: float, gamma: float) -> "RunConfig":
        out = copy.deepcopy(self)
        out.loss = LossWeights(alpha, beta, gamma, self.loss.p_norm)
        return out


def _reject_unknown(section: str, values: dict, cls) -> None:
    known = {f.name for f in fields(cls)}
    extra = set(values) - known
    if extra:
        raise ValueError(f"unknown {section} field(s): {sorted(extra)}")


def _merge(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``--a.b=value`` flags to a nested config dict (values parsed as
    JSON when possible). A bare ``--key=value`` must name exactly one leaf."""
    raw = _merge(copy.deepcopy(DEFAULTS), copy.deepcopy(raw))
    for flag in overrides:
        if not flag.startswith("--") or "=" not in flag:
            raise ValueError(f"override {flag!r} is not of the form --key=value")
        key, value = flag[2:].split("=", 1)
        path = key.split(".")
        if len(path) == 1 and path[0] not in raw:
            hits = [s for s, sub in raw.items() if isinstance(sub, dict) and path[0] in sub]
            if len(hits) != 1:
                raise ValueError(f"override key {key!r} matches {len(hits)} sections; use section.key")
            path = [hits[0], path[0]]
        node = raw
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"unknown config section in {key!r}")
            node = node[part]
        if path[-1] not in node:
            raise ValueError(f"unknown config field {key!r}")
        node[path[-1]] = _parse_value(value)
    return raw


def load_run_config(path: str | None, overrides: list[str] = (), seed_flag_given: bool = False) -> RunConfig:
    raw: dict = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        data = raw.get("data", {})
        for key in ("manifest", "holidays"):
            if data.get(key) and not os.path.isabs(data[key]):
                data[key] = os.path.join(base, data[key])
    given = any(o.startswith("--seed=") for o in overrides) or seed_flag_given
    raw = apply_overrides(raw, list(overrides))
    if not given and os.environ.get(SEED_ENV):
        raw["seed"] = int(os.environ[SEED_ENV])
    return RunConfig.from_dict(raw)
