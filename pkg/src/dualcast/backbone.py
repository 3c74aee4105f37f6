"""The dual-branch forecaster.

A gate splits the input into intrinsic and environment signals, each branch
encodes its signal with stacked spatial-temporal layers, decodes it to a
``(B, T', N, D)`` representation and pools a ``(B, D)`` graph summary. The
prototype of each sample's calendar pattern is added to the intrinsic half of
the concatenated representation before the output projection.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndtensor as nd
from .attention import CrossTimeAttention, TemporalAttention
from .graphs import CrossTimeAdjacency, SensorGraph, build_rct_adjacency, build_sim_adjacency, from_edges
from .layers import Linear, Module, uniform_param
from .ndtensor import Tensor
from .patterns import N_PATTERNS, init_prototypes, one_hot_membership

STRUCTURES = ("sequential", "parallel")
FUSIONS = ("add", "concat", "gate")


@dataclass
class ModelConfig:
    d_model: int = 16
    n_layers: int = 2
    n_levels: int = 2
    structure: str = "sequential"
    fusion: str = "add"
    steps_in: int = 12
    steps_out: int = 12
    channels: int = 1
    span: int = 1
    causal: bool = True
    adjacency: str = "rct"  # or "sim": one flat level over the two-hop matrix

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}; expected one of {STRUCTURES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.adjacency not in ("rct", "sim"):
            raise ValueError(f"unknown adjacency {self.adjacency!r}")
        for name in ("d_model", "steps_in", "steps_out", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0 or self.n_levels < 0 or self.span < 0:
            raise ValueError("n_layers, n_levels and span must be nonnegative")


class DisentangleGate(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.proj = Linear(rng, channels, 2)

    def __call__(self, x: Tensor):
        mu = nd.softmax(self.proj(x), axis=-1)  # (B, T, N, 2)
        mu_i, mu_e = mu[..., 0:1], mu[..., 1:2]
        return x * mu_i, x * mu_e, mu_i, mu_e


class STLayer(Module):
    """Spatial + temporal attention with a residual connection."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.d_model
        levels = 1 if cfg.adjacency == "sim" else cfg.n_levels
        self.spatial = CrossTimeAttention(rng, d, d, levels)
        self.temporal = TemporalAttention(rng, d, d, cfg.causal)
        self._structure = cfg.structure
        self._fusion = cfg.fusion
        if cfg.structure == "parallel" and cfg.fusion == "concat":
            self.merge = Linear(rng, 2 * d, d)
        elif cfg.structure == "parallel" and cfg.fusion == "gate":
            self.gate_sp = Linear(rng, d, d, bias=False)
            self.gate_te = Linear(rng, d, d)

    def fuse(self, h_sp: Tensor, h_te: Tensor) -> Tensor:
        if self._fusion == "add":
            return h_sp + h_te
        if self._fusion == "concat":
            return self.merge(nd.concat([h_sp, h_te], axis=-1))
        z = nd.sigmoid(self.gate_sp(h_sp) + self.gate_te(h_te))
        return z * h_sp + (1.0 - z) * h_te

    def __call__(self, h: Tensor, adj: CrossTimeAdjacency) -> Tensor:
        if self._structure == "sequential":
            out = self.temporal(self.spatial(h, adj))
        else:
            out = self.fuse(self.spatial(h, adj), self.temporal(h))
        return out + h


class Branch(Module):
    """Encoder (lift + STLayers), decoder (time mixing + feature map) and readout."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d, t_in, t_out = cfg.d_model, cfg.steps_in, cfg.steps_out
        self.lift = Linear(rng, cfg.channels, d)
        self.layers = [STLayer(rng, cfg) for _ in range(cfg.n_layers)]
        self.dec_time = uniform_param(rng, (t_out, t_in), t_in)
        self.dec_time_bias = uniform_param(rng, (t_out, 1), t_in)
        self.dec_feat = Linear(rng, d, d)
        self.read_time = uniform_param(rng, (1, t_out), t_out)

    def encode(self, x: Tensor, adj: CrossTimeAdjacency) -> Tensor:
        h = self.lift(x)
        for layer in self.layers:
            h = layer(h, adj)
        return h

    def decode(self, h: Tensor) -> Tensor:
        b, t, n, d = h.shape
        mixed = nd.matmul(self.dec_time, nd.reshape(h, (b, t, n * d))) + self.dec_time_bias
        return self.dec_feat(nd.reshape(mixed, (b, -1, n, d)))

    def readout(self, z: Tensor) -> Tensor:
        b, t, n, d = z.shape
        pooled = nd.matmul(self.read_time, nd.reshape(z, (b, t, n * d)))  # (B, 1, N*D)
        return nd.mean(nd.reshape(pooled, (b, n, d)), axis=1)

    def __call__(self, x: Tensor, adj: CrossTimeAdjacency) -> tuple[Tensor, Tensor]:
        z = self.decode(self.encode(x, adj))
        return z, self.readout(z)


def fuse_prototypes(z_i: Tensor, z_e: Tensor, psi: Tensor, w: np.ndarray) -> Tensor:
    """Concat(Z_i + W Psi, Z_e) over the feature axis."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape != (z_i.shape[0], psi.shape[0]):
        raise nd.ShapeError(f"membership {w.shape} does not match batch {z_i.shape[0]} x {psi.shape[0]} patterns")
    if not (np.isin(w, (0.0, 1.0)).all() and (w.sum(axis=1) == 1).all()):
        raise ValueError("membership rows must be one-hot")
    if z_i.shape != z_e.shape or z_i.shape[1:] != psi.shape[1:]:
        raise nd.ShapeError(f"branch outputs {z_i.shape}, {z_e.shape} and prototypes {psi.shape} do not conform")
    flat = nd.reshape(psi, (psi.shape[0], -1))
    added = nd.reshape(nd.matmul(Tensor(w), flat), z_i.shape)
    return nd.concat([z_i + added, z_e], axis=-1)


@dataclass
class ForwardResult:
    pred: Tensor
    z_i: Tensor
    z_e: Tensor
    g_i: Tensor
    g_e: Tensor
    x_i: Tensor
    x_e: Tensor
    mu_i: Tensor
    mu_e: Tensor
    membership: np.ndarray = field(repr=False)


class DualCast(Module):
    def __init__(self, cfg: ModelConfig, graph: SensorGraph, seed: int = 0):
        if cfg.steps_in != cfg.steps_out:
            raise ValueError("prototype fusion needs steps_in == steps_out")
        self._cfg = cfg
        self._graph = graph
        self._adj = self._build_adjacency(graph)
        rng = np.random.default_rng(seed)
        self.gate = DisentangleGate(rng, cfg.channels)
        self.ibranch = Branch(rng, cfg)
        self.ebranch = Branch(rng, cfg)
        self.prototypes = init_prototypes(cfg.steps_out, graph.n_nodes, cfg.d_model, seed + 1)
        self.output = Linear(rng, 2 * cfg.d_model, cfg.channels)

    def _build_adjacency(self, graph: SensorGraph) -> CrossTimeAdjacency:
        build = build_sim_adjacency if self._cfg.adjacency == "sim" else build_rct_adjacency
        return build(graph, self._cfg.steps_in, self._cfg.span)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def graph(self) -> SensorGraph:
        return self._graph

    @property
    def adjacency(self) -> CrossTimeAdjacency:
        return self._adj

    def with_graph(self, graph: SensorGraph) -> "DualCast":
        """Shallow copy sharing every parameter but using another graph."""
        other = copy.copy(self)
        other._graph = graph
        other._adj = other._build_adjacency(graph)
        return other

    def project_output(self, z: Tensor) -> Tensor:
        return self.output(z)

    def __call__(self, x, pattern_ids) -> ForwardResult:
        x = nd.as_tensor(x)
        b, t, n, c = x.shape
        cfg = self._cfg
        if (t, n, c) != (cfg.steps_in, self._graph.n_nodes, cfg.channels):
            raise nd.ShapeError(f"input {x.shape} does not match (B, {cfg.steps_in}, {self._graph.n_nodes}, {cfg.channels})")
        x_i, x_e, mu_i, mu_e = self.gate(x)
        z_i, g_i = self.ibranch(x_i, self._adj)
        z_e, g_e = self.ebranch(x_e, self._adj)
        w = one_hot_membership(pattern_ids)
        pred = self.project_output(fuse_prototypes(z_i, z_e, self.prototypes, w))
        return ForwardResult(pred, z_i, z_e, g_i, g_e, x_i, x_e, mu_i, mu_e, w)


def forward(model: DualCast, x, timestamps, calendar) -> ForwardResult:
    """Run the model, deriving pattern ids from per-sample start timestamps."""
    from .patterns import assign_pattern

    return model(x, [assign_pattern(ts, calendar) for ts in timestamps])


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"
PAYLOAD = "params.bin"


def save_checkpoint(model: DualCast, path, meta: dict | None = None) -> None:
    """Directory with a key/value manifest and a little-endian float64 payload
    holding the parameters in manifest order."""
    os.makedirs(path, exist_ok=True)
    meta = dict(meta or {})
    meta["model"] = asdict(model.config)
    meta["graph"] = {"n_nodes": model.graph.n_nodes, "edges": [list(e) for e in model.graph.edges]}
    lines = ["format = dualcast-checkpoint-1"]
    for key in sorted(meta):
        lines.append(f"meta.{key} = {json.dumps(meta[key], sort_keys=True)}")
    params = list(model.named_parameters())
    for name, p in params:
        lines.append(f"param.{name} = {','.join(map(str, p.shape)) or 'scalar'}")
    with open(os.path.join(path, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = np.concatenate([p.data.reshape(-1) for _, p in params]) if params else np.zeros(0)
    payload.astype("<f8").tofile(os.path.join(path, PAYLOAD))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    state: dict[str, np.ndarray] = {}
    meta: dict = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    with open(os.path.join(path, MANIFEST)) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ValueError(f"{MANIFEST} line {lineno}: expected 'key = value'")
            if key.startswith("meta."):
                meta[key[5:]] = json.loads(value)
            elif key.startswith("param."):
                shape = () if value == "scalar" else tuple(int(s) for s in value.split(","))
                shapes.append((key[6:], shape))
            elif key == "format" and value != "dualcast-checkpoint-1":
                raise ValueError(f"unsupported checkpoint format {value!r}")
    payload = np.fromfile(os.path.join(path, PAYLOAD), dtype="<f8")
    expected = sum(int(np.prod(s)) for _, s in shapes)
    if payload.size != expected:
        raise ValueError(f"payload holds {payload.size} values, manifest declares {expected}")
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        state[name] = payload[offset:offset + count].reshape(shape).astype(np.float64)
        offset += count
    return state, meta


def load_checkpoint(path) -> tuple[DualCast, dict]:
    state, meta = read_checkpoint(path)
    graph = from_edges(meta["graph"]["n_nodes"], [tuple(e) for e in meta["graph"]["edges"]])
    model = DualCast(ModelConfig(**meta["model"]), graph)
    model.load_state_dict(state)
    return model, meta
