"""GCN, GAT and Graph-MLP forward passes on the autodiff tape."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .graph import Graph, batch_adjacency
from .tensor import CsrMatrix, ShapeError, Tape, Tensor

ARCHS = ("gcn", "gat", "graphmlp")


class ConfigError(ValueError):
    """Invalid model or method configuration."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    num_layers: int = 2
    hidden_dim: int = 64
    norm: str = "id"
    residual: bool = False
    input_dropout: float = 0.0
    model_dropout: float = 0.5
    attn_dropout: float = 0.0
    heads: int = 8
    nc_layer: int = -2
    nc_weight: float = 1.0
    tau: float = 1.0
    r: int = 3
    batch_fraction: float = 1.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.num_layers < 2:
            raise ConfigError("num_layers must be at least 2")
        if self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("hidden_dim and heads must be positive")
        if self.norm not in ("id", "ln"):
            raise ConfigError("norm must be 'id' or 'ln'")
        for name in ("input_dropout", "model_dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.nc_layer >= 0:
            raise ConfigError("nc_layer must be negative (-1 is the output layer)")
        if self.arch == "graphmlp" and -self.nc_layer > self.num_layers:
            raise ConfigError("|nc_layer| exceeds the number of layers")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ConfigError("batch_fraction must lie in (0, 1]")
        if not 1 <= self.r <= 4:
            raise ConfigError("r must be in 1..4")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ParamSet:
    """Ordered named tensors stored in one flat float64 buffer.

    ``ps[name]`` is a view into ``ps.flat``, so flat-vector updates made by the
    optimiser are seen by every named tensor and vice versa.
    """

    def __init__(self, layout, flat=None):
        self.layout = [(str(n), tuple(int(s) for s in shape)) for n, shape in layout]
        names = [n for n, _ in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos
        if flat is None:
            flat = np.zeros(pos)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pos,):
            raise ShapeError(f"flat buffer has {flat.shape}, layout needs ({pos},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop = self.offsets[name]
        return self.flat[start:stop].reshape(dict(self.layout)[name])

    def __contains__(self, name):
        return name in self.offsets

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def items(self):
        for name, _ in self.layout:
            yield name, self[name]

    def copy(self) -> ParamSet:
        return ParamSet(self.layout, self.flat.copy())

    def with_flat(self, flat) -> ParamSet:
        return ParamSet(self.layout, flat)

    def leaves(self) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in self.items()}

    def gather_grads(self, leaves: dict[str, Tensor]) -> np.ndarray:
        out = np.zeros(self.size)
        for name, t in leaves.items():
            if t.grad is not None:
                start, stop = self.offsets[name]
                out[start:stop] = t.grad.ravel()
        return out


# -- initialisation -------------------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def param_layout(cfg: ModelConfig, in_dim: int, num_classes: int) -> list[tuple[str, tuple]]:
    layout = []
    d_in = in_dim
    for layer in range(cfg.num_layers):
        last = layer == cfg.num_layers - 1
        p = f"layer{layer}"
        if cfg.arch == "gat":
            heads, width = (1, num_classes) if last else (cfg.heads, cfg.hidden_dim)
            layout += [
                (f"{p}.weight", (d_in, heads * width)),
                (f"{p}.att_src", (heads, width)),
                (f"{p}.att_dst", (heads, width)),
                (f"{p}.bias", (width if last else heads * width,)),
            ]
            d_out = width if last else heads * width
        else:
            d_out = num_classes if last else cfg.hidden_dim
            layout += [(f"{p}.weight", (d_in, d_out)), (f"{p}.bias", (d_out,))]
        if not last and cfg.norm == "ln":
            layout += [(f"{p}.ln_gain", (d_out,)), (f"{p}.ln_bias", (d_out,))]
        d_in = d_out
    return layout


def init_params(cfg: ModelConfig, in_dim: int, num_classes: int, seed) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet(param_layout(cfg, in_dim, num_classes))
    for name, arr in ps.items():
        kind = name.split(".", 1)[1]
        if kind == "weight":
            arr[...] = _glorot(rng, arr.shape, arr.shape[0], arr.shape[1])
        elif kind in ("att_src", "att_dst"):
            arr[...] = _glorot(rng, arr.shape, arr.shape[1], 1)
        elif kind == "ln_gain":
            arr[...] = 1.0
    return ps


# -- forward passes -------------------------------------------------------------------


def _input_features(x, p: float, train: bool, tape: Tape):
    """Apply input dropout to dense features or to the stored entries of CSR features."""
    if isinstance(x, CsrMatrix):
        if train and p > 0.0:
            mask = (tape.rng.random(x.nnz) >= p) / (1.0 - p)
            return x.with_values(x.values * mask)
        return x
    return tape.dropout(Tensor(x), p, train)


def _linear(x, w: Tensor, tape: Tape) -> Tensor:
    if isinstance(x, CsrMatrix):
        return tape.spmm(x, w)
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"feature dimension {x.shape[-1]} does not match weight {w.shape}")
    return tape.matmul(x, w)


def _hidden_post(h: Tensor, prev, p: dict, prefix: str, cfg: ModelConfig, act: str, tape: Tape) -> Tensor:
    if cfg.norm == "ln":
        h = tape.layer_norm(h, p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])
    h = tape.elementwise(act, h)
    if cfg.residual and isinstance(prev, Tensor) and prev.shape == h.shape:
        h = tape.add(h, prev)
    return h


def gcn_forward(prop: CsrMatrix, x, p: dict, cfg: ModelConfig, train: bool, tape: Tape) -> Tensor:
    """Stacked propagate-transform layers: A_hat (H W) + b, norm, ReLU, dropout."""
    h = _input_features(x, cfg.input_dropout, train, tape)
    for layer in range(cfg.num_layers):
        prefix = f"layer{layer}"
        # A_hat (H W) == (A_hat H) W; transforming first keeps the sparse product narrow
        out = tape.spmm(prop, _linear(h, p[f"{prefix}.weight"], tape))
        out = tape.add(out, p[f"{prefix}.bias"])
        if layer == cfg.num_layers - 1:
            return out
        out = _hidden_post(out, h, p, prefix, cfg, "relu", tape)
        h = tape.dropout(out, cfg.model_dropout, train)
    raise AssertionError("unreachable")


def gat_layer(adj: CsrMatrix, h, p: dict, prefix: str, heads: int, width: int, attn_dropout: float,
              train: bool, tape: Tape, concat: bool = True) -> Tensor:
    """One multi-head attention layer over the stored entries (neighbourhoods) of ``adj``."""
    n = adj.num_rows
    wh = tape.reshape(_linear(h, p[f"{prefix}.weight"], tape), (n, heads, width))
    src = tape.sum(tape.mul(wh, p[f"{prefix}.att_src"]), axis=2)
    dst = tape.sum(tape.mul(wh, p[f"{prefix}.att_dst"]), axis=2)
    scores = tape.leaky_relu(tape.edge_logits(adj, src, dst), 0.2)
    att = tape.edge_softmax(adj, scores)
    att = tape.edge_dropout(att, attn_dropout, train)
    out = tape.edge_aggregate(adj, att, wh)
    if concat:
        out = tape.reshape(out, (n, heads * width))
    else:
        out = tape.scale(tape.sum(out, axis=1), 1.0 / heads)
    return tape.add(out, p[f"{prefix}.bias"])


def gat_forward(adj: CsrMatrix, x, p: dict, cfg: ModelConfig, train: bool, tape: Tape) -> Tensor:
    """Multi-head GAT: concatenated heads in hidden layers, one averaged head at the output.

    ``adj`` supplies the neighbourhood structure (self-loops included); its
    values are ignored.
    """
    h = _input_features(x, cfg.input_dropout, train, tape)
    for layer in range(cfg.num_layers):
        prefix = f"layer{layer}"
        if layer == cfg.num_layers - 1:
            c = p[f"{prefix}.bias"].shape[0]
            return gat_layer(adj, h, p, prefix, 1, c, cfg.attn_dropout, train, tape, concat=False)
        out = gat_layer(adj, h, p, prefix, cfg.heads, cfg.hidden_dim, cfg.attn_dropout, train, tape)
        out = _hidden_post(out, h, p, prefix, cfg, "elu", tape)
        h = tape.dropout(out, cfg.model_dropout, train)
    raise AssertionError("unreachable")


def graphmlp_forward(x, p: dict, cfg: ModelConfig, train: bool, tape: Tape) -> tuple[Tensor, Tensor]:
    """Plain MLP; returns (logits, embedding taken at layer ``cfg.nc_layer``).

    Layer outputs are numbered from the end: -1 is the logits, -2 the
    penultimate layer's output after its activation, and so on.
    """
    want = cfg.num_layers + cfg.nc_layer
    if not 0 <= want < cfg.num_layers:
        raise ConfigError("|nc_layer| exceeds the number of layers")
    h = _input_features(x, cfg.input_dropout, train, tape)
    z = None
    for layer in range(cfg.num_layers):
        prefix = f"layer{layer}"
        out = tape.add(_linear(h, p[f"{prefix}.weight"], tape), p[f"{prefix}.bias"])
        if layer == cfg.num_layers - 1:
            return out, (out if z is None else z)
        out = _hidden_post(out, h, p, prefix, cfg, "relu", tape)
        if layer == want:
            z = out
        h = tape.dropout(out, cfg.model_dropout, train)
    raise AssertionError("unreachable")


def nc_loss(z: Tensor, a_batch: np.ndarray, tau: float, tape: Tape) -> Tensor:
    """Neighbour-contrastive loss averaged over vertices with at least one batch neighbour.

    For vertex i: -log( sum_{j!=i} a_ij exp(tau cos(z_i, z_j)) / sum_{k!=i} exp(tau cos(z_i, z_k)) ).
    """
    b = z.shape[0]
    a = np.array(a_batch, dtype=np.float64, copy=True)
    if a.shape != (b, b):
        raise ShapeError(f"nc_loss: adjacency block {a.shape} for batch of {b}")
    if b < 2:
        return Tensor(0.0)
    np.fill_diagonal(a, 0.0)
    valid = np.flatnonzero(a.sum(axis=1) > 0)
    if len(valid) == 0:
        return Tensor(0.0)
    off = 1.0 - np.eye(b)
    zn = tape.row_normalize(z)
    sim = tape.exp(tape.scale(tape.matmul(zn, tape.transpose(zn)), tau))
    num = tape.sum(tape.mul(sim, a), axis=1)
    den = tape.sum(tape.mul(sim, off), axis=1)
    per = tape.sub(tape.log(tape.take_rows(den, valid)), tape.log(tape.take_rows(num, valid)))
    return tape.mean(per)


# -- dispatch -------------------------------------------------------------------------


def model_inputs(g: Graph):
    """Features as CSR when sparse (bag-of-words style), else the dense array."""
    xs = g.sparse_features()
    return xs if xs is not None else g.features


def forward(cfg: ModelConfig, g: Graph, p: dict, train: bool, tape: Tape, rows=None):
    """Logits for ``rows`` of ``g`` (all vertices when None) plus the Graph-MLP embedding.

    Message-passing models always compute the whole graph and then select
    rows; Graph-MLP only evaluates the requested rows.
    """
    if cfg.arch == "graphmlp":
        xs = g.sparse_features()
        if rows is None:
            x = xs if xs is not None else g.features
        elif xs is not None:
            x = CsrMatrix.from_scipy(xs.to_scipy()[np.asarray(rows)])
        else:
            x = g.features[rows]
        return graphmlp_forward(x, p, cfg, train, tape)
    x = model_inputs(g)
    if cfg.arch == "gcn":
        logits = gcn_forward(g.normalized_adjacency().base, x, p, cfg, train, tape)
    else:
        logits = gat_forward(g.normalized_adjacency().base, x, p, cfg, train, tape)
    if rows is not None:
        logits = tape.take_rows(logits, rows)
    return logits, None


def graphmlp_batch_loss(cfg: ModelConfig, g: Graph, p: dict, batch, train_pos, labels, tape: Tape):
    """Cross-entropy on the batch's training vertices plus weighted NC loss on the batch."""
    logits, z = forward(cfg, g, p, True, tape, rows=batch)
    loss = tape.masked_cross_entropy(logits, labels, train_pos)
    if cfg.nc_weight != 0.0:
        a = batch_adjacency(g.normalized_adjacency().power(cfg.r), batch)
        loss = tape.add(loss, tape.scale(nc_loss(z, a, cfg.tau, tape), cfg.nc_weight))
    return loss, logits


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(path, params: ParamSet, cfg: ModelConfig, extra: dict | None = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path stem>.f64`` (little-endian float64 buffer)."""
    path = Path(path)
    buf = path.with_suffix(".f64")
    manifest = {
        "model": cfg.to_dict(),
        "buffer": buf.name,
        "params": [{"name": n, "shape": list(s)} for n, s in params.layout],
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    params.flat.astype("<f8").tofile(buf)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    layout = [(e["name"], tuple(e["shape"])) for e in manifest["params"]]
    flat = np.fromfile(path.parent / manifest["buffer"], dtype="<f8").astype(np.float64)
    return ParamSet(layout, flat), manifest
