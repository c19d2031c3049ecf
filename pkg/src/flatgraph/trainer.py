"""Training loop with early stopping, graph views per mode, metrics and multi-seed driver."""
from __future__ import annotations

import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Split
from .flatmin import MethodConfig, compose_step, init_states, saf_loss
from .graph import Graph, batch_adjacency, induced_subgraph
from .models import ModelConfig, ParamSet, forward, init_params, nc_loss
from .tensor import NumericError, Tape

log = logging.getLogger("flatgraph.trainer")

MODES = ("transductive", "inductive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    method: MethodConfig = field(default_factory=MethodConfig)
    lr: float = 0.01
    weight_decay: float = 0.0
    patience: int = 100
    max_epochs: int = 20000
    mode: str = "transductive"
    seed: int = 0
    shared_masks: bool = True
    normalize_features: bool = True
    max_retries: int = 3

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < self.patience:
            raise ValueError("max_epochs must be at least patience")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    def with_seed(self, seed: int) -> RunConfig:
        from dataclasses import replace

        return replace(self, seed=int(seed))


@dataclass
class RunResult:
    seed: int
    metric: str = "accuracy"
    stop_epoch: int = 0
    best_val_epoch: int = 0
    best_val_metric: float = float("nan")
    final_test_metric: float = float("nan")
    averaged_test_metric: float | None = None
    final_train_loss: float = float("nan")
    total_epochs: int = 0
    val_curve: list = field(default_factory=list)
    wall_time: float = 0.0
    retries: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    params: np.ndarray | None = field(default=None, repr=False)

    @property
    def reported_metric(self) -> float:
        """Averaged-model score when averaging ran, else the restored final model's."""
        return self.averaged_test_metric if self.averaged_test_metric is not None else self.final_test_metric

    def to_json(self) -> str:
        # wall_time is left out so result files are reproducible byte for byte
        body = {
            "seed": self.seed,
            "failed": self.failed,
            "error": self.error,
            "retries": self.retries,
            "metric": self.metric,
            "stop_epoch": self.stop_epoch,
            "best_val_epoch": self.best_val_epoch,
            "best_val_metric": _num(self.best_val_metric),
            "final_test_metric": _num(self.final_test_metric),
            "averaged_test_metric": _num(self.averaged_test_metric),
            "reported_metric": _num(self.reported_metric),
            "final_train_loss": _num(self.final_train_loss),
            "total_epochs": self.total_epochs,
            "val_curve": [_num(v) for v in self.val_curve],
        }
        return json.dumps(body, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> RunResult:
        d = json.loads(line)
        d.pop("reported_metric", None)
        for k in ("best_val_metric", "final_test_metric", "final_train_loss"):
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


# -- metrics ------------------------------------------------------------------------


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def weighted_macro_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    """Per-class F1 weighted by class support; 0 when no class has support."""
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if pred.shape != labels.shape:
        raise ValueError("pred and labels must have the same shape")
    tp = np.sum(pred & labels, axis=0).astype(np.float64)
    fp = np.sum(pred & ~labels, axis=0)
    fn = np.sum(~pred & labels, axis=0)
    support = labels.sum(axis=0).astype(np.float64)
    if support.sum() == 0:
        return 0.0
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.sum(f1 * support) / support.sum())


# -- graph views --------------------------------------------------------------------


def row_normalize_features(g: Graph) -> Graph:
    """Copy of ``g`` with every feature row scaled to unit L1 norm (zero rows untouched)."""
    s = np.abs(g.features).sum(axis=1, keepdims=True)
    x = np.divide(g.features, s, out=np.zeros_like(g.features), where=s > 0)
    return Graph(g.num_vertices, x, g.labels, g.adj, g.num_classes, g.multilabel)


@dataclass
class Views:
    """Graphs and index sets used for training, validation and test."""

    train_g: Graph
    train_idx: np.ndarray
    val_g: Graph
    val_idx: np.ndarray
    test_g: Graph
    test_idx: np.ndarray


def prepare_graph(cfg: RunConfig, g: Graph) -> Graph:
    return row_normalize_features(g) if cfg.normalize_features else g


def build_views(g: Graph, split: Split, mode: str) -> Views:
    if mode == "transductive":
        return Views(g, split.train, g, split.val, g, split.test)
    train_g, kept = induced_subgraph(g, split.train)
    val_g, kept_v = induced_subgraph(g, np.union1d(split.train, split.val))
    return Views(
        train_g,
        np.searchsorted(kept, split.train),
        val_g,
        np.searchsorted(kept_v, split.val),
        g,
        split.test,
    )


def predict(model: ModelConfig, layout, flat: np.ndarray, g: Graph) -> np.ndarray:
    """Eval-mode logits for every vertex of ``g``."""
    tape = Tape(0)
    logits, _ = forward(model, g, ParamSet(layout, flat).leaves(), False, tape)
    return logits.data


def evaluate(model: ModelConfig, params: ParamSet, g: Graph, idx, metric: str | None = None) -> float:
    """Accuracy (single-label) or weighted macro-F1 (multilabel) with dropout off."""
    if metric not in (None, "accuracy", "weighted_f1"):
        raise ValueError(f"unknown metric {metric!r}")
    logits = predict(model, params.layout, params.flat, g)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("evaluate: empty vertex set")
    if metric == "weighted_f1" or (metric is None and g.multilabel):
        labels = g.labels[idx]
        if not g.multilabel:
            labels = np.eye(g.num_classes, dtype=bool)[labels]
            pred = np.eye(g.num_classes, dtype=bool)[np.argmax(logits[idx], axis=1)]
        else:
            pred = logits[idx] > 0.0
        return weighted_macro_f1(pred, labels)
    if g.multilabel:
        raise ValueError("accuracy is undefined for multilabel data")
    return accuracy(logits[idx], g.labels[idx])


def supervised_loss(model: ModelConfig, layout, flat: np.ndarray, g: Graph, idx) -> float:
    """Eval-mode classification loss on ``idx`` (no dropout, no auxiliary terms)."""
    tape = Tape(0)
    logits, _ = forward(model, g, ParamSet(layout, flat).leaves(), False, tape)
    if g.multilabel:
        return float(tape.multilabel_bce(logits, g.labels, idx).data)
    return float(tape.masked_cross_entropy(logits, g.labels, idx).data)


# -- training -----------------------------------------------------------------------


class _Objective:
    """Builds the per-epoch evaluator: loss and flat gradient at arbitrary parameters."""

    def __init__(self, cfg: RunConfig, views: Views, layout, seed: int):
        self.cfg = cfg
        self.model = cfg.model
        self.g = views.train_g
        self.train_idx = views.train_idx
        self.layout = layout
        self.seed = seed
        n = self.g.num_vertices
        self.is_mlp = self.model.arch == "graphmlp"
        # SAF records outputs over the batch pool: all vertices for Graph-MLP, else the training vertices
        self.pool_size = n if self.is_mlp else len(self.train_idx)
        self.train_pos = np.full(n, -1, dtype=np.int64)
        self.train_pos[self.train_idx] = np.arange(len(self.train_idx))

    def batch(self, epoch: int) -> np.ndarray:
        n = self.g.num_vertices
        size = math.ceil(self.model.batch_fraction * n)
        if size >= n:
            return np.arange(n)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch, 1]))
        return np.sort(rng.choice(n, size=size, replace=False))

    def loss_terms(self, tape: Tape, leaves, batch):
        """Supervised (+NC) loss, plus the output rows SAF compares and their pool positions."""
        g, model = self.g, self.model
        if self.is_mlp:
            logits, z = forward(model, g, leaves, True, tape, rows=batch)
            in_train = np.flatnonzero(self.train_pos[batch] >= 0)
            loss = None
            if in_train.size:
                loss = self._supervised(tape, logits, g.labels[batch], in_train)
            if model.nc_weight != 0.0:
                a = batch_adjacency(g.normalized_adjacency().power(model.r), batch)
                nc = tape.scale(nc_loss(z, a, model.tau, tape), model.nc_weight)
                loss = nc if loss is None else tape.add(loss, nc)
            if loss is None:
                raise ValueError("batch holds no training vertex and the NC loss is disabled")
            return loss, logits, batch
        logits, _ = forward(model, g, leaves, True, tape)
        loss = self._supervised(tape, logits, g.labels, self.train_idx)
        return loss, tape.take_rows(logits, self.train_idx), np.arange(len(self.train_idx))

    def _supervised(self, tape, logits, labels, idx):
        if self.g.multilabel:
            return tape.multilabel_bce(logits, labels, idx)
        return tape.masked_cross_entropy(logits, labels, idx)

    def evaluator(self, epoch: int):
        batch = self.batch(epoch) if self.is_mlp else None
        ps = ParamSet(self.layout)

        def run(flat, adversarial, saf):
            key = [self.seed, epoch] if (self.cfg.shared_masks or not adversarial) else [self.seed, epoch, 2]
            tape = Tape(np.random.SeedSequence(key))
            leaves = ps.with_flat(flat).leaves()
            loss, y_rows, pos = self.loss_terms(tape, leaves, batch)
            if saf is not None:
                y_prev, lam, tau = saf
                loss = tape.add(loss, saf_loss(y_rows, y_prev[pos], lam, tau, tape))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            grad = ps.gather_grads(leaves)
            outputs = np.full((self.pool_size, y_rows.shape[1]), np.nan)
            outputs[pos] = y_rows.data
            return value, grad, outputs

        return run


def loss_functions(cfg: RunConfig, g: Graph, split: Split, layout) -> dict:
    """Eval-mode train and test losses as functions of the flat parameter vector."""
    views = build_views(prepare_graph(cfg, g), split, cfg.mode)
    return {
        "train": lambda flat: supervised_loss(cfg.model, layout, flat, views.train_g, views.train_idx),
        "test": lambda flat: supervised_loss(cfg.model, layout, flat, views.test_g, views.test_idx),
    }


def _attempt(cfg: RunConfig, g: Graph, split: Split, seed: int) -> RunResult:
    views = build_views(g, split, cfg.mode)
    model = cfg.model
    ps = init_params(model, g.num_features, g.num_classes, np.random.SeedSequence([seed, 0x1417]))
    layout = ps.layout
    objective = _Objective(cfg, views, layout, seed)
    states = init_states(cfg.method, ps.flat, cfg.lr, cfg.weight_decay, seed)
    metric = "weighted_f1" if g.multilabel else "accuracy"

    def val_score(flat):
        return evaluate(model, ParamSet(layout, flat), views.val_g, views.val_idx)

    flat = ps.flat.copy()
    best_val, best_epoch, best_flat = -math.inf, 0, flat.copy()
    curve = []
    stop_epoch = cfg.max_epochs
    for epoch in range(1, cfg.max_epochs + 1):
        flat, _ = compose_step(cfg.method, objective.evaluator(epoch), flat, states, epoch)
        if not np.all(np.isfinite(flat)):
            raise NumericError(f"non-finite parameters at epoch {epoch}")
        v = val_score(flat)
        curve.append(v)
        if v > best_val:
            best_val, best_epoch, best_flat = v, epoch, flat.copy()
        if epoch - best_epoch >= cfg.patience:
            stop_epoch = epoch
            break

    total = stop_epoch
    averaged = None
    averager = states.averager
    if averager is not None:
        for epoch in range(stop_epoch + 1, stop_epoch + cfg.method.end + 1):
            flat, _ = compose_step(cfg.method, objective.evaluator(epoch), flat, states, epoch)
            averager.epochs_past_stop += 1
            total = epoch
        averager.active = False
        if averager.avg is not None:
            if not np.all(np.isfinite(averager.avg)):
                raise NumericError("non-finite averaged parameters")
            averaged = evaluate(model, ParamSet(layout, averager.avg), views.test_g, views.test_idx)
        else:
            log.warning("seed %d: averaging never started (begin=%d > last epoch %d)", seed, cfg.method.begin, total)

    final = ParamSet(layout, best_flat)
    return RunResult(
        seed=seed,
        metric=metric,
        stop_epoch=stop_epoch,
        best_val_epoch=best_epoch,
        best_val_metric=best_val,
        final_test_metric=evaluate(model, final, views.test_g, views.test_idx),
        averaged_test_metric=averaged,
        final_train_loss=supervised_loss(model, layout, best_flat, views.train_g, views.train_idx),
        total_epochs=total,
        val_curve=curve,
        params=best_flat,
    )


def derived_seed(seed: int, attempt: int) -> int:
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1)[0] & 0x7FFFFFFF)


def train(cfg: RunConfig, g: Graph, split: Split) -> RunResult:
    """Train one seed. Divergent attempts are retried with derived sub-seeds.

    ``cfg.seed`` identifies the run in the result; retries keep it and list
    the attempts that failed in ``retries``.
    """
    split.check_graph(g)
    g = prepare_graph(cfg, g)
    t0 = time.perf_counter()
    retries = []
    for attempt in range(cfg.max_retries + 1):
        sub = derived_seed(cfg.seed, attempt)
        try:
            res = _attempt(cfg, g, split, sub)
        except (NumericError, FloatingPointError) as exc:
            log.warning("seed %d attempt %d diverged: %s", cfg.seed, attempt, exc)
            retries.append({"attempt": attempt, "seed": sub, "error": str(exc)})
            continue
        res.seed = cfg.seed
        res.retries = retries
        res.wall_time = time.perf_counter() - t0
        return res
    return RunResult(seed=cfg.seed, failed=True, error=retries[-1]["error"], retries=retries,
                     wall_time=time.perf_counter() - t0)


# -- multiple seeds -----------------------------------------------------------------


def _run_one(args):
    cfg, g, split_fn, seed = args
    return train(cfg.with_seed(seed), g, split_fn(seed))


def multi_seed(cfg: RunConfig, g: Graph, split_fn, seeds, jobs: int = 1) -> list[RunResult]:
    """Run every seed (``split_fn(seed) -> Split``); results are sorted by seed."""
    seeds = sorted(int(s) for s in seeds)
    tasks = [(cfg, g, split_fn, s) for s in seeds]
    if jobs <= 1 or len(seeds) <= 1:
        results = []
        for t in tasks:
            r = _run_one(t)
            log.info("seed %d: %s %.4f (stop %d, %.1fs)", r.seed, "failed" if r.failed else "test",
                     r.reported_metric if not r.failed else float("nan"), r.stop_epoch, r.wall_time)
            results.append(r)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    return sorted(results, key=lambda r: r.seed)


def summarize(results: list[RunResult], baseline: list[RunResult] | None = None) -> dict:
    """Mean / sample SD over successful seeds; paired differences against ``baseline`` by seed."""
    ok = [r for r in results if not r.failed]
    vals = [r.reported_metric for r in ok]
    out = {
        "n": len(ok),
        "failed": [r.seed for r in results if r.failed],
        "mean": statistics.fmean(vals) if vals else None,
        "sd": statistics.stdev(vals) if len(vals) >= 2 else None,
        "per_seed": {str(r.seed): r.reported_metric for r in ok},
    }
    finals = [r.final_test_metric for r in ok]
    if any(r.averaged_test_metric is not None for r in ok):
        out["final_mean"] = statistics.fmean(finals)
    if baseline is not None:
        base = {r.seed: r.reported_metric for r in baseline if not r.failed}
        diffs = [r.reported_metric - base[r.seed] for r in ok if r.seed in base]
        out["paired"] = {
            "n": len(diffs),
            "mean": statistics.fmean(diffs) if diffs else None,
            "sd": statistics.stdev(diffs) if len(diffs) >= 2 else None,
        }
    return out


def write_results(results: list[RunResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in sorted(results, key=lambda r: r.seed)))
    return path


def read_results(path) -> list[RunResult]:
    return [RunResult.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
