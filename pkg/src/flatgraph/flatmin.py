"""Flat-minima methods as composable stages around Adam.

Every stage works on the flattened parameter vector of a :class:`ParamSet`.
A training step is driven by :func:`compose_step`, which calls an evaluator
``evaluator(flat, adversarial, saf) -> (loss, grad, outputs)`` once or twice.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .models import ConfigError
from .tensor import Tape, Tensor

SHARPNESS = ("sam", "asam", "pgn", "gsam")
METHOD_KEYS = (
    "sam.rho", "asam.rho", "pgn.alpha", "pgn.adv", "gsam.alpha", "gsam.adv",
    "swa.begin", "swa.end", "ewa.begin", "ewa.end", "ewa.alpha",
    "anti_pgd.sigma", "anti_pgd.stop_epoch",
    "saf.lambda", "saf.tau", "saf.start_epoch", "saf.gap",
)  # fmt: skip


# -- configuration ---------------------------------------------------------------------


@dataclass(frozen=True)
class MethodConfig:
    sharpness: str | None = None
    rho: float = 0.0
    alpha: float = 0.0
    adv: str = "sam"
    averaging: str | None = None
    begin: int = 0
    end: int = 0
    ewa_alpha: float = 0.0
    anti_pgd: bool = False
    sigma: float = 0.0
    stop_epoch: int = 0
    saf: bool = False
    saf_lambda: float = 0.0
    saf_tau: float = 1.0
    saf_start_epoch: int = 5
    saf_gap: int = 3

    def __post_init__(self):
        if self.sharpness is not None:
            if self.sharpness not in SHARPNESS:
                raise ConfigError(f"unknown sharpness stage {self.sharpness!r}")
            if self.rho < 0:
                raise ConfigError("rho must be non-negative")
            if self.adv not in ("sam", "asam"):
                raise ConfigError("adv must be 'sam' or 'asam'")
            if self.sharpness == "pgn" and not 0.0 <= self.alpha <= 1.0:
                raise ConfigError("pgn.alpha must lie in [0, 1]")
            if self.sharpness == "gsam" and self.alpha < 0.0:
                raise ConfigError("gsam.alpha must be non-negative")
        if self.averaging is not None:
            if self.averaging not in ("swa", "ewa"):
                raise ConfigError(f"unknown averaging stage {self.averaging!r}")
            if self.begin < 0 or self.end < 0:
                raise ConfigError("averaging begin/end must be non-negative")
            if self.averaging == "ewa" and not 0.0 <= self.ewa_alpha <= 1.0:
                raise ConfigError("ewa.alpha must lie in [0, 1]")
        if self.anti_pgd and (self.sigma < 0 or self.stop_epoch < 0):
            raise ConfigError("anti_pgd sigma and stop_epoch must be non-negative")
        if self.saf:
            if self.saf_tau <= 0 or self.saf_gap < 1 or self.saf_start_epoch < 1:
                raise ConfigError("saf needs tau > 0, gap >= 1, start_epoch >= 1")

    @property
    def adversarial(self) -> str | None:
        """Perturbation rule for the second gradient evaluation, if any."""
        if self.sharpness is None:
            return None
        return self.sharpness if self.sharpness in ("sam", "asam") else self.adv

    @property
    def is_empty(self) -> bool:
        return self.sharpness is None and self.averaging is None and not self.anti_pgd and not self.saf

    @classmethod
    def from_flat(cls, d: dict | None) -> MethodConfig:
        """Build from the dotted-key form used in experiment files."""
        d = dict(d or {})
        unknown = set(d) - set(METHOD_KEYS)
        if unknown:
            raise ConfigError(f"unknown method keys: {sorted(unknown)}")
        kw: dict = {}
        combiners = [m for m in ("pgn", "gsam") if f"{m}.alpha" in d or f"{m}.adv" in d]
        radii = [m for m in ("sam", "asam") if f"{m}.rho" in d]
        if len(combiners) > 1:
            raise ConfigError("at most one of pgn and gsam may be configured")
        if combiners:
            name = combiners[0]
            adv = d.get(f"{name}.adv", "sam")
            if f"{adv}.rho" not in d:
                raise ConfigError(f"{name} with adv={adv!r} needs {adv}.rho")
            if len(radii) > 1:
                raise ConfigError("conflicting sam.rho and asam.rho")
            kw.update(sharpness=name, alpha=float(d.get(f"{name}.alpha", 0.0)), adv=adv, rho=float(d[f"{adv}.rho"]))
        elif radii:
            if len(radii) > 1:
                raise ConfigError("at most one sharpness stage (sam or asam) may be configured")
            kw.update(sharpness=radii[0], rho=float(d[f"{radii[0]}.rho"]))
        avg = [m for m in ("swa", "ewa") if any(k.startswith(m + ".") for k in d)]
        if len(avg) > 1:
            raise ConfigError("at most one averaging stage (swa or ewa) may be configured")
        if avg:
            m = avg[0]
            kw.update(averaging=m, begin=int(d.get(f"{m}.begin", 0)), end=int(d.get(f"{m}.end", 0)))
            if m == "ewa":
                kw["ewa_alpha"] = float(d.get("ewa.alpha", 0.0))
        if any(k.startswith("anti_pgd.") for k in d):
            kw.update(anti_pgd=True, sigma=float(d.get("anti_pgd.sigma", 0.0)),
                      stop_epoch=int(d.get("anti_pgd.stop_epoch", 0)))
        if any(k.startswith("saf.") for k in d):
            kw.update(saf=True, saf_lambda=float(d.get("saf.lambda", 0.0)), saf_tau=float(d.get("saf.tau", 1.0)),
                      saf_start_epoch=int(d.get("saf.start_epoch", 5)), saf_gap=int(d.get("saf.gap", 3)))
        return cls(**kw)

    def to_flat(self) -> dict:
        out: dict = {}
        if self.sharpness in ("sam", "asam"):
            out[f"{self.sharpness}.rho"] = self.rho
        elif self.sharpness is not None:
            out[f"{self.adv}.rho"] = self.rho
            out[f"{self.sharpness}.alpha"] = self.alpha
            out[f"{self.sharpness}.adv"] = self.adv
        if self.averaging is not None:
            out[f"{self.averaging}.begin"] = self.begin
            out[f"{self.averaging}.end"] = self.end
            if self.averaging == "ewa":
                out["ewa.alpha"] = self.ewa_alpha
        if self.anti_pgd:
            out["anti_pgd.sigma"] = self.sigma
            out["anti_pgd.stop_epoch"] = self.stop_epoch
        if self.saf:
            out.update({"saf.lambda": self.saf_lambda, "saf.tau": self.saf_tau,
                        "saf.start_epoch": self.saf_start_epoch, "saf.gap": self.saf_gap})
        return out

    def label(self) -> str:
        """Short method name, e.g. ``ewa+gasam``."""
        parts = []
        if self.averaging:
            parts.append(self.averaging)
        if self.anti_pgd:
            parts.append("anti_pgd")
        if self.saf:
            parts.append("saf")
        if self.sharpness in ("sam", "asam"):
            parts.append(self.sharpness)
        elif self.sharpness == "pgn":
            parts.append("pgna" if self.adv == "asam" else "pgn")
        elif self.sharpness == "gsam":
            parts.append("gasam" if self.adv == "asam" else "gsam")
        return "+".join(parts) or "base"


# -- sharpness ----------------------------------------------------------------------


def sam_perturb(grad: np.ndarray, rho: float) -> np.ndarray:
    norm = np.linalg.norm(grad)
    if norm == 0.0 or rho == 0.0:
        return np.zeros_like(grad)
    return grad * (rho / norm)


def asam_perturb(params: np.ndarray, grad: np.ndarray, rho: float, eta: float = 1e-12) -> np.ndarray:
    t = np.abs(params) + eta
    norm = np.linalg.norm(t * grad)
    if norm == 0.0 or rho == 0.0:
        return np.zeros_like(grad)
    return (t * t * grad) * (rho / norm)


def pgn_combine(g_base: np.ndarray, g_adv: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0.0:
        return g_base.copy()
    if alpha == 1.0:
        return g_adv.copy()
    return (1.0 - alpha) * g_base + alpha * g_adv


def gsam_combine(g_base: np.ndarray, g_adv: np.ndarray, alpha: float) -> np.ndarray:
    sq = float(g_adv @ g_adv)
    if sq == 0.0:
        return g_base.copy()
    g_perp = g_base - (float(g_base @ g_adv) / sq) * g_adv
    return g_adv - alpha * g_perp


# -- Adam ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int, lr: float, weight_decay: float = 0.0) -> AdamState:
        return cls(lr=lr, m=np.zeros(size), v=np.zeros(size), weight_decay=weight_decay)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update with L2 decay folded into the gradient; mutates ``state``."""
    if state.m.shape != params.shape or grad.shape != params.shape:
        raise ValueError("adam_step: state, params and grad shapes differ")
    g = grad + state.weight_decay * params if state.weight_decay else grad
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step_count)
    v_hat = state.v / (1.0 - state.beta2**state.step_count)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- weight averaging -----------------------------------------------------------------


@dataclass
class AveragerState:
    kind: str
    alpha: float = 0.0
    avg: np.ndarray | None = None
    n_models: int = 0
    active: bool = True
    epochs_past_stop: int = 0


def swa_accumulate(state: AveragerState, params: np.ndarray) -> AveragerState:
    if state.avg is None:
        state.avg = params.copy()
    else:
        state.avg = (state.avg * state.n_models + params) / (state.n_models + 1)
    state.n_models += 1
    return state


def ewa_accumulate(state: AveragerState, params: np.ndarray, alpha: float) -> AveragerState:
    if state.avg is None:
        state.avg = params.copy()
    else:
        state.avg = alpha * state.avg + (1.0 - alpha) * params
    state.n_models += 1
    return state


def accumulate(state: AveragerState, params: np.ndarray) -> AveragerState:
    if state.kind == "swa":
        return swa_accumulate(state, params)
    return ewa_accumulate(state, params, state.alpha)


# -- anti-correlated noise ----------------------------------------------------------------


@dataclass
class NoiseState:
    sigma: float
    stop_after: int
    xi_prev: np.ndarray
    rng: np.random.Generator
    closed: bool = False

    @property
    def grid(self) -> float:
        # noise lives on a power-of-two grid so Xi_{n+1} - Xi_n is exact and the deltas telescope to 0
        return 2.0 ** (math.ceil(math.log2(self.sigma)) - 40)


def anti_pgd_delta(state: NoiseState, epoch: int) -> np.ndarray:
    """Additive parameter delta Xi_{n+1} - Xi_n; -Xi_last once at the stop epoch, then 0."""
    if state.sigma == 0.0 or state.closed:
        return np.zeros_like(state.xi_prev)
    if epoch < state.stop_after:
        q = state.grid
        xi = np.round(state.rng.normal(0.0, state.sigma, size=state.xi_prev.shape) / q) * q
        delta = xi - state.xi_prev
        state.xi_prev = xi
        return delta
    state.closed = True
    delta = -state.xi_prev
    state.xi_prev = np.zeros_like(delta)
    return delta


# -- trajectory alignment ----------------------------------------------------------------


class TrajectoryBuffer:
    """Ring buffer of the last ``depth`` training outputs."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ValueError("depth must be at least 1")
        self.depth = depth
        self.entries: deque[np.ndarray] = deque(maxlen=depth)

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) == self.depth

    def oldest(self) -> np.ndarray:
        return self.entries[0]

    def push(self, y: np.ndarray):
        self.entries.append(np.array(y, dtype=np.float64, copy=True))


def saf_loss(y_cur: Tensor, y_prev: np.ndarray, lam: float, tau: float, tape: Tape) -> Tensor:
    """lam/|B| * sum_i KL(softmax(y_prev_i / tau) || softmax(y_cur_i / tau)); y_prev is constant.

    Rows of ``y_prev`` containing NaN (vertices with no recorded output) are skipped.
    """
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if y_prev.shape != y_cur.shape:
        raise ValueError(f"saf_loss: shapes {y_prev.shape} and {y_cur.shape} differ")
    if lam == 0.0:
        return Tensor(0.0)
    rows = np.flatnonzero(np.all(np.isfinite(y_prev), axis=1))
    if len(rows) == 0:
        return Tensor(0.0)
    cur = y_cur if len(rows) == y_cur.shape[0] else tape.take_rows(y_cur, rows)
    # the reference side goes through the same ops so identical inputs give an exact 0
    ref = Tape().log_softmax_rows(Tensor(y_prev[rows] * (1.0 / tau))).data
    log_q = tape.log_softmax_rows(tape.scale(cur, 1.0 / tau))
    # KL = sum p (expm1(t) - t) with t = log q - log p: the probabilities sum to one, and every
    # term is >= 0 in floating point too, since rounded expm1(t) never falls below t
    t = tape.sub(log_q, ref)
    kl = tape.sum(tape.mul(tape.sub(tape.expm1(t), t), np.exp(ref)))
    return tape.scale(kl, lam / len(rows))


# -- pipeline ----------------------------------------------------------------------------


@dataclass
class MethodStates:
    adam: AdamState
    averager: AveragerState | None = None
    noise: NoiseState | None = None
    buffer: TrajectoryBuffer | None = None
    evaluations: int = 0
    noise_total: np.ndarray | None = field(default=None, repr=False)


def init_states(cfg: MethodConfig, params: np.ndarray, lr: float, weight_decay: float, seed) -> MethodStates:
    states = MethodStates(adam=AdamState.zeros(params.size, lr, weight_decay))
    if cfg.averaging is not None:
        states.averager = AveragerState(kind=cfg.averaging, alpha=cfg.ewa_alpha)
    if cfg.anti_pgd:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA9D]))
        states.noise = NoiseState(cfg.sigma, cfg.stop_epoch, np.zeros_like(params), rng)
        states.noise_total = np.zeros_like(params)
    if cfg.saf:
        states.buffer = TrajectoryBuffer(cfg.saf_gap)
    return states


def compose_step(cfg: MethodConfig, evaluator, params: np.ndarray, states: MethodStates, epoch: int):
    """One epoch of the method pipeline; returns ``(new_params, loss)``.

    Order: SAF term inside the evaluator, base gradient, optional adversarial
    gradient and combination, Adam, anti-correlated noise, averaging.
    """
    saf = None
    if states.buffer is not None and states.buffer.full:
        saf = (states.buffer.oldest(), cfg.saf_lambda, cfg.saf_tau)
    loss, g_base, outputs = evaluator(params, False, saf)
    states.evaluations += 1
    if states.buffer is not None and epoch >= cfg.saf_start_epoch and outputs is not None:
        states.buffer.push(outputs)

    grad = g_base
    rule = cfg.adversarial
    if rule is not None:
        eps = sam_perturb(g_base, cfg.rho) if rule == "sam" else asam_perturb(params, g_base, cfg.rho)
        _, g_adv, _ = evaluator(params + eps, True, saf)
        states.evaluations += 1
        if cfg.sharpness == "pgn":
            grad = pgn_combine(g_base, g_adv, cfg.alpha)
        elif cfg.sharpness == "gsam":
            grad = gsam_combine(g_base, g_adv, cfg.alpha)
        else:
            grad = g_adv

    new = adam_step(states.adam, params, grad)
    if states.noise is not None:
        delta = anti_pgd_delta(states.noise, epoch)
        states.noise_total += delta
        new = new + delta
    if states.averager is not None and states.averager.active and epoch >= cfg.begin:
        accumulate(states.averager, new)
    return new, loss
