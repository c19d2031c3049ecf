"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every differentiable operation in execution order and
replays the recorded backward closures in exact reverse order. Operations are
methods on the tape, so a forward pass reads as ``tape.matmul(x, w)`` and the
tape also owns the random generator used for dropout masks.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .sparse import CsrMatrix, ShapeError


class NumericError(ArithmeticError):
    """A forward computation produced NaN or infinity."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tape:
    """Records operations for one forward/backward pass.

    ``seed`` fixes the dropout generator: two tapes built from the same seed
    draw identical masks for identical sequences of dropout calls.
    """

    def __init__(self, seed=None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, object]] = []

    # -- recording -----------------------------------------------------------------

    def _record(self, inputs: tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self.nodes.append((inputs, out, backward))
        return out

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for inputs, out, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
                else:
                    t.grad = t.grad + g

    # -- linear algebra ------------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}")
        return self._record(
            (a, b),
            a.data @ b.data,
            lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
        )

    def transpose(self, a) -> Tensor:
        a = _as_tensor(a)
        return self._record((a,), a.data.T, lambda g: (g.T,))

    def spmm(self, s: CsrMatrix, d) -> Tensor:
        """Sparse (constant) times dense; gradient flows into ``d`` only."""
        d = _as_tensor(d)
        if d.data.ndim != 2 or s.num_cols != d.shape[0]:
            raise ShapeError(f"spmm: {s.shape} x {d.shape}")
        out = kernels.csr_spmm(s.row_ptr, s.col_idx, s.values, np.ascontiguousarray(d.data), s.num_rows)

        def backward(g):
            t_ptr, t_idx, perm = s.transpose_structure()
            return (kernels.csr_spmm(t_ptr, t_idx, s.values[perm], np.ascontiguousarray(g), s.num_cols),)

        return self._record((d,), out, backward)

    # -- arithmetic ----------------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        return self._record(
            (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        )

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        return self._record(
            (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))
        )

    def mul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        return self._record(
            (a, b),
            a.data * b.data,
            lambda g: (
                _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
            ),
        )

    def scale(self, a, c: float) -> Tensor:
        a = _as_tensor(a)
        return self._record((a,), a.data * c, lambda g: (g * c,))

    def sum(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = _as_tensor(a)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return self._record((a,), a.data.sum(axis=axis, keepdims=keepdims), backward)

    def mean(self, a, axis=None) -> Tensor:
        a = _as_tensor(a)
        n = a.data.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / n)

    def reshape(self, a, shape) -> Tensor:
        a = _as_tensor(a)
        return self._record((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))

    def take_rows(self, a, idx) -> Tensor:
        """Gather ``a[idx]`` along the first axis."""
        a = _as_tensor(a)
        idx = np.asarray(idx, dtype=np.int64)

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return self._record((a,), a.data[idx], backward)

    # -- elementwise ---------------------------------------------------------------

    def elementwise(self, kind: str, x) -> Tensor:
        x = _as_tensor(x)
        d = x.data
        if kind == "relu":
            out = np.maximum(d, 0.0)
            deriv = lambda: (d > 0).astype(np.float64)  # noqa: E731
        elif kind == "elu":
            neg = np.expm1(np.minimum(d, 0.0))
            out = np.where(d > 0, d, neg)
            deriv = lambda: np.where(d > 0, 1.0, neg + 1.0)  # noqa: E731
        elif kind == "exp":
            with np.errstate(over="ignore"):
                out = np.exp(d)
            deriv = lambda: out  # noqa: E731
        elif kind == "expm1":
            with np.errstate(over="ignore"):
                out = np.expm1(d)
            deriv = lambda: out + 1.0  # noqa: E731
        elif kind == "log":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.log(d)
            deriv = lambda: 1.0 / d  # noqa: E731
        elif kind == "sigmoid":
            out = _sigmoid(d)
            deriv = lambda: out * (1.0 - out)  # noqa: E731
        else:
            raise ValueError(f"unknown elementwise kind {kind!r}")
        _check_finite(out, kind)
        return self._record((x,), out, lambda g: (g * deriv(),))

    def relu(self, x) -> Tensor:
        return self.elementwise("relu", x)

    def elu(self, x) -> Tensor:
        return self.elementwise("elu", x)

    def exp(self, x) -> Tensor:
        return self.elementwise("exp", x)

    def expm1(self, x) -> Tensor:
        return self.elementwise("expm1", x)

    def log(self, x) -> Tensor:
        return self.elementwise("log", x)

    def sigmoid(self, x) -> Tensor:
        return self.elementwise("sigmoid", x)

    def leaky_relu(self, x, slope: float = 0.2) -> Tensor:
        x = _as_tensor(x)
        pos = x.data > 0
        return self._record((x,), np.where(pos, x.data, slope * x.data), lambda g: (np.where(pos, g, slope * g),))

    # -- normalisation ---------------------------------------------------------------

    def softmax_rows(self, x) -> Tensor:
        x = _as_tensor(x)
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return self._record((x,), p, lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))

    def log_softmax_rows(self, x) -> Tensor:
        x = _as_tensor(x)
        z = x.data - x.data.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(out)
        return self._record((x,), out, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))

    def layer_norm(self, x, gain, bias, eps: float = 1e-5) -> Tensor:
        x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
        n = x.shape[-1]
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv

        def backward(g):
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            return dx, (g * xhat).reshape(-1, n).sum(axis=0), g.reshape(-1, n).sum(axis=0)

        return self._record((x, gain, bias), xhat * gain.data + bias.data, backward)

    def row_normalize(self, x, eps: float = 1e-12) -> Tensor:
        """Scale each row to unit L2 norm, dividing by ``max(norm, eps)``."""
        x = _as_tensor(x)
        norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
        denom = np.maximum(norm, eps)
        y = x.data / denom
        clamped = norm <= eps

        def backward(g):
            proj = np.where(clamped, 0.0, (y * g).sum(axis=-1, keepdims=True))
            return ((g - y * proj) / denom,)

        return self._record((x,), y, backward)

    def dropout(self, x, p: float, train: bool) -> Tensor:
        """Inverted dropout; identity when not training or ``p == 0``."""
        x = _as_tensor(x)
        if not train or p <= 0.0:
            return x
        mask = (self.rng.random(x.shape) >= p) / (1.0 - p)
        return self._record((x,), x.data * mask, lambda g: (g * mask,))

    # -- graph attention -------------------------------------------------------------

    def edge_logits(self, s: CsrMatrix, src, dst) -> Tensor:
        """Per-edge, per-head score ``src[row] + dst[col]`` for every stored entry of ``s``."""
        src, dst = _as_tensor(src), _as_tensor(dst)
        out = kernels.edge_logits(
            s.row_ptr, s.col_idx, np.ascontiguousarray(src.data), np.ascontiguousarray(dst.data)
        )

        def backward(g):
            g = np.ascontiguousarray(g)
            t_ptr, _, perm = s.transpose_structure()
            return kernels.row_segment_sum(s.row_ptr, g), kernels.row_segment_sum(t_ptr, g[perm])

        return self._record((src, dst), out, backward)

    def edge_softmax(self, s: CsrMatrix, e) -> Tensor:
        """Softmax of edge scores over each row's neighbourhood, independently per head."""
        e = _as_tensor(e)
        att = kernels.edge_softmax(s.row_ptr, np.ascontiguousarray(e.data))
        return self._record(
            (e,), att, lambda g: (kernels.edge_softmax_backward(s.row_ptr, att, np.ascontiguousarray(g)),)
        )

    def edge_dropout(self, att, p: float, train: bool) -> Tensor:
        return self.dropout(att, p, train)

    def edge_aggregate(self, s: CsrMatrix, att, h) -> Tensor:
        """out[i, k] = sum over row i's edges of att[e, k] * h[col(e), k]; h is [N, K, D]."""
        att, h = _as_tensor(att), _as_tensor(h)
        hd = np.ascontiguousarray(h.data)
        ad = np.ascontiguousarray(att.data)
        out = kernels.edge_aggregate(s.row_ptr, s.col_idx, ad, hd)

        def backward(g):
            g = np.ascontiguousarray(g)
            t_ptr, t_idx, perm = s.transpose_structure()
            g_att = kernels.edge_aggregate_grad_att(s.row_ptr, s.col_idx, hd, g)
            g_h = kernels.edge_aggregate(t_ptr, t_idx, np.ascontiguousarray(ad[perm]), g)
            return g_att, g_h

        return self._record((att, h), out, backward)

    # -- losses ----------------------------------------------------------------------

    def masked_cross_entropy(self, logits, labels, mask) -> Tensor:
        """Mean of -log softmax(logits)[label] over the rows in ``mask``."""
        logits = _as_tensor(logits)
        mask = np.asarray(mask, dtype=np.int64)
        if mask.size == 0:
            raise ValueError("masked_cross_entropy: empty mask")
        y = np.asarray(labels, dtype=np.int64)[mask]
        z = logits.data[mask]
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = _check_finite(np.mean(lse - z[np.arange(len(mask)), y]), "cross-entropy")

        def backward(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(len(mask)), y] -= 1.0
            out = np.zeros_like(logits.data)
            np.add.at(out, mask, p * (g / len(mask)))
            return (out,)

        return self._record((logits,), np.asarray(loss), backward)

    def multilabel_bce(self, logits, labels, mask) -> Tensor:
        """Mean sigmoid binary cross-entropy over masked rows and all classes."""
        logits = _as_tensor(logits)
        mask = np.asarray(mask, dtype=np.int64)
        if mask.size == 0:
            raise ValueError("multilabel_bce: empty mask")
        y = np.asarray(labels, dtype=np.float64)[mask]
        z = logits.data[mask]
        # softplus(z) - y*z == -[y log s(z) + (1-y) log(1-s(z))]
        per = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
        loss = _check_finite(per.mean(), "binary cross-entropy")

        def backward(g):
            out = np.zeros_like(logits.data)
            np.add.at(out, mask, (_sigmoid(z) - y) * (g / z.size))
            return (out,)

        return self._record((logits,), np.asarray(loss), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
