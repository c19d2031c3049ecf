"""Loss values along one or two filter-normalised random directions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ParamSet
from .tensor import NumericError

LOSS_KINDS = ("train", "test", "both")


@dataclass(frozen=True)
class SurfaceSpec:
    dims: int = 2
    lo: float = -1.0
    hi: float = 1.0
    resolution: int = 41
    which_loss: str = "both"
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")
        if not self.lo < 0.0 < self.hi:
            raise ValueError("range must satisfy lo < 0 < hi")
        if self.resolution < 3:
            raise ValueError("resolution must be at least 3")
        if self.which_loss not in LOSS_KINDS:
            raise ValueError(f"which_loss must be one of {LOSS_KINDS}")

    def axis(self) -> np.ndarray:
        pts = np.linspace(self.lo, self.hi, self.resolution)
        # exact zero wherever the grid crosses the origin, so that point is the unperturbed model
        pts[np.abs(pts) < 1e-12 * (self.hi - self.lo)] = 0.0
        return pts

    @property
    def losses(self) -> tuple[str, ...]:
        return ("train", "test") if self.which_loss == "both" else (self.which_loss,)


def filter_normalized_direction(params: ParamSet, rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction with each named tensor rescaled to that parameter tensor's norm."""
    d = np.zeros(params.size)
    for name, arr in params.items():
        start, stop = params.offsets[name]
        r = rng.standard_normal(stop - start)
        rn = np.linalg.norm(r)
        d[start:stop] = r * (np.linalg.norm(arr) / rn) if rn > 0 else 0.0
    return d


def random_directions(params: ParamSet, dims: int, seed) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    dirs = [filter_normalized_direction(params, rng) for _ in range(dims)]
    if dims == 2:
        d1, d2 = dirs
        sq = float(d1 @ d1)
        if sq > 0:
            dirs[1] = d2 - (float(d2 @ d1) / sq) * d1
    return dirs


def _safe(fn, flat) -> float:
    try:
        v = float(fn(flat))
    except (NumericError, FloatingPointError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def loss_surface(params: ParamSet, spec: SurfaceSpec, evaluators: dict, directions=None):
    """Evaluate ``evaluators[kind](flat)`` for each requested loss on the grid.

    Returns ``(axis, grids)`` where ``grids[kind]`` has shape ``(R,)`` or
    ``(R, R)`` indexed ``[i_a, i_b]``. ``params`` is never modified.
    """
    dirs = directions if directions is not None else random_directions(params, spec.dims, spec.seed)
    base = params.flat
    axis = spec.axis()
    shape = (len(axis),) * spec.dims
    grids = {kind: np.empty(shape) for kind in spec.losses}
    for index in np.ndindex(*shape):
        flat = base.copy()
        for coeff_i, d in zip(index, dirs):
            coeff = axis[coeff_i]
            if coeff != 0.0:
                flat += coeff * d
        for kind in spec.losses:
            grids[kind][index] = _safe(evaluators[kind], flat)
    return axis, grids


def _fmt(v: float) -> str:
    return "inf" if not math.isfinite(v) else f"{v:.9g}"


def write_surface_csv(path, axis: np.ndarray, grids: dict, dims: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kinds = [k for k in ("train", "test") if k in grids]
    header = ["a"] + (["b"] if dims == 2 else []) + [f"loss_{k}" for k in kinds]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for index in np.ndindex(*grids[kinds[0]].shape):
            coords = [_fmt(axis[i]) for i in index]
            w.writerow(coords + [_fmt(grids[k][index]) for k in kinds])
    return path


def read_surface_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
