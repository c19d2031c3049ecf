from __future__ import annotations

import numpy as np

from .autodiff import NumericError


def grad_check(loss_fn, params: np.ndarray, step: float = 1e-5, num_coords: int | None = 64, seed: int = 0) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``loss_fn(flat) -> (loss, grad)`` must be deterministic. Coordinates are
    sampled without replacement (all of them when ``num_coords`` is None or
    at least the parameter count).
    """
    params = np.array(params, dtype=np.float64, copy=True)
    loss, grad = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("grad_check: non-finite loss")
    grad = np.asarray(grad, dtype=np.float64)
    n = params.size
    if num_coords is None or num_coords >= n:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=num_coords, replace=False)
    worst = 0.0
    for i in coords:
        orig = params[i]
        params[i] = orig + step
        up = loss_fn(params)[0]
        params[i] = orig - step
        down = loss_fn(params)[0]
        params[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("grad_check: non-finite loss at a displaced point")
        numeric = (up - down) / (2.0 * step)
        err = abs(grad[i] - numeric) / (abs(grad[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return float(worst)
