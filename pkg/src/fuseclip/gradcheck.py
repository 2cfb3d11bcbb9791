"""Central finite-difference checking for tape gradients.

Error is reported per coordinate as |analytic - numeric| / max(1,
|analytic|, |numeric|), so it reads as relative error for large
gradients and absolute error near zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, zero_grads

Array = np.ndarray


def numeric_gradient(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> Array:
    """Central differences of the scalar ``fn()`` with respect to ``param``.

    ``fn`` must re-run the forward pass reading ``param.data`` each call.
    If ``coords`` is given only those flat positions are probed and all
    other entries of the result are zero.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    if coords is None:
        indices = range(flat.size)
    else:
        indices = [int(np.ravel_multi_index(c, param.shape)) for c in coords]
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        up = fn().item()
        flat[i] = saved - h
        down = fn().item()
        flat[i] = saved
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(param.shape)


def max_relative_error(analytic: Array, numeric: Array) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    Runs the forward/backward pass once, then probes each parameter. With
    ``coords_per_param`` set, a random subset of coordinates is probed per
    parameter (``rng`` required), which keeps large models affordable.
    """
    zero_grads(params)
    loss = fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if coords_per_param is None or p.data.size <= coords_per_param:
            numeric = numeric_gradient(fn, p, h=h)
            worst = max(worst, max_relative_error(analytic, numeric))
        else:
            if rng is None:
                raise ValueError("coords_per_param requires an rng")
            chosen = rng.choice(p.data.size, size=coords_per_param, replace=False)
            coords = [np.unravel_index(int(i), p.shape) for i in chosen]
            numeric = numeric_gradient(fn, p, h=h, coords=coords)
            flat_a = analytic.reshape(-1)
            flat_n = numeric.reshape(-1)
            idx = [int(np.ravel_multi_index(c, p.shape)) for c in coords]
            worst = max(
                worst, max_relative_error(flat_a[idx], flat_n[idx])
            )
    return worst
