"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    coordinates: int
    worst: tuple[str, tuple[int, ...]] | None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    coords_per_param: int = 8,
    h: float = 1e-3,
    seed: int = 0,
    min_total: int = 32,
) -> GradCheckResult:
    """Compare backprop gradients with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.  Parameters should be float64.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in params}

    per_param = max(coords_per_param, -(-min_total // max(len(params), 1)))
    worst_err, worst_at, total = 0.0, None, 0
    with no_grad():
        for name, p in params:
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2.0 * h)
                err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric)
                total += 1
                if err > worst_err or worst_at is None:
                    worst_err = err
                    worst_at = (name, np.unravel_index(idx, p.shape))
    for _, p in params:
        p.grad = None
    return GradCheckResult(worst_err, total, worst_at)
