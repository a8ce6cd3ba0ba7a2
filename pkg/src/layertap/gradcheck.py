"""Finite-difference verification of backward rules.

The check reruns the forward function with each sampled parameter
coordinate nudged up and down (central differences) and compares the
quotient against the analytic gradient from ``backward``. Callers are
expected to build the graph in float64; float32 roundoff would swamp the
tolerances this harness is used with.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-6,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``f`` must be deterministic and close over ``params``. The per-coordinate
    step is ``step * max(1, |p|)`` and the relative error is
    ``|a - b| / max(1e-12, |a| + |b|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a_full in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        a_flat = a_full.reshape(-1)
        for i in coords:
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
