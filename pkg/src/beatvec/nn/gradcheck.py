"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .layers import Parameter


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    loss_and_backward,
    params: list[Parameter],
    step: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and numerical gradients.

    ``loss_and_backward()`` must zero gradients, run forward and backward,
    and return the scalar loss; it is called once for the analytic pass and
    twice per probed coordinate. With ``max_per_param`` set, that many
    coordinates of each larger parameter are probed at random.
    """
    loss_and_backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            coords = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_and_backward()
            flat[i] = orig - step
            down = loss_and_backward()
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], num)))
    loss_and_backward()
    return worst


def grad_check_input(loss_of, x: np.ndarray, analytic: np.ndarray, step: float = 1e-5) -> float:
    """Same check for the gradient with respect to a plain input array."""
    flat = x.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_of(x)
        flat[i] = orig - step
        down = loss_of(x)
        flat[i] = orig
        num[i] = (up - down) / (2 * step)
    return float(relative_error(analytic.reshape(-1), num).max())
