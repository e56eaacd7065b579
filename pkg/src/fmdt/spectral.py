"""Power iteration for the top singular value of a batch of Jacobians."""

from __future__ import annotations

from typing import Callable

import numpy as np

Apply = Callable[[np.ndarray], np.ndarray]


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(a, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return a / safe[:, None], norm


def power_iteration(jvp: Apply, vjp: Apply, batch: int, d: int, iters: int = 10,
                    seed: int = 0, tol: float | None = None):
    """Estimate ``||J_b||_2`` for every row ``b`` by power iteration on ``J^T J``.

    ``jvp`` and ``vjp`` act row-wise on ``(batch, d)`` arrays. Returns
    ``(sigma, u, w)`` with ``u`` the right and ``w`` the left singular vector
    estimates (unit rows). Rows whose Jacobian annihilates the iterate get
    ``sigma = 0``.
    """
    if iters < 1:
        raise ValueError("need at least one power iteration")
    rng = np.random.default_rng(seed)
    u, _ = _unit_rows(rng.standard_normal((batch, d)))
    sigma = np.zeros(batch)
    for _ in range(iters):
        z = vjp(jvp(u))
        z, zn = _unit_rows(z)
        u = np.where(zn[:, None] > 0, z, u)
        if tol is not None:
            new = np.linalg.norm(jvp(u), axis=1)
            done = np.all(np.abs(new - sigma) <= tol * np.maximum(new, 1e-300))
            sigma = new
            if done:
                break
    y = jvp(u)
    w, sigma = _unit_rows(y)
    return sigma, u, w


def dense_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                   step: float) -> np.ndarray:
    """Central-difference Jacobians ``(B, d, d)`` with per-row step ``step * (1 + ||x||)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, d = x.shape
    h = step * (1.0 + np.linalg.norm(x, axis=1))
    jac = np.empty((B, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        jac[:, :, k] = (fn(x + h[:, None] * e) - fn(x - h[:, None] * e)) / (2.0 * h[:, None])
    return jac
