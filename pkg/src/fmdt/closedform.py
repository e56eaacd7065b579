"""Exact minimizers of the flow-matching loss under an empirical target.

Two latent choices are covered: a standard Gaussian source, where the optimal
velocity is a softmax-weighted pull toward the training points, and a uniform
source on ``[-1, 1]^d``, where it points at the mean of the training points
whose cones contain the current state.
"""

from __future__ import annotations

import numpy as np

from .core import Dataset, Denoiser, DimensionError, VelocityField, as_time, tcol


class OutsideSupportError(ValueError):
    """The state lies in no cone, a zero-probability region of the uniform flow."""


def _batch(x: np.ndarray, ds: Dataset) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != ds.d:
        raise DimensionError(f"sample dimension {x.shape[-1]} != dataset dimension {ds.d}")
    return np.atleast_2d(x), x.ndim == 1


def softmax_weights(ds: Dataset, x, t) -> np.ndarray:
    """Posterior weights ``lambda_i(x, t)`` of each training point, shape ``(B, n)``.

    At ``t = 1`` the weights are the limit of the softmax: uniform over the
    nearest training points.
    """
    xb, _ = _batch(x, ds)
    t = as_time(t)
    tc = tcol(t, xb)
    tcc = tc if np.ndim(tc) == 0 else tc[:, :, None]
    diff = xb[:, None, :] - tcc * ds.points[None, :, :]
    sq = np.einsum("bnd,bnd->bn", diff, diff)
    s = 1.0 - np.asarray(tc, dtype=np.float64)
    out = np.empty_like(sq)
    at_one = np.broadcast_to(s == 0.0, (xb.shape[0], 1))[:, 0]
    if np.any(at_one):
        near = sq[at_one] == sq[at_one].min(axis=1, keepdims=True)
        out[at_one] = near / near.sum(axis=1, keepdims=True)
    live = ~at_one
    if np.any(live):
        ss = s if np.ndim(s) == 0 else s[live]
        logits = -sq[live] / (2.0 * ss**2)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        out[live] = w / w.sum(axis=1, keepdims=True)
    return out


def gaussian_mmse_denoiser(ds: Dataset, x, t) -> np.ndarray:
    """``E[x1 | x_t = x]`` under the empirical target and Gaussian noise."""
    xb, single = _batch(x, ds)
    out = softmax_weights(ds, xb, t) @ ds.points
    return out[0] if single else out


def gaussian_closed_form_velocity(ds: Dataset, x, t) -> np.ndarray:
    """The empirical optimal velocity ``sum_i lambda_i (x_i - x) / (1 - t)``."""
    t = as_time(t)
    if np.any(np.asarray(t) >= 1.0):
        raise ValueError("closed-form velocity is undefined at t = 1")
    x = np.asarray(x, dtype=np.float64)
    return (gaussian_mmse_denoiser(ds, x, t) - x) / (1.0 - tcol(t, x))


def _mmse_jvp(ds: Dataset, x, t, u) -> np.ndarray:
    # J_D = t / (1 - t)^2 * Cov_lambda(x_i), symmetric
    xb, single = _batch(x, ds)
    ub = np.atleast_2d(np.asarray(u, dtype=np.float64))
    lam = softmax_weights(ds, xb, t)
    mean = lam @ ds.points
    cen = ds.points[None, :, :] - mean[:, None, :]
    proj = np.einsum("bnd,bd->bn", cen, ub)
    tc = np.asarray(tcol(t, xb), dtype=np.float64)
    s = 1.0 - tc
    scale = np.divide(tc, s**2, out=np.zeros_like(s), where=s > 0)
    out = scale * np.einsum("bn,bnd->bd", lam * proj, cen)
    return out[0] if single else out


def gaussian_denoiser(ds: Dataset) -> Denoiser:
    return Denoiser(lambda x, t: gaussian_mmse_denoiser(ds, x, t),
                    lambda x, t, u: _mmse_jvp(ds, x, t, u),
                    lambda x, t, w: _mmse_jvp(ds, x, t, w),
                    name=f"mmse[{ds.name}]")


def gaussian_field(ds: Dataset) -> VelocityField:
    """The Gaussian-source closed-form velocity with analytic Jacobian products."""

    def jvp(x, t, u):
        if np.any(np.asarray(t) >= 1.0):
            raise ValueError("closed-form velocity is undefined at t = 1")
        return (_mmse_jvp(ds, x, t, u) - u) / (1.0 - tcol(t, np.asarray(x)))

    return VelocityField(lambda x, t: gaussian_closed_form_velocity(ds, x, t), jvp, jvp,
                         name=f"closed-form[{ds.name}]", denoiser=gaussian_denoiser(ds))


def _back_projection(ds: Dataset, xb: np.ndarray, t) -> np.ndarray:
    t = as_time(t)
    if np.any(np.asarray(t) >= 1.0):
        raise ValueError("cones are undefined at t = 1")
    tc = tcol(t, xb)
    tcc = tc if np.ndim(tc) == 0 else tc[:, :, None]
    return (xb[:, None, :] - tcc * ds.points[None, :, :]) / (1.0 - tcc)


def cone_membership(ds: Dataset, i: int, x, t) -> bool | np.ndarray:
    """Whether ``x`` lies in the cone of training point ``i`` at time ``t`` (closed)."""
    xb, single = _batch(x, ds)
    bp = _back_projection(ds, xb, t)[:, i, :]
    inside = np.all(np.abs(bp) <= 1.0, axis=1)
    return bool(inside[0]) if single else inside


def active_cones(ds: Dataset, x, t, extend: bool = False) -> np.ndarray:
    """Boolean ``(B, n)`` cone-membership matrix.

    With ``extend``, rows outside every cone fall back to the cones with the
    smallest box violation, which continues the field continuously across the
    outer support boundary.
    """
    xb, _ = _batch(x, ds)
    bp = _back_projection(ds, xb, t)
    viol = np.maximum(np.abs(bp) - 1.0, 0.0).max(axis=2)
    active = viol == 0.0
    empty = ~active.any(axis=1)
    if np.any(empty):
        if not extend:
            raise OutsideSupportError(
                f"{int(empty.sum())} state(s) lie outside every cone (outside support)")
        active[empty] = viol[empty] == viol[empty].min(axis=1, keepdims=True)
    return active


def uniform_cone_velocity(ds: Dataset, x, t, extend: bool = False) -> np.ndarray:
    """Optimal velocity for a uniform source: toward the mean of active cone points."""
    xb, single = _batch(x, ds)
    active = active_cones(ds, xb, t, extend=extend).astype(np.float64)
    target = (active @ ds.points) / active.sum(axis=1, keepdims=True)
    out = (target - xb) / (1.0 - tcol(as_time(t), xb))
    return out[0] if single else out


def cone_field(ds: Dataset, fd_step: float = 1e-5) -> VelocityField:
    """Uniform-source closed-form velocity as a field.

    The field is piecewise smooth with jumps on cone boundaries, so it carries
    no analytic Jacobian; ``fd_step`` sets the resolution of finite-difference
    Jacobians taken on it.
    """
    return VelocityField(lambda x, t: uniform_cone_velocity(ds, x, t, extend=True),
                         name=f"cone[{ds.name}]", fd_step=fd_step)
