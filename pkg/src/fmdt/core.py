"""Interpolation path, noise-level reparametrization and the denoiser/velocity duality.

Samples are float64 arrays of shape ``(d,)`` or batches ``(B, d)``. Times are
scalars or arrays of shape ``(B,)`` matching the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
DirFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class DimensionError(ValueError):
    pass


def as_time(t) -> np.ndarray | float:
    """Validate a time (scalar or per-row array) and return it as float64."""
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t!r}")
    return float(arr) if arr.ndim == 0 else arr


def tcol(t, x: np.ndarray):
    """Broadcast a scalar or per-row time against ``x``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return float(t)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise DimensionError(f"time shape {t.shape} does not match batch {x.shape}")
    return t[:, None]


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


@dataclass(frozen=True)
class Dataset:
    """An empirical target measure: ``n`` points in ``R^d``.

    ``shape`` is optional ``(channels, height, width)`` metadata for image-like data.
    """

    points: np.ndarray
    name: str = "dataset"
    shape: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("dataset contains non-finite values")
        if self.shape is not None:
            shp = tuple(int(s) for s in self.shape)
            if len(shp) != 3 or int(np.prod(shp)) != pts.shape[1]:
                raise ValueError(f"shape {shp} does not match dimension {pts.shape[1]}")
            object.__setattr__(self, "shape", shp)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def value_range(self) -> float:
        """Peak-to-peak value range, the default PSNR peak."""
        span = float(self.points.max() - self.points.min())
        return span if span > 0 else 1.0


def interpolate(x0, x1, t) -> np.ndarray:
    """Linear path ``(1 - t) x0 + t x1``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _check_pair(x0, x1)
    t = tcol(as_time(t), np.broadcast_to(x0, np.broadcast_shapes(x0.shape, x1.shape)))
    return (1.0 - t) * x0 + t * x1


def corrupt(x1, x0, t) -> np.ndarray:
    """Generative corruption ``t x1 + (1 - t) x0``."""
    return interpolate(x0, x1, t)


def corrupt_classical(x1, x0, sigma) -> np.ndarray:
    """Classical corruption ``x1 + sigma x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _check_pair(x0, x1)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("noise level must be non-negative")
    if sigma.ndim:
        sigma = sigma[:, None]
    return x1 + sigma * x0


def sigma_to_t(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0) or np.any(np.isnan(sigma)):
        raise ValueError("noise level must be non-negative")
    out = 1.0 / (1.0 + sigma)
    return float(out) if out.ndim == 0 else out


def t_to_sigma(t):
    t = np.asarray(as_time(t))
    if np.any(t <= 0.0):
        raise ValueError("t = 0 corresponds to an infinite noise level")
    out = 1.0 / t - 1.0
    return float(out) if out.ndim == 0 else out


class Denoiser:
    """A time-indexed map ``D(x, t)`` with optional Jacobian products in ``x``.

    ``jvp(x, t, u)`` returns ``J u`` and ``vjp(x, t, w)`` returns ``J^T w``, both
    row-wise for batches.
    """

    def __init__(self, fn: ArrayFn, jvp: DirFn | None = None, vjp: DirFn | None = None,
                 name: str = "denoiser"):
        self.fn = fn
        self._jvp = jvp
        self._vjp = vjp
        self.name = name
        # the velocity this denoiser was derived from, if any
        self.velocity: VelocityField | None = None

    def __call__(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.fn(x, as_time(t))
        if out.shape != x.shape:
            raise DimensionError(f"{self.name}: output {out.shape} != input {x.shape}")
        return out

    @property
    def has_jvp(self) -> bool:
        return self._jvp is not None

    @property
    def has_vjp(self) -> bool:
        return self._vjp is not None

    def jvp(self, x, t, u) -> np.ndarray:
        if self._jvp is None:
            raise NotImplementedError(f"{self.name} has no Jacobian-vector product")
        return self._jvp(np.asarray(x, float), as_time(t), np.asarray(u, float))

    def vjp(self, x, t, w) -> np.ndarray:
        if self._vjp is None:
            raise NotImplementedError(f"{self.name} has no vector-Jacobian product")
        return self._vjp(np.asarray(x, float), as_time(t), np.asarray(w, float))


class VelocityField(Denoiser):
    """A time-dependent ODE right-hand side ``v(x, t)``.

    ``denoiser`` keeps the dual view when the field was derived from one; the
    sampler uses it for the terminal jump.
    """

    def __init__(self, fn: ArrayFn, jvp: DirFn | None = None, vjp: DirFn | None = None,
                 name: str = "velocity", denoiser: Denoiser | None = None,
                 fd_step: float | None = None):
        super().__init__(fn, jvp, vjp, name)
        self.denoiser = denoiser
        if denoiser is not None and denoiser.velocity is None:
            denoiser.velocity = self
        # relative step for finite-difference Jacobians when no JVP exists
        self.fd_step = fd_step


def identity_denoiser() -> Denoiser:
    return Denoiser(lambda x, t: x.copy(), lambda x, t, u: u.copy(),
                    lambda x, t, w: w.copy(), name="identity")


def _one_minus(t, x):
    return 1.0 - tcol(t, x)


def _rows_before_one(op, x, t, base, extra=None):
    """``base + (1 - t) * op(x, t[, extra])`` on rows with ``t < 1``, ``base`` elsewhere."""
    s = _one_minus(t, x)
    if np.ndim(s) == 0:
        if s == 0.0:
            return base.copy()
        return base + s * (op(x, t) if extra is None else op(x, t, extra))
    out = base.copy()
    live = s[:, 0] > 0.0
    if live.any():
        args = (x[live], np.asarray(t)[live]) + (() if extra is None else (extra[live],))
        out[live] = base[live] + s[live] * op(*args)
    return out


def denoiser_from_velocity(v: VelocityField) -> Denoiser:
    """``D(x, t) = x + (1 - t) v(x, t)``; the identity at ``t = 1``."""
    if v.denoiser is not None:
        return v.denoiser

    def fn(x, t):
        return _rows_before_one(v, x, t, x)

    jvp = vjp = None
    if v.has_jvp:
        def jvp(x, t, u):
            return _rows_before_one(v.jvp, x, t, u, u)
    if v.has_vjp:
        def vjp(x, t, w):
            return _rows_before_one(v.vjp, x, t, w, w)
    D = Denoiser(fn, jvp, vjp, name=f"D[{v.name}]")
    D.velocity = v
    return D


def _require_before_one(t):
    if np.any(np.asarray(t) >= 1.0):
        raise ValueError("velocity derived from a denoiser is undefined at t = 1")


def velocity_from_denoiser(D: Denoiser) -> VelocityField:
    """``v(x, t) = (D(x, t) - x) / (1 - t)`` for ``t < 1``.

    A denoiser obtained from a velocity converts back to that same velocity.
    """
    if D.velocity is not None:
        return D.velocity

    def fn(x, t):
        _require_before_one(t)
        return (D(x, t) - x) / _one_minus(t, x)

    jvp = vjp = None
    if D.has_jvp:
        def jvp(x, t, u):
            _require_before_one(t)
            return (D.jvp(x, t, u) - u) / _one_minus(t, x)
    if D.has_vjp:
        def vjp(x, t, w):
            _require_before_one(t)
            return (D.vjp(x, t, w) - w) / _one_minus(t, x)
    return VelocityField(fn, jvp, vjp, name=f"v[{D.name}]", denoiser=D)
