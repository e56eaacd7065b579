"""ODE sampling, controlled denoiser perturbations and their PSNR calibration."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .analysis import mean_psnr
from .core import Dataset, Denoiser, VelocityField, as_time, denoiser_from_velocity, tcol
from .io import write_csv

log = logging.getLogger(__name__)

SCHEMES = ("euler", "heun", "rk4", "rk45")
DIRECTIONS = ("checkerboard", "posshift", "negshift", "residual")


class IntegrationError(FloatingPointError):
    def __init__(self, msg: str, record: "TrajectoryRecord"):
        super().__init__(msg)
        self.record = record


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "rk4"
    steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-7
    eps_end: float = 1e-3
    terminal_jump: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.steps < 1 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("steps must be >= 1 and tolerances positive")
        if not 0 <= self.eps_end < 1:
            raise ValueError("eps_end must lie in [0, 1)")

    @property
    def t_end(self) -> float:
        return 1.0 - self.eps_end


@dataclass
class TrajectoryRecord:
    """States ``(K, B, d)`` at increasing ``times`` plus per-step diagnostics.

    ``endpoint`` is the state after the terminal denoiser jump (or the last
    state when the jump is disabled).
    """

    times: np.ndarray
    states: np.ndarray
    velocity_norm: np.ndarray
    perturbed: np.ndarray
    endpoint: np.ndarray | None = None
    spectral_norm: np.ndarray | None = None
    single: bool = False

    def state(self, k: int = -1) -> np.ndarray:
        s = self.states[k]
        return s[0] if self.single else s

    @property
    def final(self) -> np.ndarray:
        e = self.states[-1] if self.endpoint is None else self.endpoint
        return e[0] if self.single else e


def _is_active(v: VelocityField, t: float) -> bool:
    D = v.denoiser
    return bool(getattr(D, "active", lambda _: False)(t)) if D is not None else False


def _finite_or_raise(x, times, states, norms, flags, single):
    if not np.all(np.isfinite(x)):
        rec = TrajectoryRecord(np.array(times), np.array(states), np.array(norms),
                               np.array(flags), single=single)
        raise IntegrationError(f"non-finite state at t = {times[-1]:.6g}", rec)


def _step(v: VelocityField, x: np.ndarray, t: float, h: float, scheme: str, t_cap: float):
    k1 = v(x, t)
    if scheme == "euler":
        return x + h * k1, k1
    if scheme == "heun":
        k2 = v(x + h * k1, min(t + h, t_cap))
        return x + 0.5 * h * (k1 + k2), k1
    k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = v(x + h * k3, min(t + h, t_cap))
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def integrate_between(v: VelocityField, x, t0: float, t1: float, steps: int,
                      scheme: str = "rk4") -> np.ndarray:
    """Fixed-step integration of a batch from ``t0`` to ``t1 < 1``."""
    if scheme not in ("euler", "heun", "rk4"):
        raise ValueError(f"fixed-step scheme expected, got {scheme!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    if t1 == t0:
        return x
    h = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        x, _ = _step(v, x, t, h, scheme, t1)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite state at t = {t1:.6g}")
    return x


def sample(v: VelocityField, x0, spec: IntegratorSpec = IntegratorSpec(),
           track_spectral: bool = False) -> TrajectoryRecord:
    """Integrate ``dx/dt = v(x, t)`` from ``t = 0`` to ``1 - eps_end``.

    The terminal jump replaces the last stretch by ``x <- D(x, t_end)`` with
    ``D`` the denoiser dual to ``v``. With ``track_spectral`` the Jacobian
    spectral norm of ``v`` is recorded at every stored state.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    t_end = spec.t_end
    times, states, norms, flags = [0.0], [x.copy()], [], []
    if spec.scheme == "rk45":
        shape = x.shape

        def rhs(t, y):
            return v(y.reshape(shape), min(t, t_end)).ravel()

        sol = solve_ivp(rhs, (0.0, t_end), x.ravel(), method="RK45",
                        rtol=spec.rtol, atol=spec.atol)
        if not sol.success:
            rec = TrajectoryRecord(sol.t, sol.y.T.reshape(-1, *shape), np.zeros((sol.t.size, shape[0])),
                                   np.zeros(sol.t.size, bool), single=single)
            raise IntegrationError(f"adaptive integration failed: {sol.message}", rec)
        times = list(sol.t)
        states = [y.reshape(shape) for y in sol.y.T]
        norms = [np.linalg.norm(v(s, t), axis=1) for s, t in zip(states, times)]
        flags = [_is_active(v, t) for t in times]
        _finite_or_raise(states[-1], times, states, norms, flags, single)
    else:
        h = t_end / spec.steps
        for k in range(spec.steps):
            t = k * h
            x, k1 = _step(v, x, t, h, spec.scheme, t_end)
            norms.append(np.linalg.norm(k1, axis=1))
            flags.append(_is_active(v, t))
            t_next = t_end if k == spec.steps - 1 else (k + 1) * h
            times.append(t_next)
            states.append(x.copy())
            _finite_or_raise(x, times, states, norms, flags, single)
        norms.append(np.linalg.norm(v(x, t_end), axis=1))
        flags.append(_is_active(v, t_end))
    rec = TrajectoryRecord(np.array(times), np.array(states), np.array(norms),
                           np.array(flags, dtype=bool), single=single)
    if track_spectral:
        from .analysis import jacobian_spectral_norm
        rec.spectral_norm = np.array([jacobian_spectral_norm(v, s, float(t))
                                      for s, t in zip(rec.states, rec.times)])
    if spec.terminal_jump:
        rec.endpoint = denoiser_from_velocity(v)(states[-1], t_end)
        if not np.all(np.isfinite(rec.endpoint)):
            raise IntegrationError("non-finite terminal jump", rec)
    return rec


def paired_sample(models: list[VelocityField], x0_batch, spec: IntegratorSpec = IntegratorSpec(),
                  threads: int = 1) -> np.ndarray:
    """Endpoints ``(n_models, B, d)``, every model started from the same ``x0`` rows."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if threads > 1 and len(models) > 1:
        with ThreadPoolExecutor(threads) as pool:
            ends = list(pool.map(lambda m: sample(m, x0, spec).final, models))
    else:
        ends = [sample(m, x0, spec).final for m in models]
    return np.stack([np.atleast_2d(e) for e in ends])


def make_direction(kind: str, shape: tuple[int, int, int] | None = None, d: int | None = None,
                   patch_size: int = 1) -> np.ndarray:
    """Fixed perturbation pattern, flattened channel-major.

    Checkerboards alternate ``+1``/``-1`` blocks of ``patch_size`` pixels with a
    positive top-left block, truncated at the image border.
    """
    if kind == "checkerboard":
        if shape is None:
            raise ValueError("checkerboard direction needs image shape metadata")
        if patch_size < 1:
            raise ValueError("patch_size must be positive")
        c, h, w = shape
        rows = (np.arange(h) // patch_size)[:, None]
        cols = (np.arange(w) // patch_size)[None, :]
        board = np.where((rows + cols) % 2 == 0, 1.0, -1.0)
        return np.broadcast_to(board, (c, h, w)).ravel().copy()
    if d is None:
        if shape is None:
            raise ValueError("need a dimension or a shape")
        d = int(np.prod(shape))
    if kind == "posshift":
        return np.ones(d)
    if kind == "negshift":
        return -np.ones(d)
    if kind == "residual":
        raise ValueError("the residual perturbation has no fixed pattern")
    raise ValueError(f"unknown direction {kind!r}; expected one of {DIRECTIONS}")


@dataclass(frozen=True)
class PerturbationSpec:
    """Where, how and how strongly to perturb a denoiser.

    ``level`` is either a table of ``(t, sigma)`` nodes, linearly interpolated,
    or ``None`` together with ``ratio`` to request PSNR calibration.
    """

    direction: str = "posshift"
    t_min: float = 0.0
    t_max: float = 0.3
    patch_size: int = 1
    level: tuple[tuple[float, float], ...] | None = None
    ratio: float | None = 0.9

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ValueError("perturbation interval must lie inside [0, 1]")
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise ValueError("PSNR ratio must lie in (0, 1]")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")

    @property
    def label(self) -> str:
        base = self.direction
        if self.direction == "checkerboard":
            base += f"{self.patch_size}x{self.patch_size}"
        return f"{base}[{self.t_min:g},{self.t_max:g}]"

    def with_level(self, level) -> "PerturbationSpec":
        return PerturbationSpec(self.direction, self.t_min, self.t_max, self.patch_size,
                                tuple((float(t), float(s)) for t, s in level), self.ratio)


class PerturbedDenoiser(Denoiser):
    """``D + sigma(t) delta`` (or the residual relaxation) on ``[t_min, t_max]``, ``D`` elsewhere."""

    def __init__(self, base: Denoiser, spec: PerturbationSpec, delta: np.ndarray | None):
        if spec.level is None:
            raise ValueError("perturbation level is unresolved; calibrate it first")
        self.base = base
        self.spec = spec
        self.delta = delta
        self._nodes = np.array([p[0] for p in spec.level])
        self._sigmas = np.array([p[1] for p in spec.level])
        super().__init__(self._eval, self._jvp if base.has_jvp else None,
                         self._vjp if base.has_vjp else None, name=f"{base.name}+{spec.label}")

    def active(self, t) -> np.ndarray | bool:
        t = np.asarray(t, dtype=np.float64)
        inside = (t >= self.spec.t_min) & (t <= self.spec.t_max)
        return bool(inside) if inside.ndim == 0 else inside

    def sigma(self, t):
        return np.interp(t, self._nodes, self._sigmas)

    def _scale(self, t, x):
        """Per-row (or scalar) level, zero where the perturbation is inactive."""
        inside = np.asarray(self.active(t))
        sig = np.where(inside, self.sigma(t), 0.0)
        return inside.any(), tcol(sig, np.atleast_2d(x)) if sig.ndim else float(sig)

    def _eval(self, x, t):
        out = self.base(x, t)
        any_on, s = self._scale(t, x)
        if not any_on:
            return out
        if self.delta is None:
            return out + s * (x - out)
        return out + s * self.delta

    def _relaxed(self, out, x, t, vec):
        any_on, s = self._scale(t, x)
        if self.delta is not None or not any_on:
            return out
        return (1.0 - s) * out + s * vec

    def _jvp(self, x, t, u):
        return self._relaxed(self.base.jvp(x, t, u), x, t, u)

    def _vjp(self, x, t, w):
        return self._relaxed(self.base.vjp(x, t, w), x, t, w)


def perturb_denoiser(D: Denoiser, spec: PerturbationSpec, shape=None,
                     d: int | None = None) -> PerturbedDenoiser:
    delta = None
    if spec.direction != "residual":
        delta = make_direction(spec.direction, shape, d, spec.patch_size)
    return PerturbedDenoiser(D, spec, delta)


@dataclass
class _EvalSet:
    x1: np.ndarray
    xt: np.ndarray
    out: np.ndarray


def _eval_pairs(D: Denoiser, ds: Dataset, t: float, n_eval: int | None, seed: int) -> _EvalSet:
    rng = np.random.default_rng(seed)
    n = ds.n if n_eval is None else n_eval
    idx = np.arange(n) if n <= ds.n else rng.integers(ds.n, size=n)
    x1 = ds.points[idx]
    x0 = rng.standard_normal(x1.shape)
    xt = (1.0 - t) * x0 + t * x1
    return _EvalSet(x1, xt, D(xt, t))


def calibrate_level(D: Denoiser, ds_test: Dataset, direction: str, t: float, ratio: float,
                    patch_size: int = 1, n_eval: int | None = None, seed: int = 0,
                    data_max: float | None = None, max_doublings: int = 60,
                    tol: float = 1e-9) -> float:
    """Level ``sigma`` such that the perturbed denoiser keeps ``ratio`` of the PSNR at ``t``.

    The bracket ``[0, sigma_hi]`` grows by doubling; bisection then solves
    ``PSNR(sigma) = ratio * PSNR(0)`` on the fixed evaluation pairs.
    """
    t = as_time(t)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    peak = ds_test.value_range() if data_max is None else data_max
    ev = _eval_pairs(D, ds_test, t, n_eval, seed)
    if direction == "residual":
        step = ev.xt - ev.out
    else:
        step = np.broadcast_to(make_direction(direction, ds_test.shape, ds_test.d, patch_size),
                               ev.out.shape)

    def score(sig: float) -> float:
        return mean_psnr(ev.x1, ev.out + sig * step, peak)

    base = score(0.0)
    if not np.isfinite(base):
        raise ValueError("baseline PSNR is not finite")
    target = ratio * base
    if ratio == 1.0:
        return 0.0
    hi = 1.0
    for _ in range(max_doublings):
        if score(hi) <= target:
            break
        hi *= 2.0
    else:
        raise RuntimeError(f"no bracket for PSNR target {target:.4g} within {max_doublings} doublings")
    lo = 0.0
    probe = [score(s) for s in np.linspace(0.0, hi, 9)]
    if direction != "residual" and np.any(np.diff(probe) > 1e-12):
        log.warning("PSNR is not monotone in sigma on [0, %.4g] for %s at t=%.3g", hi, direction, t)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = score(mid)
        if abs(val - target) <= tol:
            return mid
        if val > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_schedule(D: Denoiser, ds_test: Dataset, spec: PerturbationSpec, nodes: int = 7,
                       n_eval: int | None = None, seed: int = 0,
                       data_max: float | None = None) -> PerturbationSpec:
    """Resolve ``spec.ratio`` into a level table on ``nodes`` equispaced times."""
    if spec.ratio is None:
        raise ValueError("spec has no PSNR ratio to calibrate")
    ts = np.linspace(spec.t_min, spec.t_max, nodes) if spec.t_max > spec.t_min else \
        np.array([spec.t_min])
    level = [(t, calibrate_level(D, ds_test, spec.direction, float(t), spec.ratio,
                                 spec.patch_size, n_eval, seed, data_max)) for t in ts]
    return spec.with_level(level)


def write_trajectory(path_prefix, rec: TrajectoryRecord, index: int = 0) -> None:
    """CSV of ``t, x_0..x_{d-1}`` for one trajectory plus a JSON diagnostics sidecar."""
    states = rec.states[:, index, :]
    d = states.shape[1]
    write_csv(f"{path_prefix}.csv", np.column_stack([rec.times, states]),
              ["t"] + [f"x_{i}" for i in range(d)])
    side = {
        "velocity_norm": rec.velocity_norm[:, index].tolist(),
        "perturbed": rec.perturbed.tolist(),
        "endpoint": None if rec.endpoint is None else np.atleast_2d(rec.endpoint)[index].tolist(),
    }
    if rec.spectral_norm is not None:
        side["spectral_norm"] = rec.spectral_norm[:, index].tolist()
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(side, fh, indent=1)
        fh.write("\n")
