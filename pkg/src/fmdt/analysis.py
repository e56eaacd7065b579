"""Diagnostics: PSNR, Jacobian spectral norms, memorization distances and two-sample tests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import Dataset, Denoiser, VelocityField, as_time
from .io import write_csv
from .spectral import dense_jacobian, power_iteration
from .training import draw_source

PSNR_CAP = 99.0


def psnr(ref, est, peak: float) -> np.ndarray | float:
    """Row-wise ``10 log10(peak^2 / MSE)``, capped at 99 dB for exact matches."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    if peak <= 0:
        raise ValueError("PSNR peak must be positive")
    mse = np.mean((ref - est) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(peak**2 / mse)
    val = np.minimum(val, PSNR_CAP)
    return float(val) if np.ndim(val) == 0 else val


def mean_psnr(ref, est, peak: float) -> float:
    return float(np.mean(psnr(ref, est, peak)))


@dataclass
class PSNRCurve:
    times: np.ndarray
    values: np.ndarray
    label: str = ""
    n_eval: int = 0
    data_max: float = 1.0

    def minus(self, other: "PSNRCurve") -> "PSNRCurve":
        if not np.allclose(self.times, other.times):
            raise ValueError("curves are on different time grids")
        return PSNRCurve(self.times, self.values - other.values, f"{self.label}-{other.label}",
                         self.n_eval, self.data_max)


def psnr_curve(D: Denoiser, ds_test: Dataset, times, n_eval: int | None = None, seed: int = 0,
               data_max: float | None = None, label: str = "", replace: bool = False,
               baseline: Denoiser | None = None):
    """Mean denoising PSNR of ``D`` on ``ds_test`` at each time.

    The evaluation pairs (test point, noise draw) are fixed by ``seed`` and
    reused at every time, so curves from different denoisers with the same
    seed are directly comparable. ``n_eval`` above the test-set size requires
    ``replace=True``. With ``baseline`` the return value is
    ``(curve, baseline_curve - curve)``.
    """
    times = np.asarray(times, dtype=np.float64)
    peak = ds_test.value_range() if data_max is None else float(data_max)
    rng = np.random.default_rng(seed)
    n = ds_test.n if n_eval is None else int(n_eval)
    if n > ds_test.n and not replace:
        raise ValueError(f"n_eval={n} exceeds the {ds_test.n} test points; pass replace=True")
    idx = rng.integers(ds_test.n, size=n) if replace else np.arange(n)
    x1 = ds_test.points[idx]
    x0 = rng.standard_normal(x1.shape)

    def run(den: Denoiser, name: str) -> PSNRCurve:
        vals = np.empty(times.size)
        for k, t in enumerate(times):
            t = as_time(float(t))
            vals[k] = mean_psnr(x1, den((1.0 - t) * x0 + t * x1, t), peak)
        return PSNRCurve(times, vals, name, n, peak)

    curve = run(D, label or D.name)
    if baseline is None:
        return curve
    base = run(baseline, baseline.name)
    return curve, base.minus(curve)


def jacobian_spectral_norm(f: Denoiser, x, t, iters: int = 10, seed: int = 0,
                           fd_step: float | None = None) -> np.ndarray:
    """``||J_x f(x, t)||_2`` per row.

    Uses power iteration on exact Jacobian products when ``f`` has both,
    otherwise an exact SVD of a central-difference Jacobian.
    """
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, d = xb.shape
    if f.has_jvp and f.has_vjp and fd_step is None:
        sig, _, _ = power_iteration(lambda u: f.jvp(xb, t, u), lambda w: f.vjp(xb, t, w),
                                    B, d, iters=iters, seed=seed)
        return sig
    step = fd_step if fd_step is not None else (getattr(f, "fd_step", None) or 1e-5)
    jac = dense_jacobian(lambda z: f(z, t), xb, step)
    return np.linalg.norm(jac, ord=2, axis=(1, 2))


@dataclass
class LipschitzProfile:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray = field(repr=False)

    @property
    def peak_time(self) -> float:
        return float(self.times[int(np.argmax(self.mean))])

    def local_maxima(self) -> np.ndarray:
        """Grid indices of strict interior local maxima of the mean profile."""
        m = self.mean
        return np.flatnonzero((m[1:-1] > m[:-2]) & (m[1:-1] > m[2:])) + 1

    def rows(self):
        return np.column_stack([self.times, self.mean, self.std])


def lipschitz_profile(v: VelocityField, ds: Dataset, n_traj: int = 256, times=None,
                      substeps: int = 20, scheme: str = "rk4", seed: int = 0, x0=None,
                      source: str = "gaussian", iters: int = 10,
                      fd_step: float | None = None) -> LipschitzProfile:
    """Mean and spread of ``||J_x v(x(t), t)||_2`` along ODE trajectories.

    Trajectories start at ``x0`` (or ``n_traj`` source draws) and are integrated
    with ``substeps`` fixed steps between consecutive grid times. The default
    grid is 21 equispaced times on ``[0, 0.95]``; ``t = 1`` is excluded
    because the velocity is not defined there.
    """
    from .sampling import integrate_between

    times = np.linspace(0.0, 0.95, 21) if times is None else np.asarray(times, dtype=np.float64)
    if np.any(times >= 1.0) or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be increasing and below 1")
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0 = draw_source(rng, (n_traj, ds.d), source)
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    samples = np.empty((times.size, x.shape[0]))
    t_prev = 0.0
    for k, t in enumerate(times):
        x = integrate_between(v, x, t_prev, float(t), substeps, scheme)
        samples[k] = jacobian_spectral_norm(v, x, float(t), iters=iters, seed=seed + k,
                                            fd_step=fd_step)
        t_prev = float(t)
    return LipschitzProfile(times, samples.mean(axis=1), samples.std(axis=1), samples)


def pairwise_distance_matrix(endpoints) -> np.ndarray:
    """Model-by-model mean distance between aligned samples ``(models, samples, d)``."""
    e = np.asarray(endpoints, dtype=np.float64)
    if e.ndim != 3:
        raise ValueError(f"expected (models, samples, d) endpoints, got shape {e.shape}")
    diff = e[:, None, :, :] - e[None, :, :, :]
    out = np.linalg.norm(diff, axis=-1).mean(axis=-1)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return out


def nearest_training_point(samples, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Nearest training distance and index for every sample row."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[1] != ds.d:
        raise ValueError(f"sample dimension {x.shape[1]} != dataset dimension {ds.d}")
    dist = cdist(x, ds.points)
    idx = np.argmin(dist, axis=1)
    return dist[np.arange(x.shape[0]), idx], idx


def distance_to_trainset(endpoints, ds: Dataset) -> np.ndarray:
    """Per-model mean nearest-neighbor distance to the training set."""
    e = np.asarray(endpoints, dtype=np.float64)
    if e.ndim == 2:
        e = e[None]
    return np.array([nearest_training_point(m, ds)[0].mean() for m in e])


@dataclass(frozen=True)
class TwoSampleReport:
    statistic: float
    kind: str
    n_a: int
    n_b: int
    bandwidth: float | None = None


def _median_bandwidth(z: np.ndarray) -> float:
    dist = cdist(z, z)
    iu = np.triu_indices(z.shape[0], 1)
    med = float(np.median(dist[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def two_sample_statistic(a, b, kind: str = "energy",
                         bandwidth: float | None = None) -> TwoSampleReport:
    """Two-sample discrepancy between sample sets ``a`` and ``b``.

    ``energy`` is the energy distance; ``mmd`` is the squared MMD with a
    Gaussian kernel whose bandwidth defaults to the pooled median distance.
    Both use the V-statistic form, which is non-negative and vanishes when the
    two sets are the same multiset.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    m, n = a.shape[0], b.shape[0]
    if m < 1 or n < 1:
        raise ValueError("both sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if kind == "energy":
        stat = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
        return TwoSampleReport(float(stat), kind, m, n)
    if kind == "mmd":
        h = bandwidth or _median_bandwidth(np.vstack([a, b]))

        def k(p, q):
            return np.exp(-cdist(p, q, "sqeuclidean") / (2.0 * h**2))

        stat = k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean()
        return TwoSampleReport(float(stat), kind, m, n, float(h))
    raise ValueError(f"unknown statistic {kind!r}")


def write_profile(path, prof: LipschitzProfile) -> None:
    write_csv(path, prof.rows(), ["t", "mean", "std"])


def write_curves(path, curves: list[PSNRCurve]) -> None:
    times = curves[0].times
    write_csv(path, np.column_stack([times] + [c.values for c in curves]),
              ["t"] + [c.label for c in curves])


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
