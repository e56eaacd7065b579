"""Weighted denoising losses, the Adam/EMA training loop and model ensembles."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, Denoiser, as_time, interpolate
from .net import NonFiniteError, ParametrizedDenoiser
from .spectral import power_iteration

log = logging.getLogger(__name__)

KINDS = ("fm", "classic", "den", "pow1", "pow3", "mid", "custom")
# weightings whose singularity sits at t = 1
_SINGULAR_AT_ONE = ("fm", "pow1", "pow3")


@dataclass(frozen=True)
class WeightingScheme:
    """A time weighting ``w_t`` with explicit support, capped at ``w_cap``."""

    kind: str = "fm"
    sigma_max: float = 19.0
    t_star: float = 0.5
    table: tuple[tuple[float, float], ...] | None = None
    w_cap: float = 1e4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown weighting {self.kind!r}; expected one of {KINDS}")
        if self.w_cap <= 0:
            raise ValueError("w_cap must be positive")
        if self.kind == "classic" and self.sigma_max < 0:
            raise ValueError("sigma_max must be non-negative")
        if self.kind == "mid" and not 0.0 <= self.t_star <= 1.0:
            raise ValueError("t_star must lie in [0, 1]")
        if self.kind == "custom":
            if not self.table or len(self.table) < 2:
                raise ValueError("custom weighting needs a table of at least two (t, w) rows")
            ts = [r[0] for r in self.table]
            if any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 0 or ts[-1] > 1:
                raise ValueError("custom table times must increase within [0, 1]")
            if any(r[1] < 0 for r in self.table):
                raise ValueError("custom weights must be non-negative")

    @classmethod
    def parse(cls, spec: str, w_cap: float = 1e4) -> "WeightingScheme":
        """Build from names such as ``fm``, ``classic``, ``classic-19``, ``mid-0.2``."""
        name, _, arg = spec.strip().lower().partition("-")
        name = name.replace("_", "").replace(" ", "")
        if name == "classic":
            return cls("classic", sigma_max=float(arg) if arg else 19.0, w_cap=w_cap)
        if name == "mid":
            return cls("mid", t_star=float(arg) if arg else 0.5, w_cap=w_cap)
        if arg:
            raise ValueError(f"weighting {name!r} takes no parameter")
        return cls(name, w_cap=w_cap)

    @property
    def label(self) -> str:
        if self.kind == "classic":
            return f"classic-{self.sigma_max:g}"
        if self.kind == "mid":
            return f"mid-{self.t_star:g}"
        return self.kind

    @property
    def t_support(self) -> tuple[float, float]:
        if self.kind == "classic":
            return (1.0 / (1.0 + self.sigma_max), 1.0)
        if self.kind == "custom":
            return (self.table[0][0], self.table[-1][0])
        return (0.0, 1.0)

    @property
    def singular_at_one(self) -> bool:
        return self.kind in _SINGULAR_AT_ONE

    def __call__(self, t):
        t = np.asarray(as_time(t), dtype=np.float64)
        with np.errstate(divide="ignore", over="ignore"):
            if self.kind == "fm":
                w = 1.0 / (1.0 - t) ** 2
            elif self.kind == "pow1":
                w = 1.0 / (1.0 - t)
            elif self.kind == "pow3":
                w = 1.0 / (1.0 - t) ** 3
            elif self.kind == "classic":
                w = 1.0 / t**2
            elif self.kind == "den":
                w = np.ones_like(t)
            elif self.kind == "mid":
                w = 1.0 / (self.t_star - t) ** 2
            else:
                ts, ws = zip(*self.table)
                w = np.interp(t, ts, ws)
        lo, hi = self.t_support
        w = np.where((t >= lo) & (t <= hi), np.minimum(w, self.w_cap), 0.0)
        return float(w) if w.ndim == 0 else w


def weight(ws: WeightingScheme, t):
    return ws(t)


def loss(D, ws: WeightingScheme, x1, x0, t) -> float:
    """``(1/B) sum_b w(t_b) ||D(x_t, t_b) - x1_b||^2`` with ``x_t`` on the linear path."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = x1.shape[0]
    if B == 0:
        raise ValueError("loss needs a nonempty batch")
    t = np.broadcast_to(np.asarray(as_time(t), dtype=np.float64), (B,)).copy()
    w = np.asarray(ws(t))
    keep = w > 0
    if not keep.any():
        return 0.0
    xt = interpolate(x0[keep], x1[keep], t[keep])
    err = np.sum((D(xt, t[keep]) - x1[keep]) ** 2, axis=1)
    per = w[keep] * err
    if not np.all(np.isfinite(per)):
        idx = np.flatnonzero(keep)[np.flatnonzero(~np.isfinite(per))[0]]
        raise NonFiniteError(f"non-finite loss at sample {int(idx)}", int(idx))
    return float(per.sum() / B)


@dataclass(frozen=True)
class RegSpec:
    """Jacobian spectral-norm penalty ``lam * 1[t in interval] * max(||J_v||, M)``."""

    t_min: float = 0.1
    t_max: float = 0.3
    lam: float = 0.1
    M: float = 4.0
    power_iters: int = 10

    def __post_init__(self):
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ValueError("regularizer interval must satisfy 0 <= t_min <= t_max <= 1")
        if self.lam < 0 or self.M <= 0 or self.power_iters < 1:
            raise ValueError("need lam >= 0, M > 0 and power_iters >= 1")


def spectral_norm_penalty(pd: ParametrizedDenoiser, x_t, t, spec: RegSpec, seed: int = 0):
    """Batch-mean penalty and its weight gradient.

    The singular vectors from the power method are treated as constants, so the
    gradient is that of ``w^T J_v u`` on rows where the estimate exceeds ``M``.
    """
    xb = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    B = xb.shape[0]
    t = np.broadcast_to(np.asarray(as_time(t), dtype=np.float64), (B,)).copy()
    inside = (t >= spec.t_min) & (t <= spec.t_max)
    grad = np.zeros_like(pd.net.weights)
    if not inside.any() or spec.lam == 0.0:
        return (float(spec.lam * spec.M * inside.sum() / B), grad)
    xs, ts = xb[inside], t[inside]
    sigma, u, w = power_iteration(lambda a: pd.velocity_jvp(xs, ts, a),
                                  lambda a: pd.velocity_vjp(xs, ts, a),
                                  xs.shape[0], xs.shape[1], spec.power_iters, seed)
    value = spec.lam * np.maximum(sigma, spec.M)
    above = sigma > spec.M
    if above.any():
        grad = pd.velocity_jacobian_functional_grad(
            xs[above], ts[above], u[above], w[above], np.full(above.sum(), spec.lam / B))
    return float(value.sum() / B), grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    t_sampling: tuple[float, float] | None = None
    # upper truncation 1 - t_eps applied to weightings singular at t = 1
    t_eps: float = 1e-3
    steps: int | None = None
    regularizer: RegSpec | None = None
    # regularizer is active only over this final fraction of the step budget
    reg_fraction: float = 0.025
    source: str = "gaussian"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1) or self.eps <= 0:
            raise ValueError("invalid Adam parameters")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.t_sampling is not None:
            lo, hi = self.t_sampling
            if not 0 <= lo <= hi <= 1:
                raise ValueError("t_sampling must be an interval inside [0, 1]")
        if not 0 < self.t_eps < 1 or not 0 <= self.reg_fraction <= 1:
            raise ValueError("t_eps must lie in (0, 1) and reg_fraction in [0, 1]")
        if self.source not in ("gaussian", "uniform"):
            raise ValueError("source must be 'gaussian' or 'uniform'")

    def sampling_interval(self, ws: WeightingScheme) -> tuple[float, float]:
        lo, hi = self.t_sampling if self.t_sampling is not None else (
            (0.0, 1.0 - self.t_eps) if ws.singular_at_one else (0.0, 1.0))
        slo, shi = ws.t_support
        lo, hi = max(lo, slo), min(hi, shi)
        if lo > hi:
            raise ValueError(f"t_sampling {self.t_sampling} misses the support {ws.t_support}")
        return lo, hi


def draw_source(rng: np.random.Generator, shape, source: str = "gaussian") -> np.ndarray:
    if source == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    return rng.standard_normal(shape)


def ema_update(ema: np.ndarray, weights: np.ndarray, decay: float) -> np.ndarray:
    return decay * ema + (1.0 - decay) * weights


class Adam:
    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.k)
        vhat = self.v / (1 - self.b2**self.k)
        return weights - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``last_valid`` holds the last good model."""

    def __init__(self, msg: str, last_valid: ParametrizedDenoiser, history: list[float]):
        super().__init__(msg)
        self.last_valid = last_valid
        self.history = history


@dataclass
class TrainResult:
    model: ParametrizedDenoiser
    history: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def ema_model(self) -> ParametrizedDenoiser:
        return self.model.ema()


def train(ds: Dataset, pd: ParametrizedDenoiser, ws: WeightingScheme,
          cfg: TrainConfig) -> TrainResult:
    """Minimize the weighted denoising loss with Adam, tracking an EMA of the weights.

    ``history`` holds the mean training loss of every epoch.
    """
    if ds.d != pd.d:
        raise ValueError(f"dataset dimension {ds.d} != model dimension {pd.d}")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.sampling_interval(ws)
    per_epoch = max(1, math.ceil(ds.n / cfg.batch_size))
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    reg_start = total - int(round(cfg.reg_fraction * total)) if cfg.regularizer else total
    weights = pd.net.weights.copy()
    ema = weights.copy()
    opt = Adam(weights.size, cfg.learning_rate, cfg.betas, cfg.eps)
    history: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    while step < total:
        order = np.resize(rng.permutation(ds.n), per_epoch * cfg.batch_size)
        for k in range(per_epoch):
            if step >= total:
                break
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            x1 = ds.points[idx]
            x0 = draw_source(rng, x1.shape, cfg.source)
            t = rng.uniform(lo, hi, size=idx.size)
            xt = interpolate(x0, x1, t)
            model = pd.with_weights(weights)
            try:
                value, grad = model.loss_and_grad(xt, x1, t, ws(t))
                if step >= reg_start:
                    pen, pgrad = spectral_norm_penalty(model, xt, t, cfg.regularizer,
                                                       seed=int(rng.integers(2**31)))
                    value += pen
                    grad = grad + pgrad
                if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                    raise NonFiniteError("non-finite loss or gradient")
            except NonFiniteError as exc:
                last = pd.with_weights(weights)
                last.ema_weights = ema.copy()
                raise TrainingDiverged(f"training diverged at step {step}: {exc}",
                                       last, history) from exc
            weights = opt.step(weights, grad)
            ema = ema_update(ema, weights, cfg.ema_decay)
            epoch_losses.append(value)
            step += 1
        history.append(float(np.mean(epoch_losses)))
        epoch_losses = []
    out = pd.with_weights(weights)
    out.ema_weights = ema
    log.debug("trained %s/%s for %d steps, final epoch loss %.4g",
              ws.label, pd.klass, step, history[-1])
    return TrainResult(out, history, step)


class PiecewiseDenoiser(Denoiser):
    """Dispatches ``t`` to one of ``k`` models on ``[i/k, (i+1)/k)``; ``t = 1`` goes last."""

    def __init__(self, models: list[ParametrizedDenoiser], name: str = "10-denoisers"):
        self.models = list(models)
        self.k = len(self.models)
        super().__init__(self._eval, self._jvp, self._vjp, name=name)

    def index(self, t) -> np.ndarray | int:
        t = np.asarray(as_time(t), dtype=np.float64)
        idx = np.minimum(np.floor(self.k * t).astype(int), self.k - 1)
        return int(idx) if idx.ndim == 0 else idx

    def _dispatch(self, method: str, x, t, extra=None):
        idx = self.index(t)
        if np.ndim(idx) == 0:
            fn = getattr(self.models[idx], method)
            return fn(x, t) if extra is None else fn(x, t, extra)
        out = np.empty_like(x)
        for i in np.unique(idx):
            rows = idx == i
            fn = getattr(self.models[i], method)
            args = (x[rows], t[rows]) if extra is None else (x[rows], t[rows], extra[rows])
            out[rows] = fn(*args)
        return out

    def _eval(self, x, t):
        return self._dispatch("__call__", x, t)

    def _jvp(self, x, t, u):
        return self._dispatch("jvp", x, t, u)

    def _vjp(self, x, t, w):
        return self._dispatch("vjp", x, t, w)


def _member_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def train_ensemble(ds: Dataset, pd: ParametrizedDenoiser, cfg: TrainConfig,
                   ws: WeightingScheme | None = None, k: int = 10,
                   threads: int = 1) -> tuple[PiecewiseDenoiser, list[TrainResult]]:
    """Train ``k`` models from the same initialization, model ``i`` on ``[i/k, (i+1)/k]``."""
    ws = ws or WeightingScheme("den")

    def one(i: int) -> TrainResult:
        sub = replace(cfg, t_sampling=(i / k, (i + 1) / k), seed=_member_seed(cfg.seed, i))
        return train(ds, pd, ws, sub)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(k)))
    else:
        results = [one(i) for i in range(k)]
    return PiecewiseDenoiser([r.model for r in results]), results


def train_ensemble_10(ds: Dataset, cfg: TrainConfig, pd: ParametrizedDenoiser,
                      ws: WeightingScheme | None = None, threads: int = 1):
    return train_ensemble(ds, pd, cfg, ws, 10, threads)


def fit_tabular_denoiser(ds: Dataset, ws: WeightingScheme, t_grid, x_edges,
                         draws: int, seed: int = 0) -> np.ndarray:
    """Exact minimizer of the weighted loss over a lookup table, for ``d = 1``.

    Cells are ``[x_edges[j], x_edges[j+1])`` at each grid time; a 2D ``x_edges``
    gives one row of edges per grid time. Within a cell the weighted squared
    loss is minimized by the weighted mean of the clean targets that fell into
    it. Cells with zero weight or no draws are NaN.
    """
    if ds.d != 1:
        raise ValueError("tabular fitting is implemented for one-dimensional data")
    rng = np.random.default_rng(seed)
    all_edges = np.asarray(x_edges, dtype=np.float64)
    if all_edges.ndim == 1:
        all_edges = np.broadcast_to(all_edges, (len(t_grid), all_edges.size))
    table = np.full((len(t_grid), all_edges.shape[1] - 1), np.nan)
    for r, t in enumerate(t_grid):
        edges = all_edges[r]
        w = ws(t)
        if w <= 0:
            continue
        x1 = ds.points[rng.integers(ds.n, size=draws), 0]
        xt = (1.0 - t) * rng.standard_normal(draws) + t * x1
        cell = np.searchsorted(edges, xt, side="right") - 1
        ok = (cell >= 0) & (cell < edges.size - 1)
        num = np.bincount(cell[ok], weights=w * x1[ok], minlength=edges.size - 1)
        den = np.bincount(cell[ok], weights=np.full(ok.sum(), w), minlength=edges.size - 1)
        table[r] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return table
