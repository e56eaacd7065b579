"""Plug-and-play inpainting driven by a time-indexed denoiser."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import psnr
from .core import Denoiser
from .io import read_fmdt

STEP_RULES = ("power", "constant")


class RestorationDiverged(FloatingPointError):
    def __init__(self, msg: str, trace: list[float], last: np.ndarray):
        super().__init__(msg)
        self.trace = trace
        self.last = last


@dataclass(frozen=True)
class InverseProblem:
    """Masked observation ``y``; ``mask[i] = 1`` marks an observed coordinate."""

    y: np.ndarray
    mask: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        mask = np.asarray(self.mask, dtype=np.float64).ravel()
        if y.shape != mask.shape:
            raise ValueError(f"observation {y.shape} and mask {mask.shape} differ")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        if not mask.any():
            raise ValueError("mask observes no coordinate")
        if not np.all(np.isfinite(y)):
            raise ValueError("observation must be finite")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)

    @property
    def d(self) -> int:
        return self.y.size

    def initial(self) -> np.ndarray:
        return self.mask * self.y

    def residual(self, x) -> float:
        return float(np.linalg.norm(self.mask * (np.asarray(x) - self.y)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Gradient of ``0.5 ||mask * (x - y)||^2``."""
        return self.mask * (x - self.y)


@dataclass
class RestorationResult:
    x: np.ndarray
    times: np.ndarray
    trace: list[float] = field(default_factory=list)


def pnp_flow_inpaint(D: Denoiser, prob: InverseProblem, alpha: float = 0.3, n_iters: int = 100,
                     seed: int = 0, step: str = "power", ground_truth=None,
                     data_max: float = 2.0) -> RestorationResult:
    """PnP-Flow iterations: fidelity step, re-noising to ``t_k``, denoising at ``t_k``.

    Times run ``t_k = (k + 1) / n_iters``. The fidelity step size is
    ``(1 - t_k)^alpha`` under the ``power`` rule and ``alpha`` under
    ``constant``. For noiseless problems the observed coordinates of the
    returned estimate are reset to ``y``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    if step not in STEP_RULES:
        raise ValueError(f"unknown step rule {step!r}")
    rng = np.random.default_rng(seed)
    x = prob.initial()
    truth = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64).ravel()
    trace = []
    times = (np.arange(n_iters) + 1.0) / max(n_iters, 1)
    for t in times:
        gamma = (1.0 - t) ** alpha if step == "power" else alpha
        z = x - gamma * prob.grad(x)
        noisy = t * z + (1.0 - t) * rng.standard_normal(prob.d)
        x = D(noisy, float(t))
        if not np.all(np.isfinite(x)):
            raise RestorationDiverged(f"non-finite iterate at t = {t:.4g}", trace, z)
        if truth is not None:
            trace.append(psnr(truth, x, data_max))
    if prob.noise_std == 0.0 and n_iters > 0:
        x = np.where(prob.mask == 1, prob.y, x)
        if truth is not None:
            trace[-1] = psnr(truth, x, data_max)
    return RestorationResult(x, times, trace)


def rectangle_mask(shape: tuple[int, int, int], top: int, left: int, height: int,
                   width: int) -> np.ndarray:
    """Observed everywhere except a ``height x width`` hole, flattened channel-major."""
    c, h, w = shape
    m = np.ones((c, h, w))
    m[:, top:top + height, left:left + width] = 0.0
    return m.ravel()


def load_problem(path) -> InverseProblem:
    """Read ``{"observation", "mask" | "rectangle", "noise_std"}`` with paths relative to the file."""
    path = Path(path)
    spec = json.loads(path.read_text())
    obs = read_fmdt(path.parent / spec["observation"])
    if obs.n != 1:
        raise ValueError("observation file must hold exactly one sample")
    if "mask" in spec:
        mask = read_fmdt(path.parent / spec["mask"]).points[0]
    else:
        if obs.shape is None:
            raise ValueError("rectangle masks need image shape metadata")
        r = spec["rectangle"]
        mask = rectangle_mask(obs.shape, r["top"], r["left"], r["height"], r["width"])
    return InverseProblem(obs.points[0], mask, float(spec.get("noise_std", 0.0)))
