"""Synthetic target sets: discrete point sets, 2D densities and tiny blob images."""

from __future__ import annotations

import numpy as np

from .core import Dataset

# 1D three-point target for the uniform-source Lipschitz experiment. The outer
# point sits far from the close pair so the first cone split happens well
# before the close pair separates.
FIG5A_POINTS = (-60.0, 0.0, 8.0)


def k_points(k: int, d: int, seed: int = 0, scale: float = 1.0) -> Dataset:
    """``k`` points drawn from ``N(0, scale^2 I_d)``."""
    if k < 1 or d < 1:
        raise ValueError("k and d must be positive")
    rng = np.random.default_rng(seed)
    return Dataset(scale * rng.standard_normal((k, d)), name=f"{k}pt-d{d}")


def fig5a_3pt() -> Dataset:
    return Dataset(np.array(FIG5A_POINTS)[:, None], name="fig5a-3pt")


def gaussian_mixture(n: int, components: int = 8, radius: float = 2.0, std: float = 0.1,
                     seed: int = 0) -> Dataset:
    """Isotropic 2D components evenly spaced on a circle, equal weights."""
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(components) / components
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = rng.integers(components, size=n)
    return Dataset(centers[labels] + std * rng.standard_normal((n, 2)), name="gmm2d")


def checkerboard_2d(n: int, cells: int = 4, extent: float = 2.0, seed: int = 0) -> Dataset:
    """Uniform density on the dark squares of a ``cells x cells`` board on ``[-extent, extent]^2``."""
    rng = np.random.default_rng(seed)
    dark = np.array([(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0])
    pick = dark[rng.integers(len(dark), size=n)]
    width = 2.0 * extent / cells
    pts = -extent + (pick + rng.uniform(size=(n, 2))) * width
    return Dataset(pts, name="checker2d")


def blobs(n: int, size: int = 8, sigma: float = 1.2, seed: int = 0,
          background: float = -1.0) -> Dataset:
    """``size x size`` single-channel images of one Gaussian blob.

    Pixels rise from ``background`` to at most ``background + 2``.
    """
    rng = np.random.default_rng(seed)
    grid = np.arange(size)
    centers = rng.uniform(1.5, size - 2.5, size=(n, 2))
    amp = rng.uniform(0.6, 1.0, size=n)
    dy = (grid[None, :] - centers[:, :1]) ** 2
    dx = (grid[None, :] - centers[:, 1:]) ** 2
    img = np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * sigma**2))
    img = 2.0 * amp[:, None, None] * img + background
    return Dataset(img.reshape(n, -1), name=f"blobs{size}", shape=(1, size, size))


GENERATORS = {
    "k-points": k_points,
    "gaussian-mixture": gaussian_mixture,
    "checkerboard": checkerboard_2d,
    "blobs": blobs,
}
