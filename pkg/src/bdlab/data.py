"""Toy data: a labelled 2-D ring mixture and procedural 8x8 / 16x16 rasters.

Every distribution reserves its last label as the *generic* label, trained on
the whole distribution, so a generic-label model plays the role of the broad
pretrained prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RingMixture:
    """Equal-weight isotropic Gaussians on a circle; label ``i`` is mode ``i``."""

    modes: int = 8
    radius: float = 1.5
    std: float = 0.08
    generic_fraction: float = 0.5

    dim = 2
    raster = False

    @property
    def n_labels(self) -> int:
        return self.modes + 1

    @property
    def generic_label(self) -> int:
        return self.modes

    @property
    def centers(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        modes = rng.integers(0, self.modes, n)
        x = self.centers[modes] + self.std * rng.standard_normal((n, 2))
        generic = rng.random(n) < self.generic_fraction
        labels = np.where(generic, self.generic_label, modes)
        return x, labels

    def assign_modes(self, x: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(x[:, None, :] - self.centers[None], axis=2)
        return d.argmin(axis=1)

    def within_modes(self, x: np.ndarray, k: float = 3.0) -> np.ndarray:
        """True where a point lies within radial distance ``k * std`` of some mode."""
        d = np.linalg.norm(x[:, None, :] - self.centers[None], axis=2).min(axis=1)
        return d <= k * self.std


@dataclass(frozen=True)
class Rasters:
    """Smooth procedural grayscale images, flattened row-major.

    Families: 0 = Gaussian blobs, 1 = oriented gratings, 2 = soft rings.
    """

    side: int = 8
    generic_fraction: float = 0.5
    families: int = 3

    raster = True

    @property
    def dim(self) -> int:
        return self.side * self.side

    @property
    def n_labels(self) -> int:
        return self.families + 1

    @property
    def generic_label(self) -> int:
        return self.families

    def _grid(self):
        c = (np.arange(self.side) + 0.5) / self.side
        return np.meshgrid(c, c, indexing="ij")

    def _one(self, rng: np.random.Generator, family: int) -> np.ndarray:
        yy, xx = self._grid()
        if family == 0:
            img = np.zeros_like(xx)
            for _ in range(2):
                cy, cx = rng.uniform(0.2, 0.8, 2)
                w = rng.uniform(0.15, 0.3)
                img += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        elif family == 1:
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.8, 1.6)
            phase = rng.uniform(0, 2 * np.pi)
            img = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        else:
            cy, cx = rng.uniform(0.3, 0.7, 2)
            r0 = rng.uniform(0.15, 0.35)
            r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            img = np.exp(-((r - r0) ** 2) / (2 * 0.08**2)) * 2 - 1
        img = img - img.mean()
        return (img / (np.abs(img).max() + 1e-12)).ravel()

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        fam = rng.integers(0, self.families, n)
        x = np.stack([self._one(rng, int(f)) for f in fam])
        generic = rng.random(n) < self.generic_fraction
        labels = np.where(generic, self.generic_label, fam)
        return x, labels


def make_distribution(kind: str, **kwargs):
    if kind == "ring":
        return RingMixture(**kwargs)
    if kind == "raster":
        return Rasters(**kwargs)
    raise ValueError(f"unknown distribution kind {kind!r}")


POOL_SIZE = 256


def few_shot_set(dist, n: int, seed: int) -> np.ndarray:
    """The first ``n`` items of the seeded candidate pool."""
    return few_shot_pool(dist, seed)[:n].copy()


def few_shot_pool(dist, seed: int, size: int = POOL_SIZE) -> np.ndarray:
    """Deterministic pool of candidate few-shot items drawn from ``dist``."""
    rng = np.random.default_rng([seed, 0xF5E7])
    x, _ = dist.sample(rng, size)
    return x


def select_few_shot(dist, indices, seed: int) -> np.ndarray:
    pool = few_shot_pool(dist, seed)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(pool):
        raise IndexError(f"few-shot indices must lie in [0, {len(pool)})")
    return pool[idx].copy()
