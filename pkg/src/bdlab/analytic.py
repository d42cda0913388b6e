"""Gaussian world model of a fine-tuned denoiser.

The fine-tuned model is treated as believing ``x0 ~ N(x*, sigma1^2 I)`` around
an anchor ``x*`` picked from its anchor set.  With the forward process
``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`` the posterior over ``x0`` is

    N(x* + k (x_t - sqrt(ab) x*),  sigma1^2 (1 - ab) / (ab sigma1^2 + 1 - ab))

with amplification ``k = sqrt(ab) sigma1^2 / (ab sigma1^2 + 1 - ab)``.
``sigma1 = 0`` always returns the anchor; ``sigma1 -> inf`` only rescales
``x_t`` by ``1/sqrt(ab)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, predict_x0
from .tensor import ContractError, DimensionError


@dataclass
class GaussianWorldModel:
    anchors: np.ndarray
    sigma1: float
    sched: NoiseSchedule = field(repr=False)

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if self.anchors.size == 0:
            raise ContractError("world model needs at least one anchor")
        if not self.sigma1 >= 0:
            raise ContractError(f"sigma1 must be >= 0, got {self.sigma1}")


@dataclass
class PosteriorGaussian:
    """Isotropic posterior over ``x0``.

    ``variance`` is the exact conditional variance of the joint Gaussian;
    ``variance_ratio`` is the same quantity in units of the prior variance
    ``sigma1^2``, i.e. ``(1 - ab) / (ab sigma1^2 + 1 - ab)``, which lies in (0, 1].
    """

    mean: np.ndarray
    variance: float
    variance_ratio: float
    anchor_index: int = 0


def _ab(sched: NoiseSchedule, t: int) -> float:
    if t < 1:
        raise ContractError("t must be >= 1")
    return float(sched.alpha_bar[t])


def amplification_ab(sigma1: float, ab: float) -> float:
    """Amplification for an explicit ``alpha_bar`` value."""
    if np.isinf(sigma1):
        return 1.0 / np.sqrt(ab)
    s2 = sigma1 * sigma1
    return np.sqrt(ab) * s2 / (ab * s2 + 1.0 - ab)


def amplification(sigma1: float, t: int, sched: NoiseSchedule) -> float:
    return amplification_ab(sigma1, _ab(sched, t))


def posterior_variance_ratio_ab(sigma1: float, ab: float) -> float:
    """Posterior over prior variance, ``(1 - ab) / (ab sigma1^2 + 1 - ab)``."""
    if np.isinf(sigma1):
        return 0.0
    return (1.0 - ab) / (ab * sigma1 * sigma1 + 1.0 - ab)


def posterior_variance_ab(sigma1: float, ab: float) -> float:
    """Exact ``Var[x0 | x_t] = sigma1^2 (1 - ab) / (ab sigma1^2 + 1 - ab)``."""
    if np.isinf(sigma1):
        return (1.0 - ab) / ab
    return sigma1 * sigma1 * posterior_variance_ratio_ab(sigma1, ab)


def delta_t(x_t, anchor, sigma1: float, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Error term ``k (x_t - sqrt(ab) anchor)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if x_t.shape[-1] != anchor.shape[-1]:
        raise DimensionError(f"x_t {x_t.shape} and anchor {anchor.shape} differ")
    ab = _ab(sched, t)
    return amplification_ab(sigma1, ab) * (x_t - np.sqrt(ab) * anchor)


def nearest_anchor(wm: GaussianWorldModel, x_t, t: int) -> int:
    """Anchor with the smallest error term; the lowest index wins ties."""
    ab = _ab(wm.sched, t)
    resid = np.linalg.norm(np.asarray(x_t, dtype=np.float64)[None, :] - np.sqrt(ab) * wm.anchors, axis=1)
    # k is shared by all anchors, so minimising ||delta|| is minimising the residual
    return int(np.argmin(resid))


def posterior_x0(wm: GaussianWorldModel, x_t, t: int) -> PosteriorGaussian:
    x_t = np.asarray(x_t, dtype=np.float64)
    j = nearest_anchor(wm, x_t, t)
    anchor = wm.anchors[j]
    ab = _ab(wm.sched, t)
    mean = anchor + delta_t(x_t, anchor, wm.sigma1, t, wm.sched)
    return PosteriorGaussian(
        mean, posterior_variance_ab(wm.sigma1, ab), posterior_variance_ratio_ab(wm.sigma1, ab), j
    )


def joint_covariance(wm: GaussianWorldModel, t: int) -> np.ndarray:
    """Covariance of ``(x0, x_t)`` per coordinate; the cross term takes the positive sign."""
    ab = _ab(wm.sched, t)
    s2 = wm.sigma1**2
    c = np.sqrt(ab) * s2
    return np.array([[s2, c], [c, ab * s2 + 1.0 - ab]])


def sigma1_from_amplification(k: float, ab: float) -> float:
    """Invert ``k(sigma1)``; ``k <= 0`` maps to 0 and ``k >= 1/sqrt(ab)`` to ``inf``."""
    if k <= 0:
        return 0.0
    if k >= 1.0 / np.sqrt(ab):
        return np.inf
    return float(np.sqrt(k * (1.0 - ab) / (np.sqrt(ab) - k * ab)))


def fit_amplification(x_t, x0_hat, anchor, ab: float) -> np.ndarray:
    """Per-row least-squares ``k`` in ``x0_hat - anchor ~ k (x_t - sqrt(ab) anchor)``."""
    u = np.atleast_2d(x_t) - np.sqrt(ab) * anchor
    v = np.atleast_2d(x0_hat) - anchor
    return np.einsum("ij,ij->i", u, v) / np.einsum("ij,ij->i", u, u)


def estimate_sigma1(
    model,
    anchor,
    t: int,
    n_samples: int,
    label,
    sched: NoiseSchedule,
    seed: int = 0,
    ctx=None,
) -> float:
    """Median over ``x_t ~ N(0, (1 - ab) I)`` of the sigma1 implied by the model's
    own prediction of ``x0``."""
    if t < 1:
        raise ContractError("estimate_sigma1 needs t >= 1")
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    anchor = np.asarray(anchor, dtype=np.float64).ravel()
    ab = float(sched.alpha_bar[t])
    rng = np.random.default_rng([seed, 0x51C1, t])
    x_t = np.sqrt(1.0 - ab) * rng.standard_normal((n_samples, anchor.size))
    x0_hat = predict_x0(model, x_t, t, label, sched, ctx)
    ks = fit_amplification(x_t, x0_hat, anchor, ab)
    return float(np.median([sigma1_from_amplification(k, ab) for k in ks]))


def scale_probe_prediction(wm: GaussianWorldModel, k: float, t: int) -> np.ndarray:
    """Predicted ``x0`` for the input ``x_t = k x'``: ``(1 + amp (k - sqrt(ab))) x'``."""
    if len(wm.anchors) != 1:
        raise ContractError("the scale probe is defined for a single anchor")
    ab = _ab(wm.sched, t)
    amp = amplification_ab(wm.sigma1, ab)
    return (1.0 + amp * (k - np.sqrt(ab))) * wm.anchors[0]
