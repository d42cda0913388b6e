"""Mean-field Gaussian weights with a pretrained-snapshot prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y; y + log1p(-exp(-y)) does not
    return y + np.log(-np.expm1(-y))


@dataclass
class PosteriorSample:
    theta: Tensor
    eps_used: np.ndarray


class VariationalParameter:
    """Independent Gaussian ``N(mu, softplus(rho)^2)`` per element of one weight.

    ``prior_mean`` is a frozen copy of the pretrained weight and ``prior_sigma``
    the scalar prior scale, so the prior is ``N(prior_mean, prior_sigma^2)``.
    """

    def __init__(self, mu: np.ndarray, rho: np.ndarray, prior_mean: np.ndarray, prior_sigma: float):
        self.mu = Tensor(np.array(mu, dtype=np.float64), requires_grad=True)
        self.rho = Tensor(np.array(rho, dtype=np.float64), requires_grad=True)
        self.prior_mean = np.array(prior_mean, dtype=np.float64)
        self.prior_mean.flags.writeable = False
        self.prior_sigma = float(prior_sigma)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho.data)

    def parameters(self) -> list[Tensor]:
        return [self.mu, self.rho]

    def __repr__(self) -> str:
        return f"VariationalParameter(shape={self.shape}, prior_sigma={self.prior_sigma})"


def init_variational(theta0, sigma_init: float, prior_sigma: float) -> VariationalParameter:
    if not sigma_init > 0 or not prior_sigma > 0:
        raise ContractError(
            f"scales must be positive, got sigma_init={sigma_init}, prior_sigma={prior_sigma}"
        )
    theta0 = np.asarray(theta0, dtype=np.float64)
    rho = np.full(theta0.shape, inverse_softplus(sigma_init))
    return VariationalParameter(theta0.copy(), rho, theta0, prior_sigma)


def sample_param(vp: VariationalParameter, rng: np.random.Generator) -> PosteriorSample:
    """Reparameterized draw ``mu + softplus(rho) * eps``; gradients reach mu and rho."""
    eps = rng.standard_normal(vp.shape)
    theta = vp.mu + tn.softplus(vp.rho) * Tensor(eps)
    return PosteriorSample(theta, eps)


def mean_mode(vp: VariationalParameter) -> Tensor:
    return vp.mu


def kl_to_prior(vp: VariationalParameter) -> Tensor:
    """Closed-form ``KL(N(mu, s^2) || N(theta0, sigma^2))`` summed over elements."""
    sigma = vp.prior_sigma
    s = tn.softplus(vp.rho)
    diff = vp.mu - Tensor(vp.prior_mean)
    per_elem = (
        np.log(sigma)
        - tn.log(s)
        + (tn.square(s) + tn.square(diff)) / (2.0 * sigma**2)
        - 0.5
    )
    return tn.sum_(per_elem)


def kl_gaussian(mu, s, mu0, sigma) -> np.ndarray:
    """Elementwise numpy version of the KL above, for reporting."""
    mu, s, mu0 = (np.asarray(v, dtype=np.float64) for v in (mu, s, mu0))
    return np.log(sigma / s) + (s**2 + (mu - mu0) ** 2) / (2.0 * sigma**2) - 0.5


def combined_loss(ldm_sample, lr, lam: float):
    """Diffusion loss plus ``lam`` times the regularization loss."""
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return ldm_sample
    return ldm_sample + lam * lr
