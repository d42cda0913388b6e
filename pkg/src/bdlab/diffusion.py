"""Noise schedules, forward diffusion, the eps-prediction loss and samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .adapters import WeightContext
from .tensor import ContractError, DimensionError, Tensor


class NumericError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients; ``alpha_bar[0] == 1``, length ``T + 1``."""

    kind: str
    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar.flags.writeable = False

    def __getitem__(self, t) -> np.ndarray:
        return self.alpha_bar[t]


def make_schedule(T: int = 1000, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise ContractError(f"schedule needs T >= 2, got {T}")
    s = np.arange(T) / (T - 1)
    if kind == "linear":
        betas = 1e-4 + (2e-2 - 1e-4) * s
    elif kind == "scaled-linear":
        betas = (np.sqrt(8.5e-4) + (np.sqrt(1.2e-2) - np.sqrt(8.5e-4)) * s) ** 2
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, T, alpha_bar)


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be a scalar or per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ContractError(f"t must lie in [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------- model adapters

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def as_predictor(model, ctx: WeightContext | None = None) -> Predictor:
    """Accept a ``DenoiserModel`` or a plain ``f(x, t, labels)`` callable."""
    if hasattr(model, "predictor"):
        return model.predictor(ctx)
    return model


def diffusion_loss(model, x0, t, eps, label, sched: NoiseSchedule, ctx=None, weights=None) -> Tensor:
    """Mean squared error between predicted and true noise (differentiable)."""
    eps = np.asarray(eps, dtype=np.float64)
    x_t = forward_diffuse(x0, t, eps, sched)
    if hasattr(model, "forward"):
        if weights is None:
            weights = model.materialize(ctx or WeightContext("mean"))
        pred = model.forward(x_t, t, label, weights)
    else:
        pred = tn.as_tensor(model(x_t, np.asarray(t), np.asarray(label)))
    if not np.all(np.isfinite(pred.data)):
        raise NumericError("non-finite model output in diffusion loss")
    return tn.mean(tn.square(pred - Tensor(eps)))


def x0_from_eps(x_t, eps_hat, t, sched: NoiseSchedule) -> np.ndarray:
    ab = np.asarray(sched.alpha_bar[t])
    if ab.ndim == 1 and np.ndim(x_t) == 2:
        ab = ab[:, None]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def predict_x0(model, x_t, t, label, sched: NoiseSchedule, ctx=None) -> np.ndarray:
    """Invert the forward process with the model's noise estimate."""
    if np.any(np.asarray(t) < 1):
        raise ContractError("predict_x0 needs t >= 1")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    f = as_predictor(model, ctx)
    eps_hat = f(x_t, np.broadcast_to(t, (n,)), np.broadcast_to(label, (n,)))
    return x0_from_eps(x_t, eps_hat, t, sched)


# ---------------------------------------------------------------- samplers


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    seed: int = 0
    mode: str = "ancestral"

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.steps <= sched.T:
            raise ContractError(f"sampler steps must lie in [1, {sched.T}], got {self.steps}")
        if self.mode not in ("ancestral", "deterministic-mean"):
            raise ContractError(f"unknown sampler mode {self.mode!r}")


def timesteps(t_start: int, steps: int) -> np.ndarray:
    """Decreasing integer grid from ``t_start`` to 1 with ``steps`` entries, then 0."""
    steps = min(steps, t_start)
    grid = np.unique(np.round(np.linspace(t_start, 1, steps)).astype(np.int64))[::-1]
    return np.concatenate([grid, [0]])


def _reverse(f: Predictor, x, grid, labels, sched, mode, rng) -> np.ndarray:
    ab = sched.alpha_bar
    n = x.shape[0]
    for t, t_prev in zip(grid[:-1], grid[1:]):
        a_t, a_prev = ab[t], ab[t_prev]
        eps_hat = f(x, np.full(n, t), labels)
        x0_hat = (x - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
        beta = 1.0 - a_t / a_prev
        coef_x0 = np.sqrt(a_prev) * beta / (1.0 - a_t)
        coef_xt = np.sqrt(a_t / a_prev) * (1.0 - a_prev) / (1.0 - a_t)
        x = coef_x0 * x0_hat + coef_xt * x
        if mode == "ancestral" and t_prev > 0:
            var = (1.0 - a_prev) / (1.0 - a_t) * beta
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite sample", step=int(t))
    return x


def ancestral_sample(
    model,
    sched: NoiseSchedule,
    config: SamplerConfig,
    label,
    n: int = 1,
    dim: int | None = None,
    x_T=None,
    ctx=None,
) -> np.ndarray:
    """Reverse DDPM iteration from ``x_T ~ N(0, I)`` (or a supplied ``x_T``).

    Pure function of (weights, config.seed, inputs).  The initial draw uses the
    same seeded stream as the per-step noise.
    """
    config.validate(sched)
    rng = np.random.default_rng([config.seed, 0x5A3])
    if x_T is None:
        if dim is None:
            dim = model.config.dim
        x = rng.standard_normal((n, dim))
    else:
        x = np.atleast_2d(np.array(x_T, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
    grid = timesteps(sched.T, config.steps)
    return _reverse(as_predictor(model, ctx), x, grid, labels, sched, config.mode, rng)


def partial_denoise(
    model,
    x_t,
    t_start: int,
    label,
    sched: NoiseSchedule,
    steps: int | None = None,
    mode: str = "deterministic-mean",
    seed: int = 0,
    ctx=None,
) -> np.ndarray:
    """Run the reverse iteration from a supplied ``x_t`` at ``t_start`` down to 0."""
    if not 1 <= t_start <= sched.T:
        raise ContractError(f"t_start must lie in [1, {sched.T}], got {t_start}")
    x = np.atleast_2d(np.array(x_t, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
    grid = timesteps(t_start, steps or t_start)
    rng = np.random.default_rng([seed, 0x5A4])
    return _reverse(as_predictor(model, ctx), x, grid, labels, sched, mode, rng)
