"""Pretraining and few-shot fine-tuning loops.

Fine-tuning follows the variational loop: per iteration draw one posterior
sample of every variational weight, then a training item, a step ``t`` uniform
on ``[1, T]`` and noise; minimise ``L_DM + lambda * L_r`` (plus an optional
prior-preservation term) with Adam.

Adam update, per parameter array ``p`` with gradient ``g`` at step ``n``
(1-based)::

    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g**2
    p -= lr * (m / (1 - b1**n)) / (sqrt(v / (1 - b2**n)) + eps)

with ``b1 = 0.9``, ``b2 = 0.999``, ``eps = 1e-8``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .adapters import AdapterSpec, WeightContext, apply_placement
from .adapters import ConfigurationError
from .diffusion import NoiseSchedule, NumericError, diffusion_loss
from .model import DenoiserModel
from .tensor import Tensor
from .variational import combined_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class Adam:
    def __init__(self, params: list[Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.n = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.n += 1
        c1 = 1.0 - self.b1**self.n
        c2 = 1.0 - self.b2**self.n
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PriorPreservation:
    enabled: bool = False
    weight: float = 1.0
    class_samples: int = 200

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigurationError(f"prior weight must be >= 0, got {self.weight}")


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 5e-4
    iterations: int = 1000
    batch_size: int = 1
    lam: float = 0.0
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    prior: PriorPreservation = field(default_factory=PriorPreservation)
    checkpoint_every: int = 100
    label: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint cadence must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train fields: {sorted(unknown)}")
        if "adapter" in d and isinstance(d["adapter"], dict):
            d["adapter"] = AdapterSpec.from_dict(d["adapter"])
        if "prior" in d and isinstance(d["prior"], dict):
            d["prior"] = PriorPreservation(**d["prior"])
        return cls(**d)


@dataclass
class Checkpoint:
    iteration: int
    path: Path | None
    metrics: object | None
    state: dict[str, np.ndarray] | None = None


@dataclass
class CheckpointSeries:
    entries: list[Checkpoint] = field(default_factory=list)
    model: DenoiserModel | None = None
    losses: list[float] = field(default_factory=list)

    def append(self, entry: Checkpoint) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValueError("checkpoint iterations must be strictly increasing")
        self.entries.append(entry)

    @property
    def rows(self) -> list:
        return [e.metrics for e in self.entries if e.metrics is not None]

    def model_at(self, iteration: int) -> DenoiserModel:
        """Copy of the trained model with weights restored from a stored checkpoint."""
        import copy

        entry = next(e for e in self.entries if e.iteration == iteration)
        if entry.state is None:
            from .checkpoint import load_checkpoint

            return load_checkpoint(entry.path)[0]
        m = copy.deepcopy(self.model)
        m.restore(entry.state)
        return m


def _check(loss: float, iteration: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss", iteration)
    if loss > 1e6:
        raise TrainingDiverged(f"loss {loss:.3e} exceeds 1e6", iteration)


def pretrain(
    dist,
    sched: NoiseSchedule,
    model: DenoiserModel,
    iterations: int = 5000,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    eval_every: int = 500,
    patience: int | None = None,
) -> tuple[DenoiserModel, list[float]]:
    """Train a plain model on the wide distribution ``dist``.

    Stops after ``iterations`` steps, or earlier once the held-out loss has not
    improved by 1% for ``patience`` consecutive evaluations.  Returns the model
    and the held-out loss history.
    """
    rng = np.random.default_rng([seed, 0x9E7])
    eval_rng = np.random.default_rng([seed, 0xE7A1])
    x_ev, y_ev = dist.sample(eval_rng, 1024)
    t_ev = eval_rng.integers(1, sched.T + 1, 1024)
    e_ev = eval_rng.standard_normal(x_ev.shape)
    params = model.parameters()
    opt = Adam(params, lr)
    history: list[float] = []
    best, stale = np.inf, 0
    for it in range(iterations):
        x0, labels = dist.sample(rng, batch_size)
        t = rng.integers(1, sched.T + 1, batch_size)
        eps = rng.standard_normal(x0.shape)
        try:
            loss = diffusion_loss(model, x0, t, eps, labels, sched)
        except NumericError:
            raise TrainingDiverged("non-finite model output", it) from None
        _check(loss.item(), it)
        opt.step(tn.grad(loss, params))
        if (it + 1) % eval_every == 0:
            with tn.no_grad():
                ev = diffusion_loss(model, x_ev, t_ev, e_ev, y_ev, sched).item()
            history.append(ev)
            log.info("pretrain it=%d eval_loss=%.5f", it + 1, ev)
            if ev < best * 0.99:
                best, stale = ev, 0
            else:
                stale += 1
            if patience is not None and stale >= patience:
                break
    return model, history


def prior_preservation_loss(model, class_x, class_labels, rng, sched, weights=None, ctx=None) -> Tensor:
    """Diffusion loss of ``model`` on samples generated by the pretrained model."""
    if len(class_x) == 0:
        raise ConfigurationError("prior preservation enabled with an empty class set")
    n = len(class_x)
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal(np.shape(class_x))
    return diffusion_loss(model, class_x, t, eps, class_labels, sched, ctx=ctx, weights=weights)


def finetune(
    pretrained: DenoiserModel,
    data: np.ndarray,
    sched: NoiseSchedule,
    config: TrainConfig,
    evaluate: Callable[[DenoiserModel, int], object] | None = None,
    class_set: tuple[np.ndarray, np.ndarray] | None = None,
    checkpoint_dir: Path | None = None,
    keep_states: bool = True,
    log_every: int | None = None,
    stop_when: Callable[[DenoiserModel, int, object], bool] | None = None,
) -> CheckpointSeries:
    """Few-shot fine-tune a copy of ``pretrained`` on ``data`` (1 to 16 items).

    ``evaluate(model, iteration)`` is called at iteration 0 and then every
    ``config.checkpoint_every`` iterations to produce the metrics row.
    ``stop_when(model, iteration, row)`` is checked at the same points and ends
    training early when it returns true.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if not 1 <= len(data) <= 16:
        raise ConfigurationError(f"few-shot set must hold 1..16 items, got {len(data)}")
    label = config.label if config.label is not None else pretrained.config.n_labels - 1
    model, _ = apply_placement(pretrained, config.adapter, seed=config.seed)
    bayesian = model.is_bayesian
    params = model.parameters()
    opt = Adam(params, config.lr)
    rng = np.random.default_rng([config.seed, 0xF17E])
    prior_rng = np.random.default_rng([config.seed, 0x9A1])
    if config.prior.enabled and (class_set is None or len(class_set[0]) == 0):
        raise ConfigurationError("prior preservation enabled without class samples")

    series = CheckpointSeries(model=model)
    window: list[float] = []

    def record(it: int) -> bool:
        row = None
        if evaluate is not None:
            row = evaluate(model, it)
            if row is not None and hasattr(row, "l_dm"):
                row.l_dm = float(np.mean(window)) if window else float("nan")
                if bayesian:
                    with tn.no_grad():
                        row.l_r = model.kl().item()
        path = None
        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            path = Path(checkpoint_dir) / f"ckpt_{it:06d}.bdlab"
            save_checkpoint(path, model, sched, {"iteration": it, "seed": config.seed})
        series.append(Checkpoint(it, path, row, model.snapshot() if keep_states else None))
        window.clear()
        return bool(stop_when is not None and stop_when(model, it, row))

    if record(0):
        return series
    for it in range(config.iterations):
        ctx = WeightContext("sample", config.seed, it) if bayesian else WeightContext("mean")
        weights = model.materialize(ctx)
        idx = rng.integers(0, len(data), config.batch_size)
        x0 = data[idx]
        t = rng.integers(1, sched.T + 1, config.batch_size)
        eps = rng.standard_normal(x0.shape)
        try:
            ldm = diffusion_loss(model, x0, t, eps, label, sched, weights=weights)
        except NumericError:
            raise TrainingDiverged("non-finite model output", it) from None
        loss = combined_loss(ldm, model.kl() if (bayesian and config.lam > 0) else 0.0, config.lam)
        if config.prior.enabled and config.prior.weight > 0:
            cx, cy = class_set
            pick = prior_rng.integers(0, len(cx), config.batch_size)
            ppl = prior_preservation_loss(model, cx[pick], cy[pick], prior_rng, sched, weights=weights)
            loss = loss + config.prior.weight * ppl
        value = loss.item()
        _check(value, it)
        window.append(ldm.item())
        series.losses.append(ldm.item())
        opt.step(tn.grad(loss, params))
        if log_every and (it + 1) % log_every == 0:
            log.info("finetune it=%d l_dm=%.5f", it + 1, float(np.mean(series.losses[-log_every:])))
        if (it + 1) % config.checkpoint_every == 0 and record(it + 1):
            break
    return series
