"""Pipeline stages shared by the command line, the demos and the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analytic import estimate_sigma1
from .config import ExperimentConfig
from .data import make_distribution, select_few_shot
from .diffusion import NoiseSchedule, SamplerConfig, ancestral_sample, make_schedule
from .metrics import MetricsRow, diversity, fidelity, quality
from .model import DenoiserModel, ModelConfig
from .trainer import CheckpointSeries, finetune, pretrain


def distribution(cfg: ExperimentConfig):
    if cfg.data.kind == "raster":
        return make_distribution("raster", side=cfg.data.side)
    return make_distribution("ring")


def schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return make_schedule(cfg.schedule.T, cfg.schedule.kind)


def few_shot_data(cfg: ExperimentConfig) -> np.ndarray:
    return select_few_shot(distribution(cfg), cfg.data.few_shot, cfg.data.pool_seed)


def fine_tune_label(cfg: ExperimentConfig) -> int:
    dist = distribution(cfg)
    label = cfg.data.label if cfg.data.label is not None else dist.generic_label
    return int(label)


def build_model(cfg: ExperimentConfig) -> DenoiserModel:
    dist = distribution(cfg)
    mc = ModelConfig(
        dim=dist.dim,
        hidden=cfg.model.hidden,
        blocks=cfg.model.blocks,
        n_labels=dist.n_labels,
        time_dim=cfg.model.time_dim,
    )
    return DenoiserModel.build(mc, seed=cfg.model.init_seed)


def run_pretrain(cfg: ExperimentConfig) -> tuple[DenoiserModel, list[float]]:
    p = cfg.pretrain
    return pretrain(
        distribution(cfg),
        schedule(cfg),
        build_model(cfg),
        iterations=p.iterations,
        batch_size=p.batch_size,
        lr=p.lr,
        seed=p.seed,
        eval_every=p.eval_every,
        patience=p.patience,
    )


@dataclass
class Evaluator:
    """Metric row for one checkpoint: samples from a fixed sampler seed, so rows
    at different iterations differ only through the weights."""

    data: np.ndarray
    sched: NoiseSchedule
    label: int
    samples: int = 200
    sampler_steps: int = 50
    sampler_seed: int = 123
    metric_seed: int = 0
    side: int | None = None
    sigma1_t: int | None = 300
    sigma1_samples: int = 64

    def generate(self, model) -> np.ndarray:
        cfg = SamplerConfig(steps=self.sampler_steps, seed=self.sampler_seed)
        return ancestral_sample(model, self.sched, cfg, self.label, n=self.samples, dim=self.data.shape[1])

    def __call__(self, model, iteration: int) -> MetricsRow:
        x = self.generate(model)
        s1 = float("nan")
        if self.sigma1_t is not None:
            s1 = estimate_sigma1(model, self.data[0], self.sigma1_t, self.sigma1_samples, self.label, self.sched)
        return MetricsRow(
            iteration=int(iteration),
            fidelity=fidelity(x, self.data, seed=self.metric_seed),
            diversity=diversity(x),
            quality=quality(x, self.data, self.side),
            sigma1=s1,
        )


def evaluator(cfg: ExperimentConfig, data: np.ndarray | None = None) -> Evaluator:
    m = cfg.metrics
    return Evaluator(
        data=few_shot_data(cfg) if data is None else data,
        sched=schedule(cfg),
        label=fine_tune_label(cfg),
        samples=m.samples,
        sampler_steps=m.sampler_steps,
        sampler_seed=m.sampler_seed,
        metric_seed=m.seed,
        side=cfg.data.side if cfg.data.kind == "raster" else None,
        sigma1_t=m.sigma1_t,
        sigma1_samples=m.sigma1_samples,
    )


def run_finetune(
    cfg: ExperimentConfig,
    pretrained: DenoiserModel,
    checkpoint_dir=None,
    evaluate=True,
    keep_states: bool = True,
    stop_when=None,
) -> CheckpointSeries:
    data = few_shot_data(cfg)
    ft = cfg.finetune
    if ft.label is None:
        ft = replace(ft, label=fine_tune_label(cfg))
    class_set = None
    if ft.prior.enabled:
        class_set = class_samples(pretrained, schedule(cfg), ft.label, ft.prior.class_samples, ft.seed)
    ev = evaluator(cfg, data) if evaluate is True else (evaluate or None)
    return finetune(
        pretrained,
        data,
        schedule(cfg),
        ft,
        evaluate=ev,
        class_set=class_set,
        checkpoint_dir=checkpoint_dir,
        keep_states=keep_states,
        stop_when=stop_when,
    )


def class_samples(model, sched, label: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Prior-preservation set: samples of ``label`` from the pretrained model."""
    x = ancestral_sample(model, sched, SamplerConfig(steps=50, seed=seed + 7919), label, n=n)
    return x, np.full(n, label, dtype=np.int64)
