"""Experiment configuration files.

A config is a JSON object with one section per stage and at most one level of
nesting::

    {
      "name": "ring-oneshot",
      "data": {"kind": "ring", "few_shot": [0], "pool_seed": 0},
      "model": {"hidden": 64, "blocks": 2, "time_dim": 32},
      "schedule": {"kind": "linear", "T": 1000},
      "pretrain": {"seed": 0, "iterations": 6000, "batch_size": 128, "lr": 0.002},
      "finetune": {"seed": 0, "lr": 0.0005, "iterations": 2000, "checkpoint_every": 80},
      "adapter": {"variant": "full", "bayesian": false},
      "prior": {"enabled": false},
      "metrics": {"seed": 0, "samples": 200, "sampler_steps": 50},
      "probe": {"t": 300, "ks": [0, 0.25, 0.5, 1]},
      "pretrained": "out/pretrain/pretrained.bdlab"
    }

Relative paths resolve against the directory holding the config file.
Every seed is explicit; nothing defaults to the clock.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapters import AdapterSpec, ConfigurationError
from .trainer import PriorPreservation, TrainConfig

SECTIONS = ("name", "data", "model", "schedule", "pretrain", "finetune", "adapter", "prior", "metrics", "probe", "pretrained")


def _from(cls, section: str, d: dict):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{section}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"{section}: unknown fields {unknown}")
    try:
        return cls(**d)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{section}: {exc}") from None


def _check(cond: bool, section: str, message: str) -> None:
    if not cond:
        raise ConfigurationError(f"{section}: {message}")


@dataclass
class DataSpec:
    kind: str = "ring"
    few_shot: list[int] = field(default_factory=lambda: [0])
    pool_seed: int = 0
    side: int = 8
    label: int | None = None

    def __post_init__(self):
        _check(self.kind in ("ring", "raster"), "data.kind", f"unknown kind {self.kind!r}")
        _check(1 <= len(self.few_shot) <= 16, "data.few_shot", "needs 1..16 indices")
        _check(all(isinstance(i, int) and 0 <= i < 256 for i in self.few_shot), "data.few_shot", "indices must lie in [0, 256)")
        _check(len(set(self.few_shot)) == len(self.few_shot), "data.few_shot", "indices must be distinct")
        _check(self.side >= 2, "data.side", "must be >= 2")


@dataclass
class ModelSpec:
    hidden: int = 64
    blocks: int = 2
    time_dim: int = 32
    init_seed: int = 0

    def __post_init__(self):
        _check(self.hidden >= 1 and self.blocks >= 1, "model", "hidden and blocks must be >= 1")
        _check(self.time_dim >= 2 and self.time_dim % 2 == 0, "model.time_dim", "must be even and >= 2")


@dataclass
class ScheduleSpec:
    kind: str = "linear"
    T: int = 1000

    def __post_init__(self):
        _check(self.kind in ("linear", "scaled-linear"), "schedule.kind", f"unknown kind {self.kind!r}")
        _check(self.T >= 2, "schedule.T", "must be >= 2")


@dataclass
class PretrainSpec:
    seed: int = 0
    iterations: int = 6000
    batch_size: int = 128
    lr: float = 2e-3
    eval_every: int = 500
    patience: int | None = None

    def __post_init__(self):
        _check(self.iterations >= 1, "pretrain.iterations", "must be >= 1")
        _check(self.batch_size >= 1, "pretrain.batch_size", "must be >= 1")
        _check(self.lr > 0, "pretrain.lr", "must be > 0")
        _check(self.eval_every >= 1, "pretrain.eval_every", "must be >= 1")


@dataclass
class MetricsSpec:
    seed: int = 0
    samples: int = 200
    sampler_steps: int = 50
    sampler_seed: int = 123
    sigma1_t: int = 300
    sigma1_samples: int = 64

    def __post_init__(self):
        _check(self.samples >= 2, "metrics.samples", "must be >= 2")
        _check(self.sampler_steps >= 1, "metrics.sampler_steps", "must be >= 1")
        _check(self.sigma1_t >= 1, "metrics.sigma1_t", "must be >= 1")


@dataclass
class ProbeSpec:
    t: int = 300
    t_start: int = 1000
    ks: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    region_fraction: float = 0.25
    magnitude: float = 0.3
    draws: int = 16
    seed: int = 0

    def __post_init__(self):
        _check(self.t >= 1 and self.t_start >= 1, "probe", "t and t_start must be >= 1")
        _check(0 < self.region_fraction <= 1, "probe.region_fraction", "must lie in (0, 1]")
        _check(self.magnitude >= 0, "probe.magnitude", "must be >= 0")


@dataclass
class ExperimentConfig:
    name: str
    data: DataSpec
    model: ModelSpec
    schedule: ScheduleSpec
    pretrain: PretrainSpec
    finetune: TrainConfig
    metrics: MetricsSpec
    probe: ProbeSpec
    pretrained: Path | None = None
    pretrained_ref: str | None = None
    source: Path | None = None

    def to_dict(self) -> dict:
        """Canonical JSON-ready form; hashed into run manifests."""
        ft = self.finetune.to_dict()
        return {
            "name": self.name,
            "data": asdict(self.data),
            "model": asdict(self.model),
            "schedule": asdict(self.schedule),
            "pretrain": asdict(self.pretrain),
            "finetune": {k: v for k, v in ft.items() if k not in ("adapter", "prior")},
            "adapter": ft["adapter"],
            "prior": ft["prior"],
            "metrics": asdict(self.metrics),
            "probe": asdict(self.probe),
            "pretrained": self.pretrained_ref,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, bnn: bool | None = None, lam: float | None = None, seed: int | None = None) -> ExperimentConfig:
        cfg = copy.deepcopy(self)
        ft = cfg.finetune
        if bnn is not None:
            ft.adapter = AdapterSpec.from_dict({**ft.adapter.to_dict(), "bayesian": bool(bnn)})
        if lam is not None:
            if lam < 0:
                raise ConfigurationError(f"--lambda must be >= 0, got {lam}")
            ft.lam = float(lam)
        if seed is not None:
            ft.seed = int(seed)
            cfg.pretrain.seed = int(seed)
        return cfg


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown sections {unknown}")
    name = raw.get("name", "experiment")
    _check(isinstance(name, str) and name != "", "name", "must be a non-empty string")
    ft_raw = dict(raw.get("finetune", {}))
    _check(isinstance(ft_raw, dict), "finetune", "expected an object")
    for nested in ("adapter", "prior"):
        _check(nested not in ft_raw, "finetune", f"'{nested}' is a top-level section")
    ft_raw["adapter"] = _from(AdapterSpec, "adapter", raw.get("adapter", {}))
    ft_raw["prior"] = _from(PriorPreservation, "prior", raw.get("prior", {}))
    finetune = _from(TrainConfig, "finetune", ft_raw)

    pretrained = raw.get("pretrained")
    if pretrained is not None:
        _check(isinstance(pretrained, str), "pretrained", "must be a path string")
        pretrained = Path(pretrained)
        if base_dir is not None and not pretrained.is_absolute():
            pretrained = base_dir / pretrained
    cfg = ExperimentConfig(
        name=name,
        data=_from(DataSpec, "data", raw.get("data", {})),
        model=_from(ModelSpec, "model", raw.get("model", {})),
        schedule=_from(ScheduleSpec, "schedule", raw.get("schedule", {})),
        pretrain=_from(PretrainSpec, "pretrain", raw.get("pretrain", {})),
        finetune=finetune,
        metrics=_from(MetricsSpec, "metrics", raw.get("metrics", {})),
        probe=_from(ProbeSpec, "probe", raw.get("probe", {})),
        pretrained=pretrained,
        pretrained_ref=raw.get("pretrained"),
    )
    _check(cfg.metrics.sigma1_t <= cfg.schedule.T, "metrics.sigma1_t", "exceeds schedule T")
    _check(cfg.probe.t <= cfg.schedule.T and cfg.probe.t_start <= cfg.schedule.T, "probe", "t exceeds schedule T")
    return cfg


def load_config(path, require_pretrained: bool = False) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    cfg = from_dict(raw, base_dir=path.parent)
    cfg.source = path
    if require_pretrained:
        if cfg.pretrained is None:
            raise ConfigurationError("pretrained: required for this stage")
        if not cfg.pretrained.is_file():
            raise ConfigurationError(f"pretrained: file not found: {cfg.pretrained}")
    return cfg
