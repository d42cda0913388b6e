"""Fine-tuning parameterizations (full, LoRA, OFT) and Bayesian placement.

A layer keeps its weights in *holders*: a plain trainable ``Tensor``, a frozen
numpy array, or a ``VariationalParameter``.  ``WeightContext`` decides whether
variational holders are sampled (training) or replaced by their mean
(inference).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor
from .variational import VariationalParameter, init_variational, mean_mode, sample_param

VARIANTS = ("full", "lora", "oft")
PLACEMENTS = (
    "all-linear",
    "linear-no-conditioning",
    "up-block-only",
    "conditioning-only",
    "norm-only",
)


class ConfigurationError(ValueError):
    pass


@dataclass
class AdapterSpec:
    variant: str = "full"
    bayesian: bool = False
    placement: str = "linear-no-conditioning"
    rank: int = 4
    block_size: int | None = None
    sigma_init: float = 0.01
    prior_sigma: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown adapter variant {self.variant!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"unknown placement {self.placement!r}")
        if self.variant == "lora" and self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.block_size is not None and self.block_size < 1:
            raise ConfigurationError(f"OFT block size must be >= 1, got {self.block_size}")
        if self.bayesian and not (self.sigma_init > 0 and self.prior_sigma > 0):
            raise ConfigurationError("sigma_init and prior_sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AdapterSpec:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown adapter fields: {sorted(unknown)}")
        if "variants" in d:
            raise ConfigurationError("adapters cannot be composed on one layer")
        return cls(**known)


@dataclass
class WeightContext:
    """How variational holders are resolved for one forward pass.

    ``mode='sample'`` draws one posterior sample per holder from a stream keyed
    by ``(seed, holder slot, step)``; ``mode='mean'`` substitutes ``mu``.
    """

    mode: str = "mean"
    seed: int = 0
    step: int = 0
    draws: dict = field(default_factory=dict)

    def rng_for(self, slot: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, slot, self.step])


def resolve(holder, ctx: WeightContext, slot: int = 0) -> Tensor:
    if isinstance(holder, VariationalParameter):
        if ctx.mode == "sample":
            draw = sample_param(holder, ctx.rng_for(slot))
            ctx.draws[slot] = draw.eps_used
            return draw.theta
        return mean_mode(holder)
    if isinstance(holder, Tensor):
        return holder
    return Tensor(holder)


def holder_array(holder) -> np.ndarray:
    if isinstance(holder, VariationalParameter):
        return holder.mu.data
    if isinstance(holder, Tensor):
        return holder.data
    return np.asarray(holder)


# ---------------------------------------------------------------- Cayley / effective weights


def cayley(q) -> Tensor:
    """Orthogonal ``(I + S)(I - S)^-1`` with ``S = (Q - Q^T)/2``."""
    q = tn.as_tensor(q)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise DimensionError(f"Cayley map needs a square matrix, got {q.shape}")
    s = 0.5 * (q - tn.transpose(q))
    eye = tn.eye(q.shape[0])
    return tn.matmul(eye + s, tn.mat_inverse(eye - s))


class Layer:
    """Base class: named holders plus slot numbers for variational streams."""

    kind = "linear"

    def __init__(self, name: str, conditioning: bool = False, up: bool = False):
        self.name = name
        self.conditioning = conditioning
        self.up = up
        self.adapter = "full"
        self.slots: dict[str, int] = {}

    def holders(self) -> dict[str, object]:
        raise NotImplementedError

    def set_holder(self, key: str, value) -> None:
        raise NotImplementedError

    def trainable(self) -> dict[str, object]:
        return {k: h for k, h in self.holders().items() if not isinstance(h, np.ndarray)}

    def stochastic_eligible(self) -> list[str]:
        return list(self.trainable())

    def parameters(self) -> list[Tensor]:
        out = []
        for h in self.trainable().values():
            out.extend(h.parameters() if isinstance(h, VariationalParameter) else [h])
        return out

    def variational(self) -> dict[str, VariationalParameter]:
        return {k: h for k, h in self.holders().items() if isinstance(h, VariationalParameter)}

    def _get(self, key: str, ctx: WeightContext) -> Tensor:
        return resolve(self.holders()[key], ctx, self.slots.get(key, 0))


class Linear(Layer):
    """``y = x W^T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, name, weight, bias, **tags):
        super().__init__(name, **tags)
        self.weight = weight
        self.bias = bias

    @property
    def shape(self) -> tuple[int, int]:
        return holder_array(self.weight).shape

    def holders(self):
        return {"weight": self.weight, "bias": self.bias}

    def set_holder(self, key, value):
        setattr(self, key, value)

    def effective_weight(self, ctx: WeightContext) -> Tensor:
        return self._get("weight", ctx)

    def materialize(self, ctx: WeightContext) -> tuple[Tensor, Tensor]:
        return self.effective_weight(ctx), self._get("bias", ctx)


class LoRALinear(Linear):
    """``W = W0 + B A`` with frozen ``W0``; B is (out, r), A is (r, in)."""

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator):
        d, k = base.shape
        if not 1 <= rank <= min(d, k):
            raise ConfigurationError(f"LoRA rank {rank} invalid for a {d}x{k} weight")
        super().__init__(
            base.name,
            np.array(holder_array(base.weight)),
            np.array(holder_array(base.bias)),
            conditioning=base.conditioning,
            up=base.up,
        )
        self.adapter = "lora"
        self.B = Tensor(np.zeros((d, rank)), requires_grad=True)
        self.A = Tensor(0.01 * rng.standard_normal((rank, k)), requires_grad=True)

    @property
    def shape(self):
        return self.weight.shape

    def holders(self):
        return {"weight": self.weight, "bias": self.bias, "B": self.B, "A": self.A}

    def stochastic_eligible(self):
        return ["A"]

    def effective_weight(self, ctx):
        return lora_effective_weight(self, ctx)


class OFTLinear(Linear):
    """``W = R W0`` with ``R`` block-diagonal Cayley images of trainable ``Q`` blocks."""

    def __init__(self, base: Linear, block_size: int | None):
        d, _ = base.shape
        block = d if block_size is None else block_size
        if d % block:
            raise ConfigurationError(f"OFT block size {block} does not divide width {d}")
        super().__init__(
            base.name,
            np.array(holder_array(base.weight)),
            np.array(holder_array(base.bias)),
            conditioning=base.conditioning,
            up=base.up,
        )
        self.adapter = "oft"
        self.block_size = block
        self.Q = [Tensor(np.zeros((block, block)), requires_grad=True) for _ in range(d // block)]

    @property
    def shape(self):
        return self.weight.shape

    def holders(self):
        out = {"weight": self.weight, "bias": self.bias}
        out.update({f"Q{i}": q for i, q in enumerate(self.Q)})
        return out

    def set_holder(self, key, value):
        if key.startswith("Q"):
            self.Q[int(key[1:])] = value
        else:
            setattr(self, key, value)

    def stochastic_eligible(self):
        return [f"Q{i}" for i in range(len(self.Q))]

    def rotation(self, ctx) -> Tensor:
        blocks = [cayley(self._get(f"Q{i}", ctx)) for i in range(len(self.Q))]
        return blocks[0] if len(blocks) == 1 else tn.block_diag(blocks)

    def effective_weight(self, ctx):
        return oft_effective_weight(self, ctx)


class Embedding(Layer):
    kind = "embedding"

    def __init__(self, name, table, **tags):
        super().__init__(name, **tags)
        self.table = table

    def holders(self):
        return {"table": self.table}

    def set_holder(self, key, value):
        self.table = value

    def materialize(self, ctx):
        return (self._get("table", ctx),)


class LayerNorm(Layer):
    kind = "norm"
    eps = 1e-5

    def __init__(self, name, gain, bias, **tags):
        super().__init__(name, **tags)
        self.gain = gain
        self.bias = bias

    def holders(self):
        return {"gain": self.gain, "bias": self.bias}

    def set_holder(self, key, value):
        setattr(self, key, value)

    def materialize(self, ctx):
        return self._get("gain", ctx), self._get("bias", ctx)


def lora_effective_weight(layer: LoRALinear, ctx: WeightContext) -> Tensor:
    """``W0 + B A``; A is sampled or replaced by its mean per ``ctx``."""
    a = layer._get("A", ctx)
    b = layer._get("B", ctx)
    if b.shape[1] != a.shape[0] or (b.shape[0], a.shape[1]) != layer.weight.shape:
        raise DimensionError(f"LoRA factors {b.shape} x {a.shape} do not match W0 {layer.weight.shape}")
    return tn.add(Tensor(layer.weight), tn.matmul(b, a))


def oft_effective_weight(layer: OFTLinear, ctx: WeightContext) -> Tensor:
    """``cayley(Q) W0``; orthogonal for every sample of Q, not just the mean."""
    return tn.matmul(layer.rotation(ctx), Tensor(layer.weight))


# ---------------------------------------------------------------- placement


def matches_placement(layer: Layer, placement: str) -> bool:
    if placement == "norm-only":
        return layer.kind == "norm"
    if layer.kind == "norm":
        return False
    if placement == "conditioning-only":
        return layer.conditioning
    if layer.kind == "embedding":
        return False
    if placement == "all-linear":
        return True
    if placement == "linear-no-conditioning":
        return not layer.conditioning
    if placement == "up-block-only":
        return layer.up and not layer.conditioning
    raise ConfigurationError(f"unknown placement {placement!r}")


@dataclass
class PlacementReport:
    wrapped: list[str]
    stochastic_params: int
    trainable_params: int

    @property
    def stochastic_fraction(self) -> float:
        return self.stochastic_params / self.trainable_params if self.trainable_params else 0.0


def apply_placement(model, spec: AdapterSpec, seed: int = 0):
    """Copy ``model`` and convert it for fine-tuning under ``spec``.

    Full: every weight stays trainable.  LoRA/OFT: every linear layer gets an
    adapter (rank / block size capped at the layer size) and everything else
    is frozen.  When ``spec.bayesian`` is set, the
    adapter parameters of layers matching ``spec.placement`` become variational
    with the current values as prior mean.  Returns ``(model, report)``.
    """
    model = copy.deepcopy(model)
    rng = np.random.default_rng([seed, 0x10FA])
    for name, layer in list(model.layers.items()):
        if spec.variant == "full":
            continue
        if isinstance(layer, Linear):
            # rank and block size are capped at the layer's own size (tiny heads)
            d, k = layer.shape
            if spec.variant == "lora":
                model.layers[name] = LoRALinear(layer, min(spec.rank, d, k), rng)
            else:
                block = None if spec.block_size is None else min(spec.block_size, d)
                model.layers[name] = OFTLinear(layer, block)
        else:
            for key, h in layer.holders().items():
                layer.set_holder(key, np.array(holder_array(h)))

    wrapped: list[str] = []
    stochastic = 0
    if spec.bayesian:
        for name, layer in model.layers.items():
            if not matches_placement(layer, spec.placement):
                continue
            keys = [k for k in layer.stochastic_eligible() if k in layer.trainable()]
            if not keys:
                continue
            for key in keys:
                h = layer.holders()[key]
                vp = init_variational(holder_array(h), spec.sigma_init, spec.prior_sigma)
                layer.set_holder(key, vp)
                stochastic += vp.size
            wrapped.append(name)
        if not wrapped:
            raise ConfigurationError(
                f"placement {spec.placement!r} matches no trainable {spec.variant} parameters"
            )
    model.assign_slots()
    model.adapter_spec = spec
    trainable = sum(
        holder_array(h).size for layer in model.layers.values() for h in layer.trainable().values()
    )
    return model, PlacementReport(wrapped, stochastic, trainable)
