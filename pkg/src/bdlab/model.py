"""Conditional noise-prediction MLP built from adapter-aware layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .adapters import (
    AdapterSpec,
    Embedding,
    Layer,
    LayerNorm,
    Linear,
    WeightContext,
)
from .tensor import Tensor
from .variational import VariationalParameter


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 2
    hidden: int = 128
    blocks: int = 3
    n_labels: int = 9
    time_dim: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


def time_embedding(t, dim: int) -> np.ndarray:
    """Fixed sinusoidal embedding of integer steps, shape (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _linear(name, rng, n_in, n_out, scale=1.0, **tags):
    w = rng.standard_normal((n_out, n_in)) * (scale / np.sqrt(n_in))
    return Linear(
        name,
        Tensor(w, requires_grad=True),
        Tensor(np.zeros(n_out), requires_grad=True),
        **tags,
    )


def _norm(name, width, **tags):
    return LayerNorm(
        name,
        Tensor(np.ones(width), requires_grad=True),
        Tensor(np.zeros(width), requires_grad=True),
        **tags,
    )


class DenoiserModel:
    """eps-prediction network ``eps(x_t, t, label)``.

    Label embeddings are added to a projected sinusoidal time embedding; each
    residual block adds a projection of that conditioning vector before its
    norm.  Blocks in the second half, plus the output head, form the "up"
    part of the network.
    """

    def __init__(self, config: ModelConfig, layers: dict[str, Layer]):
        self.config = config
        self.layers = layers
        self.adapter_spec: AdapterSpec | None = None
        self.assign_slots()

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> DenoiserModel:
        rng = np.random.default_rng([seed, 0xD1FF])
        h = config.hidden
        up_from = config.blocks // 2
        layers: dict[str, Layer] = {
            "in_proj": _linear("in_proj", rng, config.dim, h),
            "time_proj": _linear("time_proj", rng, config.time_dim, h),
            "cond_emb": Embedding(
                "cond_emb",
                Tensor(0.5 * rng.standard_normal((config.n_labels, h)), requires_grad=True),
                conditioning=True,
            ),
        }
        for i in range(config.blocks):
            up = i >= up_from
            layers[f"cond_proj{i}"] = _linear(f"cond_proj{i}", rng, h, h, conditioning=True, up=up)
            layers[f"norm{i}"] = _norm(f"norm{i}", h, up=up)
            layers[f"hidden{i}"] = _linear(f"hidden{i}", rng, h, h, scale=0.5, up=up)
        layers["out_norm"] = _norm("out_norm", h, up=True)
        layers["out_proj"] = _linear("out_proj", rng, h, config.dim, scale=0.1, up=True)
        return cls(config, layers)

    # ------------------------------------------------------------ bookkeeping

    def assign_slots(self) -> None:
        slot = 0
        for layer in self.layers.values():
            layer.slots = {}
            for key in layer.holders():
                layer.slots[key] = slot
                slot += 1

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def variational(self) -> list[tuple[str, VariationalParameter]]:
        return [
            (f"{name}.{key}", vp)
            for name, layer in self.layers.items()
            for key, vp in layer.variational().items()
        ]

    @property
    def is_bayesian(self) -> bool:
        return bool(self.variational())

    def kl(self) -> Tensor:
        from .variational import kl_to_prior

        terms = [kl_to_prior(vp) for _, vp in self.variational()]
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    # ------------------------------------------------------------ forward

    def materialize(self, ctx: WeightContext) -> dict[str, tuple[Tensor, ...]]:
        """Resolve every layer's weights once (one posterior sample per step)."""
        return {name: layer.materialize(ctx) for name, layer in self.layers.items()}

    def forward(self, x, t, labels, weights: dict[str, tuple[Tensor, ...]]) -> Tensor:
        x = tn.as_tensor(x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))

        def lin(name, inp):
            w, b = weights[name]
            return tn.matmul(inp, tn.transpose(w)) + b

        def norm(name, inp):
            gain, bias = weights[name]
            centered = inp - tn.mean(inp, axis=1, keepdims=True)
            var = tn.mean(tn.square(centered), axis=1, keepdims=True)
            return centered / tn.sqrt(var + LayerNorm.eps) * gain + bias

        (table,) = weights["cond_emb"]
        temb = Tensor(time_embedding(t, self.config.time_dim))
        cond = tn.silu(lin("time_proj", temb) + tn.take_rows(table, labels))
        h = lin("in_proj", x)
        for i in range(self.config.blocks):
            u = norm(f"norm{i}", h + lin(f"cond_proj{i}", cond))
            h = h + lin(f"hidden{i}", tn.silu(u))
        return lin("out_proj", tn.silu(norm("out_norm", h)))

    def __call__(self, x, t, labels, ctx: WeightContext | None = None) -> Tensor:
        ctx = ctx or WeightContext("mean")
        return self.forward(x, t, labels, self.materialize(ctx))

    def predictor(self, ctx: WeightContext | None = None):
        """Frozen numpy eps-predictor ``f(x, t, labels) -> ndarray``.

        Weights are resolved once; the returned callable is side-effect free.
        """
        ctx = ctx or WeightContext("mean")
        with tn.no_grad():
            weights = self.materialize(ctx)

        def predict(x, t, labels):
            with tn.no_grad():
                return self.forward(np.asarray(x, dtype=np.float64), t, labels, weights).data

        return predict

    # ------------------------------------------------------------ state

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Flat ``(name, array)`` list in manifest order."""
        out = []
        for lname, layer in self.layers.items():
            for key, h in layer.holders().items():
                base = f"{lname}.{key}"
                if isinstance(h, VariationalParameter):
                    out.append((base + ".mu", h.mu.data))
                    out.append((base + ".rho", h.rho.data))
                    out.append((base + ".prior_mean", h.prior_mean))
                    out.append((base + ".prior_sigma", np.array([h.prior_sigma])))
                elif isinstance(h, Tensor):
                    out.append((base, h.data))
                else:
                    out.append((base + ".frozen", np.asarray(h)))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        """Load values saved by ``snapshot`` into a model of the same structure."""
        for lname, layer in self.layers.items():
            for key, h in layer.holders().items():
                base = f"{lname}.{key}"
                if isinstance(h, VariationalParameter):
                    h.mu.data = snap[base + ".mu"].copy()
                    h.rho.data = snap[base + ".rho"].copy()
                    h.prior_mean = snap[base + ".prior_mean"].copy()
                    h.prior_mean.flags.writeable = False
                    h.prior_sigma = float(snap[base + ".prior_sigma"][0])
                elif isinstance(h, Tensor):
                    h.data = snap[base].copy()
                else:
                    layer.set_holder(key, snap[base + ".frozen"].copy())

    def count_parameters(self) -> int:
        return sum(arr.size for name, arr in self.state() if not name.endswith((".rho", ".prior_mean", ".prior_sigma", ".frozen")))
