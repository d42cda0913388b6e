"""Diagnostic probes: zero input, scaled anchor input and injected region noise.

Every probe returns plain dict records (JSON-serialisable) that carry the
empirical measurement next to the Gaussian world-model prediction.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analytic import GaussianWorldModel, amplification, estimate_sigma1, scale_probe_prediction
from .diffusion import NoiseSchedule, partial_denoise, predict_x0
from .tensor import ContractError


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _num(x) -> float | None:
    x = float(x)
    return x if np.isfinite(x) else None


def fit_world_model(model, anchor, t: int, label, sched: NoiseSchedule, n_samples: int = 64, seed: int = 0, ctx=None):
    """Single-anchor world model with ``sigma1`` estimated from ``model`` at step ``t``."""
    s1 = estimate_sigma1(model, anchor, t, n_samples, label, sched, seed=seed, ctx=ctx)
    return GaussianWorldModel(np.atleast_2d(anchor), s1, sched)


def zero_probe(
    model,
    t_start: int,
    label,
    sched: NoiseSchedule,
    training,
    world: GaussianWorldModel | None = None,
    steps: int | None = None,
    ctx=None,
) -> dict:
    """Denoise ``x_t = 0`` from ``t_start`` with the deterministic reverse chain."""
    training = np.atleast_2d(np.asarray(training, dtype=np.float64))
    x = np.zeros((1, training.shape[1]))
    out = partial_denoise(model, x, t_start, label, sched, steps=steps, ctx=ctx)[0]
    d_train = np.linalg.norm(training - out, axis=1)
    rec = {
        "probe": "zero",
        "t": int(t_start),
        "output": out.tolist(),
        "dist_to_zero": float(np.linalg.norm(out)),
        "dist_to_anchor": float(d_train.min()),
        "anchor_index": int(d_train.argmin()),
        "analytic": None,
        "analytic_gap": None,
    }
    if world is not None:
        pred = scale_probe_prediction(world, 0.0, t_start)
        rec["analytic"] = pred.tolist()
        rec["analytic_gap"] = float(np.linalg.norm(out - pred))
        rec["sigma1"] = _num(world.sigma1)
    return rec


def scale_probe(
    model,
    ks,
    t: int,
    anchor,
    label,
    sched: NoiseSchedule,
    world: GaussianWorldModel | None = None,
    ctx=None,
) -> list[dict]:
    """One-step ``x0`` prediction for each input ``x_t = k * anchor``."""
    anchor = np.asarray(anchor, dtype=np.float64).ravel()
    ks = [float(k) for k in ks]
    x_t = np.stack([k * anchor for k in ks])
    x0 = predict_x0(model, x_t, t, label, sched, ctx)
    ab = float(sched.alpha_bar[t])
    records = []
    for k, out in zip(ks, x0):
        rec = {
            "probe": "scale",
            "t": int(t),
            "k": k,
            "cosine": _cos(out, anchor),
            "output_scale": float(out @ anchor / (anchor @ anchor)),
            "analytic_scale": None,
        }
        if world is not None:
            amp = amplification(world.sigma1, t, sched)
            rec["analytic_scale"] = _num(1.0 + amp * (k - np.sqrt(ab)))
            rec["sigma1"] = _num(world.sigma1)
        records.append(rec)
    return records


def region_mask(side: int, fraction: float) -> np.ndarray:
    """Centred square patch covering about ``fraction`` of a ``side x side`` raster."""
    if not 0 < fraction <= 1:
        raise ContractError(f"region fraction must lie in (0, 1], got {fraction}")
    w = int(np.clip(round(np.sqrt(fraction) * side), 1, side))
    lo = (side - w) // 2
    mask = np.zeros((side, side), dtype=bool)
    mask[lo : lo + w, lo : lo + w] = True
    return mask.ravel()


def delta_injection_probe(
    model,
    anchor,
    t: int,
    delta_region_fraction: float,
    delta_magnitude: float,
    label,
    sched: NoiseSchedule,
    n_draws: int = 16,
    seed: int = 0,
    world: GaussianWorldModel | None = None,
    ctx=None,
) -> dict:
    """Response of the one-step ``x0`` prediction to noise ``delta`` added inside a patch.

    ``ratio`` is ``||(x0(delta) - x0(0))_region||^2 / ||delta||^2`` averaged over
    ``n_draws`` shared noise draws; the world model predicts ``k^2``.
    """
    anchor = np.asarray(anchor, dtype=np.float64).ravel()
    side = int(round(np.sqrt(anchor.size)))
    if side * side != anchor.size:
        raise ContractError("delta injection needs square raster anchors")
    if t < 1:
        raise ContractError("delta injection needs t >= 1")
    mask = region_mask(side, delta_region_fraction)
    ab = float(sched.alpha_bar[t])
    rng = np.random.default_rng([seed, 0xD17A, t])
    eps = rng.standard_normal((n_draws, anchor.size))
    delta = delta_magnitude * rng.standard_normal((n_draws, anchor.size)) * mask
    base_in = np.sqrt(ab) * anchor + np.sqrt(1.0 - ab) * eps
    x0_base = predict_x0(model, base_in, t, label, sched, ctx)
    x0_delta = predict_x0(model, base_in + delta, t, label, sched, ctx)
    region_base = float(np.mean(np.sum(((x0_base - anchor) * mask) ** 2, axis=1)))
    region_delta = float(np.mean(np.sum(((x0_delta - anchor) * mask) ** 2, axis=1)))
    energy = float(np.mean(np.sum(delta**2, axis=1)))
    response = float(np.mean(np.sum(((x0_delta - x0_base) * mask) ** 2, axis=1)))
    rec = {
        "probe": "delta",
        "t": int(t),
        "region_fraction": float(delta_region_fraction),
        "magnitude": float(delta_magnitude),
        "ratio": response / energy if energy > 0 else 0.0,
        "region_residual": region_delta,
        "baseline_residual": region_base,
        "analytic_k2": None,
    }
    if world is not None:
        rec["analytic_k2"] = _num(amplification(world.sigma1, t, sched) ** 2)
        rec["sigma1"] = _num(world.sigma1)
    return rec


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
