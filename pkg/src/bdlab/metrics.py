"""Desk-scale image metrics and the corruption-curve detector."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve
from scipy.spatial.distance import pdist

from .tensor import ContractError, DimensionError

EMBED_DIM = 32
CSV_COLUMNS = ("iteration", "fidelity", "diversity", "quality", "sigma1", "l_dm", "l_r")


@dataclass
class MetricsRow:
    iteration: int
    fidelity: float
    diversity: float
    quality: float
    sigma1: float = float("nan")
    l_dm: float = float("nan")
    l_r: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorruptionReport:
    detected: bool
    peak_iteration: int | None = None
    trough_iteration: int | None = None
    recovery_iteration: int | None = None
    dip_depth: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def projection(dim: int, seed: int) -> np.ndarray:
    """Fixed Gaussian map from ``dim`` to ``EMBED_DIM`` features."""
    rng = np.random.default_rng([seed, 0xE3B])
    return rng.standard_normal((dim, EMBED_DIM)) / np.sqrt(EMBED_DIM)


def _unit(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(norm == 0, 1.0, norm)


def fidelity(generated, training, seed: int = 0) -> float:
    """Mean over generated samples of the best cosine similarity to a training sample,
    measured after a fixed random projection."""
    g = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    r = np.atleast_2d(np.asarray(training, dtype=np.float64))
    if g.size == 0 or r.size == 0:
        raise ContractError("fidelity needs non-empty sets")
    if g.shape[1] != r.shape[1]:
        raise DimensionError(f"dimension mismatch: {g.shape[1]} vs {r.shape[1]}")
    p = projection(g.shape[1], seed)
    cos = _unit(g @ p) @ _unit(r @ p).T
    return float(cos.max(axis=1).mean())


def diversity(generated) -> float:
    """Mean pairwise Euclidean distance."""
    g = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if len(g) < 2:
        raise ContractError("diversity needs at least two samples")
    return float(pdist(g).mean())


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def high_frequency_energy(samples, side: int) -> float:
    imgs = np.asarray(samples, dtype=np.float64).reshape(-1, side, side)
    hp = np.stack([convolve(img, _LAPLACIAN, mode="reflect") for img in imgs])
    return float(np.mean(hp**2))


def quality(generated, reference, side: int | None = None) -> float:
    """``clamp(reference HF energy / generated HF energy, 0, 1)``.

    ``side`` is the raster edge length; point data (``side=None``) scores 1.
    """
    if side is None:
        return 1.0
    gen = high_frequency_energy(generated, side)
    ref = high_frequency_energy(reference, side)
    if gen == 0:
        return 1.0
    return float(np.clip(ref / gen, 0.0, 1.0))


def smooth3(values) -> np.ndarray:
    """Centred 3-point moving average; the two ends average over what exists."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(i - 1, 0) : i + 2].mean()
    return out


def best_dip(series, threshold: float = 0.05):
    """Best ``(p, q, r)`` index triple with ``f[p]-f[q] >= threshold`` and
    ``f[r]-f[q] >= threshold/2``; maximises the dip depth ``f[p]-f[q]``.

    O(n) scan: for each trough ``q`` pair the best earlier peak with the best
    later recovery.  Ties resolve to the earliest indices.
    """
    f = np.asarray(series, dtype=np.float64)
    n = len(f)
    best = None
    for q in range(1, n - 1):
        p = int(np.argmax(f[:q]))
        r = q + 1 + int(np.argmax(f[q + 1 :]))
        depth = f[p] - f[q]
        if depth >= threshold and f[r] - f[q] >= 0.5 * threshold:
            if best is None or depth > best[3] + 1e-15:
                best = (p, q, r, depth)
    return best


def detect_corruption(rows, threshold: float = 0.05, smooth: bool = True) -> CorruptionReport:
    rows = list(rows)
    if len(rows) < 5:
        raise ContractError(f"corruption detection needs >= 5 rows, got {len(rows)}")
    its = [int(r.iteration) for r in rows]
    f = [float(r.fidelity) for r in rows]
    f = smooth3(f) if smooth else np.asarray(f)
    found = best_dip(f, threshold)
    if found is None:
        return CorruptionReport(False)
    p, q, r, depth = found
    return CorruptionReport(True, its[p], its[q], its[r], float(depth))


class SchemaError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else ("inf" if math.isinf(v) else repr(v))


def write_metrics_csv(path, rows) -> Path:
    """UTF-8 CSV with a header row; floats use ``repr`` so values round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = r.to_dict() if hasattr(r, "to_dict") else dict(r)
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
    return path


def read_metrics_csv(path) -> list[MetricsRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise SchemaError(f"{path}: header {header} does not match {list(CSV_COLUMNS)}")
        rows = []
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_COLUMNS):
                raise SchemaError(f"{path}:{n}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            try:
                rows.append(MetricsRow(int(rec[0]), *(float(v) for v in rec[1:])))
            except ValueError as exc:
                raise SchemaError(f"{path}:{n}: {exc}") from None
    return rows
