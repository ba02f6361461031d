"""Small numeric kernels shared across the package."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateInputWarning(UserWarning):
    """A zero-norm vector reached an operation that needs a direction."""


class DegenerateInputError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


def as_vector(v) -> np.ndarray:
    arr = np.asarray(getattr(v, "phi", v), dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite entries")
    return arr


def cosine_similarity_flagged(a, b) -> tuple[float, bool]:
    """Return ``(cos, degenerate)``; ``cos`` is 0 when either norm is 0."""
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("empty vectors")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c)), False


def cosine_similarity(a, b) -> float:
    c, degenerate = cosine_similarity_flagged(a, b)
    if degenerate:
        warnings.warn("cosine similarity of a zero-norm vector, returning 0",
                      DegenerateInputWarning, stacklevel=2)
    return c


def normalize_unit(v) -> np.ndarray:
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateInputError("cannot normalise a zero vector")
    return v / n


def rank_auc(pos, neg) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    pos, neg = as_vector(pos), as_vector(neg)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one sample of each class")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (pos.size * neg.size))


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Streams are Philox (counter-based) generators seeded through
    ``SeedSequence(seed, spawn_key=(stream_id, *sub))``, so any sub-stream can
    be rebuilt on any worker without coordinating state.
    """

    seed: int
    stream_id: int = 0

    def generator(self, *sub: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *sub))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, stream_id)
