"""Relevance masks and the source/target/artifact separation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_vector, cosine_similarity_flagged, DegenerateInputWarning

# Kept-grid fractions of the relevance mask, in percent of L*L.
KEEP_SCHEDULE_PCT = (60, 65, 70, 75, 80, 85, 90, 95)
COMPRESSION_LEVELS = ("c23", "c40")


class MaskParameterError(ValueError):
    pass


@dataclass(frozen=True)
class RelevanceMask:
    bits: np.ndarray
    kept: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        if int(bits.sum()) != self.kept:
            raise ValueError("kept count does not match mask bits")


def _top_k(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -values: equal values keep index order
    order = np.argsort(-values, kind="stable")
    bits = np.zeros(values.size, dtype=bool)
    bits[order[:k]] = True
    return bits


def relevance_mask(phi_s, phi_t, k: int) -> RelevanceMask:
    """The ``k`` grids with the largest ``max(phi_s, phi_t)``; ties go to the lower index."""
    s, t = as_vector(phi_s), as_vector(phi_t)
    if s.shape != t.shape:
        raise ValueError("source and target maps differ in length")
    if not 0 < k < s.size:
        raise MaskParameterError(f"kept count {k} outside (0, {s.size})")
    return RelevanceMask(_top_k(np.maximum(s, t), k), k)


def mask_threshold(phi_s, phi_t, k: int) -> float:
    """A threshold ``tau`` reproducing the kept-count mask: the (k+1)-th largest max value."""
    m = np.sort(np.maximum(as_vector(phi_s), as_vector(phi_t)))[::-1]
    return float(m[k])


def top_fraction_mask(phi, fraction: float) -> RelevanceMask:
    v = as_vector(phi)
    k = round_half_up(fraction * v.size)
    if not 0 < k < v.size:
        raise MaskParameterError(f"fraction {fraction} keeps {k} of {v.size} grids")
    return RelevanceMask(_top_k(v, k), k)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def q_metric(phi_d, mask: RelevanceMask) -> float:
    """Mean detection attribution off the mask minus the mean on it."""
    d = as_vector(phi_d)
    bits = mask.bits if isinstance(mask, RelevanceMask) else np.asarray(mask, dtype=bool)
    if bits.shape != d.shape:
        raise ValueError("mask and attribution differ in length")
    on = int(bits.sum())
    if on == 0 or on == bits.size:
        raise MaskParameterError("Q is undefined for an empty or full mask")
    return float(d[~bits].sum() / (bits.size - on) - d[bits].sum() / on)


def kept_counts(n: int) -> list[int]:
    """Deduplicated kept counts of the schedule for ``n`` grids."""
    counts = []
    for pct in KEEP_SCHEDULE_PCT:
        k = (pct * n + 50) // 100
        if k not in counts:
            counts.append(k)
    return counts


def q_curve(phi_d, phi_s, phi_t) -> dict[int, float]:
    """Q at every kept count of the schedule, skipping degenerate counts."""
    n = as_vector(phi_d).size
    curve = {}
    for k in kept_counts(n):
        if not 0 < k < n:
            warnings.warn(f"kept count {k} degenerate for {n} grids, skipped", DegenerateInputWarning,
                          stacklevel=2)
            continue
        curve[k] = q_metric(phi_d, relevance_mask(phi_s, phi_t, k))
    return curve


def q_mean(phi_d, phi_s, phi_t) -> float:
    curve = q_curve(phi_d, phi_s, phi_t)
    if not curve:
        raise MaskParameterError("no usable kept count in the schedule")
    return float(np.mean(list(curve.values())))


@dataclass
class StabilityInput:
    phi_raw: object
    phi_by_level: dict = field(default_factory=dict)


def delta_stability(inp: StabilityInput) -> float:
    """Mean cosine similarity of each compressed map to the raw map."""
    if not inp.phi_by_level:
        raise ValueError("no compressed map supplied")
    terms = []
    for level in sorted(inp.phi_by_level):
        c, degenerate = cosine_similarity_flagged(inp.phi_by_level[level], inp.phi_raw)
        if degenerate:
            warnings.warn(f"zero-norm map at level {level}; term counted as 0", DegenerateInputWarning,
                          stacklevel=2)
        terms.append(c)
    return float(np.mean(terms))


def overlap_fraction(mask: RelevanceMask, region) -> float:
    """Share of ``region`` (grid indices) covered by the mask."""
    region = list(region)
    if not region:
        raise ValueError("empty region")
    return float(np.mean(mask.bits[region]))
