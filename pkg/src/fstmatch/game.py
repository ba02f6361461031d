"""Coalition games over image grids.

A grid game turns an image and a black-box scorer into a characteristic
function ``v(S)``: players are the L*L grid cells (row-major), and the cells
outside ``S`` have their feature content replaced by zero before scoring.

Scorers are *batched*: they receive an array of masked images shaped
``(B, *image.shape)`` and return ``B`` scores.  Wrap a one-image function
with :func:`per_image` to get that signature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

BatchScorer = Callable[[np.ndarray], np.ndarray]

# Masked images handed to a scorer per call; bounds memory for big games.
EVAL_CHUNK = 4096


class PartitionError(ValueError):
    pass


class EvaluationError(RuntimeError):
    def __init__(self, message: str, mask: np.ndarray | None = None):
        super().__init__(message)
        self.mask = mask


def per_image(fn: Callable[[np.ndarray], float], concurrent_safe: bool = True) -> BatchScorer:
    def batched(images: np.ndarray) -> np.ndarray:
        return np.array([float(fn(img)) for img in images], dtype=np.float64)

    batched.concurrent_safe = concurrent_safe
    return batched


@dataclass(frozen=True)
class GridPartition:
    side_length: int

    def __post_init__(self):
        if self.side_length < 2:
            raise PartitionError(f"grid side must be >= 2, got {self.side_length}")

    @property
    def player_count(self) -> int:
        return self.side_length * self.side_length

    def index(self, row: int, col: int) -> int:
        return row * self.side_length + col


def coerce_masks(masks, n: int) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[1] != n:
        raise ValueError(f"mask length {m.shape[-1]} does not match {n} players")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
        m = m.astype(bool)
    return m


class _GameBase:
    n_players: int
    baseline_score: float

    def evaluate_many(self, masks) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, mask) -> float:
        return float(self.evaluate_many(mask)[0])

    @property
    def grand_score(self) -> float:
        return self.evaluate(np.ones(self.n_players, dtype=bool))


def _split_grids(image: np.ndarray, L: int) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Return ``(grids[n, D], to_layout)`` for an (H, W[, C]) pixel array."""
    if image.ndim not in (2, 3):
        raise PartitionError(f"expected an (H, W) or (H, W, C) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % L or w % L:
        raise PartitionError(f"image of size {h}x{w} does not split into {L}x{L} grids")
    bh, bw = h // L, w // L
    img = image if image.ndim == 3 else image[:, :, None]
    c = img.shape[2]
    grids = img.reshape(L, bh, L, bw, c).transpose(0, 2, 1, 3, 4).reshape(L * L, bh * bw * c)
    shape = image.shape

    def to_layout(batch: np.ndarray) -> np.ndarray:
        b = batch.shape[0]
        out = batch.reshape(b, L, L, bh, bw, c).transpose(0, 1, 3, 2, 4, 5)
        return out.reshape((b,) + shape)

    return grids, to_layout


@dataclass(frozen=True, eq=False)
class CoalitionGame(_GameBase):
    partition: GridPartition
    scorer: BatchScorer
    grids: np.ndarray
    to_layout: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    baseline_score: float = math.nan

    @property
    def n_players(self) -> int:
        return self.partition.player_count

    @property
    def concurrent_safe(self) -> bool:
        return bool(getattr(self.scorer, "concurrent_safe", False))

    def masked_images(self, masks: np.ndarray) -> np.ndarray:
        return self.to_layout(self.grids[None, :, :] * masks[:, :, None])

    def evaluate_many(self, masks) -> np.ndarray:
        masks = coerce_masks(masks, self.n_players)
        out = np.empty(masks.shape[0], dtype=np.float64)
        for lo in range(0, masks.shape[0], EVAL_CHUNK):
            chunk = masks[lo:lo + EVAL_CHUNK]
            try:
                scores = np.asarray(self.scorer(self.masked_images(chunk)), dtype=np.float64).ravel()
            except EvaluationError:
                raise
            except Exception as exc:
                raise EvaluationError(f"scorer failed: {exc}", chunk[0].astype(np.uint8)) from exc
            if scores.shape[0] != chunk.shape[0]:
                raise EvaluationError(
                    f"scorer returned {scores.shape[0]} scores for {chunk.shape[0]} images",
                    chunk[0].astype(np.uint8))
            out[lo:lo + chunk.shape[0]] = scores
        return out


def make_grid_game(image: Any, scorer: BatchScorer, L: int) -> CoalitionGame:
    """Build the zero-baseline grid game of ``image`` under ``scorer``.

    ``image`` is either a pixel array (H, W) / (H, W, C) split into L x L
    blocks, or an object with a ``grids`` attribute of shape (L*L, D), which is
    used as-is (the scorer then receives (B, L*L, D) batches).
    """
    partition = GridPartition(L)
    if hasattr(image, "grids"):
        grids = np.asarray(image.grids, dtype=np.float64)
        if grids.ndim != 2 or grids.shape[0] != partition.player_count:
            raise PartitionError(f"sample has {grids.shape[0]} grids, expected {partition.player_count}")

        def to_layout(batch):
            return batch
    else:
        grids, to_layout = _split_grids(np.asarray(image, dtype=np.float64), L)
    grids = np.array(grids, dtype=np.float64)
    grids.setflags(write=False)
    game = CoalitionGame(partition, scorer, grids, to_layout)
    baseline = game.evaluate(np.zeros(partition.player_count, dtype=bool))
    object.__setattr__(game, "baseline_score", baseline)
    return game


def evaluate_coalition(game: _GameBase, mask) -> float:
    return game.evaluate(mask)


class TabularGame(_GameBase):
    """A game given by its full value table, indexed by the coalition bitmask
    (bit ``i`` set = player ``i`` present)."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        n = int(round(math.log2(values.size)))
        if 2 ** n != values.size:
            raise ValueError("value table length must be a power of two")
        self.n_players = n
        self.values = values
        self.baseline_score = float(values[0])
        self._weights = 1 << np.arange(n, dtype=np.int64)

    @classmethod
    def from_function(cls, n: int, fn: Callable[[frozenset], float]) -> "TabularGame":
        table = [fn(frozenset(i for i in range(n) if (m >> i) & 1)) for m in range(2 ** n)]
        return cls(table)

    def evaluate_many(self, masks) -> np.ndarray:
        masks = coerce_masks(masks, self.n_players)
        return self.values[masks.astype(np.int64) @ self._weights]

    def __add__(self, other: "TabularGame") -> "TabularGame":
        return TabularGame(self.values + other.values)

    def scaled(self, c: float, shift: float = 0.0) -> "TabularGame":
        return TabularGame(c * self.values + shift)


def all_masks(n: int) -> np.ndarray:
    """Every coalition of ``n`` players, row ``m`` being bitmask ``m``."""
    codes = np.arange(2 ** n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
