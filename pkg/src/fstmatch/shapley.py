"""Exact and permutation-sampled Shapley values for coalition games.

Any object with ``n_players``, ``baseline_score`` and
``evaluate_many(masks) -> scores`` is a game here (grid games and
``TabularGame`` both qualify).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .game import EVAL_CHUNK, TabularGame, all_masks
from .numerics import DegenerateInputWarning, SeededRng

MAX_EXACT_PLAYERS = 16
DEFAULT_SAMPLES = 100


class CapacityError(ValueError):
    pass


@dataclass
class AttributionMap:
    phi: np.ndarray
    method: str  # "exact" | "sampled"
    samples: int | None = None
    seed: int | None = None
    stream: int | None = None
    baseline_score: float = math.nan
    grand_score: float = math.nan

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("attribution contains non-finite values")

    @property
    def side(self) -> int | None:
        s = math.isqrt(self.phi.size)
        return s if s * s == self.phi.size else None

    @property
    def efficiency_residual(self) -> float:
        return float(self.phi.sum() - (self.grand_score - self.baseline_score))

    def as_grid(self) -> np.ndarray:
        if self.side is None:
            raise ValueError(f"{self.phi.size} players do not form a square grid")
        return self.phi.reshape(self.side, self.side)


def _subset_weights(n: int) -> np.ndarray:
    # |S|! (n-1-|S|)! / n!
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def exact_shapley(game) -> AttributionMap:
    n = game.n_players
    if n > MAX_EXACT_PLAYERS:
        raise CapacityError(f"exact Shapley capped at {MAX_EXACT_PLAYERS} players, game has {n}")
    if isinstance(game, TabularGame):
        values = game.values
    else:
        values = game.evaluate_many(all_masks(n))
    codes = np.arange(2 ** n, dtype=np.int64)
    sizes = np.array([bin(c).count("1") for c in range(2 ** n)])
    weights = _subset_weights(n)
    phi = np.empty(n)
    for i in range(n):
        without = codes[(codes >> i) & 1 == 0]
        marginal = values[without | (1 << i)] - values[without]
        phi[i] = np.dot(weights[sizes[without]], marginal)
    return AttributionMap(phi, "exact", baseline_score=float(values[0]),
                          grand_score=float(values[-1]))


def _permutation_chunk(game, rng: SeededRng, ts: range) -> np.ndarray:
    """Summed marginal vectors of the permutations indexed by ``ts``."""
    n = game.n_players
    perms = np.stack([rng.generator(t).permutation(n) for t in ts])
    # prefix masks: row k of a permutation holds its first k players
    ranks = np.empty_like(perms)
    rows = np.arange(len(ts))[:, None]
    ranks[rows, perms] = np.arange(n)[None, :]
    prefix = ranks[:, None, :] < np.arange(n + 1)[None, :, None]
    scores = game.evaluate_many(prefix.reshape(-1, n)).reshape(len(ts), n + 1)
    marginals = np.diff(scores, axis=1)
    total = np.zeros(n)
    for k in range(len(ts)):
        total[perms[k]] += marginals[k]
    return total


def sampled_shapley(game, T: int = DEFAULT_SAMPLES, rng: SeededRng | int = 0,
                    n_jobs: int = 1) -> AttributionMap:
    """Average marginal contributions over ``T`` uniform random join orders.

    Permutation ``t`` is drawn from its own sub-stream of ``rng`` and the
    chunked sums are reduced in index order, so the result does not depend
    on ``n_jobs``.  Worker threads are used only when the game's scorer
    declares ``concurrent_safe``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(rng, int):
        rng = SeededRng(rng)
    n = game.n_players
    per_chunk = max(1, EVAL_CHUNK // (n + 1))
    chunks = [range(lo, min(T, lo + per_chunk)) for lo in range(0, T, per_chunk)]
    parallel = n_jobs > 1 and len(chunks) > 1 and getattr(game, "concurrent_safe", False)
    if parallel:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(lambda ts: _permutation_chunk(game, rng, ts), chunks))
    else:
        parts = [_permutation_chunk(game, rng, ts) for ts in chunks]
    total = np.zeros(n)
    for p in parts:
        total += p
    return AttributionMap(total / T, "sampled", samples=T, seed=rng.seed, stream=rng.stream_id,
                          baseline_score=float(game.baseline_score),
                          grand_score=float(game.evaluate(np.ones(n, dtype=bool))))


def instability_of(phi_a, phi_b) -> float:
    """``||a - b|| / ||a + b||``; +inf (with a warning) when ``a + b = 0``."""
    a = np.asarray(getattr(phi_a, "phi", phi_a), dtype=np.float64)
    b = np.asarray(getattr(phi_b, "phi", phi_b), dtype=np.float64)
    denom = np.linalg.norm(a + b)
    if denom == 0.0:
        warnings.warn("instability undefined for maps summing to zero", DegenerateInputWarning,
                      stacklevel=2)
        return math.inf
    return float(np.linalg.norm(a - b) / denom)


def instability(game, T: int, seed_a: int, seed_b: int) -> float:
    if seed_a == seed_b:
        raise ValueError("instability needs two distinct seeds")
    return instability_of(sampled_shapley(game, T, SeededRng(seed_a)),
                          sampled_shapley(game, T, SeededRng(seed_b)))


# --- synthetic games and axiom checks -------------------------------------------------

def dividend_game(n: int, dividends: dict[frozenset, float]) -> TabularGame:
    """``v(S) = sum of d_T over T subset of S``."""
    masks = all_masks(n)
    values = np.zeros(2 ** n)
    for coalition, d in dividends.items():
        members = list(coalition)
        values += d * masks[:, members].all(axis=1)
    return TabularGame(values)


def dividend_shapley(n: int, dividends: dict[frozenset, float]) -> np.ndarray:
    """Closed form: each dividend is split evenly among its members."""
    phi = np.zeros(n)
    for coalition, d in dividends.items():
        if coalition:
            for i in coalition:
                phi[i] += d / len(coalition)
    return phi


def random_dividends(n: int, gen: np.random.Generator) -> dict[frozenset, float]:
    """Singletons plus about ``n`` random pairs and ``n/2`` triples."""
    dividends: dict[frozenset, float] = {frozenset(): float(gen.normal())}
    for i in range(n):
        dividends[frozenset([i])] = float(gen.normal())
    for size, count in ((2, n), (3, max(1, n // 2))):
        for _ in range(count if size <= n else 0):
            c = frozenset(int(x) for x in gen.choice(n, size=size, replace=False))
            dividends[c] = dividends.get(c, 0.0) + float(gen.normal())
    return dividends


def random_game(n: int, gen: np.random.Generator) -> TabularGame:
    return dividend_game(n, random_dividends(n, gen))


def _with_dummy(game: TabularGame, player: int, step: float) -> TabularGame:
    """Make ``player`` contribute exactly ``step`` to every coalition."""
    codes = np.arange(2 ** game.n_players)
    has = (codes >> player) & 1
    return TabularGame(game.values[codes & ~(1 << player)] + step * has)


def _symmetrised(game: TabularGame, i: int, j: int) -> TabularGame:
    codes = np.arange(2 ** game.n_players)
    bi, bj = (codes >> i) & 1, (codes >> j) & 1
    swapped = (codes & ~((1 << i) | (1 << j))) | (bi << j) | (bj << i)
    return TabularGame(game.values + game.values[swapped])


@dataclass
class AxiomReport:
    games: int
    linearity: float = 0.0
    dummy: float = 0.0
    symmetry: float = 0.0
    efficiency: float = 0.0
    tolerance: float = 1e-6
    details: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(max(self.linearity, self.dummy, self.symmetry, self.efficiency) <= self.tolerance)

    def as_dict(self) -> dict:
        return {"games": self.games, "linearity": self.linearity, "dummy": self.dummy,
                "symmetry": self.symmetry, "efficiency": self.efficiency,
                "tolerance": self.tolerance, "ok": bool(self.ok)}


def verify_axioms(games, tolerance: float = 1e-6, seed: int = 0) -> AxiomReport:
    """Maximum violation of linearity, dummy, symmetry and efficiency.

    Dummy and symmetry are checked on games derived from each input: one with
    its last player turned into a constant-step dummy, one symmetrised in
    players 0 and 1.  Linearity pairs each game with the next one.
    """
    games = list(games)
    gen = np.random.default_rng(seed)
    report = AxiomReport(len(games), tolerance=tolerance)
    phis = [exact_shapley(g).phi for g in games]
    for g, phi in zip(games, phis):
        resid = abs(phi.sum() - (g.values[-1] - g.values[0]))
        report.efficiency = max(report.efficiency, resid)

        d = g.n_players - 1
        for step in (0.0, float(gen.normal())):
            dg = _with_dummy(g, d, step)
            phi_d = exact_shapley(dg).phi
            solo = dg.values[1 << d] - dg.values[0]
            report.dummy = max(report.dummy, abs(phi_d[d] - solo))

        if g.n_players >= 2:
            phi_s = exact_shapley(_symmetrised(g, 0, 1)).phi
            report.symmetry = max(report.symmetry, abs(phi_s[0] - phi_s[1]))
    for k in range(len(games) - 1):
        u, w = games[k], games[k + 1]
        if u.n_players != w.n_players:
            continue
        combined = exact_shapley(u + w).phi
        report.linearity = max(report.linearity, float(np.max(np.abs(combined - phis[k] - phis[k + 1]))))
    return report
