"""Client selection: probabilistic self-selection, random and greedy baselines.

All randomness flows through ``numpy.random.Generator`` objects derived from
``(seed, *keys)`` with :func:`sub_rng`, so a tentative try or a grid point
can be replayed in isolation and parallel runs match serial ones.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .distributions import kl_divergence, population_distribution, uniform
from .registry import AggregateRegistry, RegistryScheme, aggregate_slots, register_all

STRATEGIES = ("random", "greedy", "dubhe")


class ClampWarning(UserWarning):
    """Some participation probability hit 1, so the expected size is no longer K."""


def sub_rng(seed, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``keys`` under a master ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(keys))
    else:
        ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class SelectionConfig:
    K: int = 20
    H: int = 1
    strategy: str = "dubhe"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ValueError("K and H must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


@dataclass
class SelectionOutcome:
    selected: np.ndarray
    p_o: np.ndarray
    emd_star: float
    tries_used: int
    try_emds: list[float]
    best_try: int = 0

    def to_record(self, **extra) -> dict:
        rec = {
            "selected": [int(k) for k in self.selected],
            "p_o": [float(x) for x in self.p_o],
            "emd_star": float(self.emd_star),
            "tries_used": self.tries_used,
            "best_try": self.best_try,
            "try_emds": [float(x) for x in self.try_emds],
        }
        rec.update(extra)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


# --------------------------------------------------------------------------
# probability-based participation
# --------------------------------------------------------------------------

def participation_probability(own, agg: AggregateRegistry, K: int) -> float:
    """``min(1, K / (R_A(u) * ||R_A||_0))`` for one client.

    ``own`` is a :class:`~fedselect.registry.Registry`; its count in the
    aggregate is the inner product of the two vectors.
    """
    support = agg.support
    if support == 0:
        raise ValueError("aggregate registry is empty")
    own_count = int(own.bits @ agg.counts)
    if own_count < 1:
        raise ValueError("aggregate does not include this client's registration")
    return min(1.0, K / (own_count * support))


def participation_probabilities(slots: np.ndarray, agg: AggregateRegistry, K: int, warn: bool = True) -> np.ndarray:
    support = agg.support
    if support == 0:
        raise ValueError("aggregate registry is empty")
    per_slot = agg.counts[slots]
    if (per_slot < 1).any():
        raise ValueError("aggregate does not include every client's registration")
    raw = K / (per_slot * support)
    if warn and (raw > 1).any():
        warnings.warn(
            f"K={K} >= support {support}: probabilities clamp at 1 and E|S| != K", ClampWarning, stacklevel=2
        )
    return np.minimum(1.0, raw)


def draw_dubhe(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli participation; returns the ids that opted in."""
    return np.flatnonzero(rng.random(len(probs)) < probs)


def fix_cardinality(S, K: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Top up uniformly from non-members or drop members uniformly until ``|S| = K``."""
    if K > N:
        raise ValueError(f"K={K} exceeds the population N={N}")
    S = np.asarray(S, dtype=np.int64)
    if S.size < K:
        pool = np.setdiff1d(np.arange(N), S, assume_unique=False)
        S = np.concatenate([S, rng.choice(pool, K - S.size, replace=False)])
    elif S.size > K:
        S = rng.choice(S, K, replace=False)
    return np.sort(S)


def select_random(N: int, K: int, rng: np.random.Generator) -> np.ndarray:
    if K > N:
        raise ValueError(f"K={K} exceeds the population N={N}")
    return np.sort(rng.choice(N, K, replace=False))


def select_greedy(counts: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Random seed client, then repeatedly add the client minimising KL(pooled || uniform)."""
    counts = np.asarray(counts, dtype=float)
    N = counts.shape[0]
    if K > N:
        raise ValueError(f"K={K} exceeds the population N={N}")
    taken = np.zeros(N, dtype=np.bool_)
    first = int(rng.integers(N))
    taken[first] = True
    chosen = [first]
    current = counts[first].copy()
    for _ in range(K - 1):
        k = int(np.argmin(kernels.greedy_kl_scores(current, counts, taken)))
        taken[k] = True
        chosen.append(k)
        current += counts[k]
    return np.sort(np.array(chosen, dtype=np.int64))


# --------------------------------------------------------------------------
# selectors: one full selection per call
# --------------------------------------------------------------------------

@dataclass
class DubheSelector:
    slots: np.ndarray
    agg: AggregateRegistry
    K: int
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.probs = participation_probabilities(self.slots, self.agg, self.K)

    @classmethod
    def from_counts(cls, counts: np.ndarray, scheme: RegistryScheme, K: int) -> "DubheSelector":
        slots = register_all(counts, scheme)
        return cls(slots, aggregate_slots(slots, scheme.length), K)

    def tentative(self, rng: np.random.Generator) -> np.ndarray:
        return draw_dubhe(self.probs, rng)

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        return fix_cardinality(self.tentative(rng), self.K, len(self.slots), rng)


@dataclass
class RandomSelector:
    N: int
    K: int

    def __call__(self, rng):
        return select_random(self.N, self.K, rng)


@dataclass
class GreedySelector:
    counts: np.ndarray
    K: int

    def __call__(self, rng):
        return select_greedy(self.counts, self.K, rng)


def make_selector(strategy: str, counts: np.ndarray, K: int, scheme: RegistryScheme | None = None):
    if strategy == "random":
        return RandomSelector(counts.shape[0], K)
    if strategy == "greedy":
        return GreedySelector(counts, K)
    if strategy == "dubhe":
        if scheme is None:
            scheme = RegistryScheme.default(counts.shape[1])
        return DubheSelector.from_counts(counts, scheme, K)
    raise ValueError(f"unknown strategy {strategy!r}")


def emd_to_uniform(counts: np.ndarray, selected) -> tuple[np.ndarray, float]:
    p_o = population_distribution(counts[np.asarray(selected)])
    return p_o, float(np.abs(p_o - 1.0 / counts.shape[1]).sum())


def multi_time_select(
    selector: Callable[[np.random.Generator], np.ndarray],
    counts: np.ndarray,
    H: int,
    seed,
    *keys: int,
) -> SelectionOutcome:
    """Run ``H`` independent selections and keep the one closest to uniform.

    Try ``h`` draws from ``sub_rng(seed, *keys, h)``. Ties keep the earliest try.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    best = None
    emds = []
    for h in range(H):
        S = selector(sub_rng(seed, *keys, h))
        p_o, e = emd_to_uniform(counts, S)
        emds.append(e)
        if best is None or e < best[2]:
            best = (S, p_o, e, h)
    S, p_o, e, h = best
    return SelectionOutcome(selected=S, p_o=p_o, emd_star=e, tries_used=H, try_emds=emds, best_try=h)


# --------------------------------------------------------------------------
# threshold search
# --------------------------------------------------------------------------

def default_grid(scheme: RegistryScheme) -> list[tuple[float, ...]]:
    """Cartesian grid over the free thresholds (every ``i`` in G except C)."""
    axes = []
    for i in scheme.G[:-1]:
        if i == 1:
            ax = np.round(np.arange(0.3, 0.9 + 1e-9, 0.1), 10)
        elif i == 2:
            ax = np.round(np.arange(0.05, 0.45 + 1e-9, 0.05), 10)
        else:
            ax = np.round(np.arange(0.05, 1.0 / i + 1e-9, 0.05), 10)
        axes.append([float(x) for x in ax if x <= 1.0 / i + 1e-12])
    grid = [()]
    for ax in axes:
        grid = [g + (x,) for g in grid for x in ax]
    return [g + (0.0,) for g in grid]


@dataclass
class SearchPoint:
    sigma: tuple[float, ...]
    score: float
    support: int
    mean_p_o: list[float]

    def to_record(self) -> dict:
        return asdict(self)


def evaluate_thresholds(counts, scheme: RegistryScheme, K: int, H: int, seed, *keys: int) -> SearchPoint:
    """Score one threshold vector by ``||mean_h p_o,h - p_u||_1`` over H tries."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        sel = DubheSelector.from_counts(counts, scheme, K)
    pos = [emd_to_uniform(counts, sel(sub_rng(seed, *keys, h)))[0] for h in range(H)]
    mean = np.mean(pos, axis=0)
    return SearchPoint(scheme.sigma, float(np.abs(mean - 1.0 / scheme.C).sum()), sel.agg.support, mean.tolist())


def parameter_search(
    counts: np.ndarray,
    scheme: RegistryScheme,
    grid: Sequence[Sequence[float]] | None,
    H: int,
    K: int,
    seed,
    *keys: int,
) -> tuple[tuple[float, ...], float, list[SearchPoint]]:
    """Return ``(best sigma, score, trace)``; ties keep the first grid point.

    Every grid point replays the same tentative-try streams so scores differ
    only through the thresholds.
    """
    grid = default_grid(scheme) if grid is None else list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    trace = []
    for sigma in grid:
        try:
            cand = scheme.with_sigma(sigma)
        except ValueError:
            continue
        trace.append(evaluate_thresholds(counts, cand, K, H, seed, *keys))
    if not trace:
        raise ValueError("no valid point in the parameter grid")
    best = min(range(len(trace)), key=lambda i: (trace[i].score, i))
    return trace[best].sigma, trace[best].score, trace


def kl_to_uniform(counts, selected) -> float:
    p_o = population_distribution(np.asarray(counts)[np.asarray(selected)])
    return kl_divergence(p_o, uniform(p_o.size))
