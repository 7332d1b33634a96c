"""Dominating-class registries.

A client summarises its label histogram as one slot in a one-hot vector.
The vector is the concatenation, for each size ``i`` in the reference set
``G``, of one bit per ``i``-subset of classes (lexicographic order). A
client whose ``i`` largest proportions all clear ``sigma_i`` takes the slot
of that subset; ``i = C`` with ``sigma_C = 0`` catches everyone else.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .distributions import ClassHistogram


def rank_combination(u: Sequence[int], C: int) -> int:
    """Lexicographic rank of the strictly increasing tuple ``u`` among ``len(u)``-subsets of ``range(C)``."""
    i = len(u)
    rank = 0
    prev = -1
    for t, v in enumerate(u):
        if not prev < v < C:
            raise ValueError(f"{tuple(u)} is not a strictly increasing subset of range({C})")
        for w in range(prev + 1, v):
            rank += math.comb(C - 1 - w, i - 1 - t)
        prev = v
    return rank


def unrank_combination(rank: int, i: int, C: int) -> tuple[int, ...]:
    total = math.comb(C, i)
    if not 0 <= rank < total:
        raise ValueError(f"rank {rank} outside [0, {total})")
    out = []
    v = 0
    for t in range(i):
        while True:
            block = math.comb(C - 1 - v, i - 1 - t)
            if rank < block:
                break
            rank -= block
            v += 1
        out.append(v)
        v += 1
    return tuple(out)


@dataclass(frozen=True)
class RegistryScheme:
    """Codebook layout plus the thresholds used by registration."""

    C: int
    G: tuple[int, ...]
    sigma: tuple[float, ...]
    lengths: tuple[int, ...] = field(init=False)
    offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        G = tuple(int(i) for i in self.G)
        if list(G) != sorted(set(G)):
            raise ValueError("G must be strictly ascending")
        if G[-1] != self.C or G[0] < 1:
            raise ValueError(f"G must lie in [1, C] and contain C={self.C}")
        sigma = tuple(float(s) for s in self.sigma)
        if len(sigma) == len(G) - 1:
            sigma = sigma + (0.0,)
        if len(sigma) != len(G):
            raise ValueError("need one threshold per element of G")
        if sigma[-1] != 0.0:
            raise ValueError("the threshold for i = C must be 0")
        for i, s in zip(G, sigma):
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"sigma_{i}={s} outside [0, 1]")
            if s > 1.0 / i + 1e-12:
                warnings.warn(f"sigma_{i}={s} > 1/{i} makes size-{i} categories unreachable", stacklevel=3)
                raise ValueError(f"sigma_{i}={s} exceeds 1/{i}")
        lengths = tuple(math.comb(self.C, i) for i in G)
        offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(lengths)[:-1]]))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def default(cls, C: int = 10, sigma1: float = 0.7, sigma2: float = 0.1) -> "RegistryScheme":
        return cls(C=C, G=(1, 2, C), sigma=(sigma1, sigma2, 0.0))

    @property
    def length(self) -> int:
        return sum(self.lengths)

    def with_sigma(self, sigma: Sequence[float]) -> "RegistryScheme":
        return RegistryScheme(C=self.C, G=self.G, sigma=tuple(sigma))

    def slot(self, category: Sequence[int]) -> int:
        i = len(category)
        try:
            pos = self.G.index(i)
        except ValueError:
            raise ValueError(f"no sub-vector for categories of size {i}") from None
        return self.offsets[pos] + rank_combination(category, self.C)

    def category(self, slot: int) -> tuple[int, ...]:
        if not 0 <= slot < self.length:
            raise ValueError(f"slot {slot} outside [0, {self.length})")
        pos = int(np.searchsorted(self.offsets, slot, side="right")) - 1
        return unrank_combination(slot - self.offsets[pos], self.G[pos], self.C)

    def codebook(self) -> Iterable[tuple[int, int, tuple[int, ...]]]:
        """Yield ``(slot, subset size, category)`` for every slot in order."""
        for i, off, n in zip(self.G, self.offsets, self.lengths):
            for r in range(n):
                yield off + r, i, unrank_combination(r, i, self.C)


@dataclass(frozen=True)
class Registry:
    slot: int
    length: int

    @property
    def bits(self) -> np.ndarray:
        v = np.zeros(self.length, dtype=np.int64)
        v[self.slot] = 1
        return v


@dataclass(frozen=True)
class AggregateRegistry:
    counts: np.ndarray

    @property
    def support(self) -> int:
        return int(np.count_nonzero(self.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def count_of(self, registry: Registry) -> int:
        return int(registry.bits @ self.counts)


def register(h, scheme: RegistryScheme) -> tuple[Registry, tuple[int, ...]]:
    """Registration for one client: returns its one-hot registry and category."""
    counts = np.asarray(h.counts if isinstance(h, ClassHistogram) else h)
    if counts.shape != (scheme.C,):
        raise ValueError(f"histogram has {counts.size} classes, scheme expects {scheme.C}")
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot register an empty histogram")
    p = counts / total
    order = np.argsort(-p, kind="stable")
    for i, s in zip(scheme.G, scheme.sigma):
        if p[order[i - 1]] >= s:
            cat = tuple(sorted(int(c) for c in order[:i]))
            return Registry(scheme.slot(cat), scheme.length), cat
    raise AssertionError("unreachable: sigma_C = 0")


def register_all(counts: np.ndarray, scheme: RegistryScheme) -> np.ndarray:
    """Vectorised ``register`` over an ``(N, C)`` count matrix; returns slot indices."""
    counts = np.asarray(counts)
    p = counts / counts.sum(axis=1, keepdims=True)
    order = np.argsort(-p, axis=1, kind="stable")
    top = np.take_along_axis(p, order, axis=1)
    slots = np.full(counts.shape[0], -1, dtype=np.int64)
    C = scheme.C
    for i, s, off in zip(scheme.G, scheme.sigma, scheme.offsets):
        hit = (slots < 0) & (top[:, i - 1] >= s)
        if not hit.any():
            continue
        chosen = np.sort(order[hit, :i], axis=1)
        rank = np.zeros(chosen.shape[0], dtype=np.int64)
        prev = np.full(chosen.shape[0], -1)
        for t in range(i):
            v = chosen[:, t]
            # sum_{w=prev+1}^{v-1} comb(C-1-w, i-1-t), tabulated over w
            table = np.array([math.comb(C - 1 - w, i - 1 - t) for w in range(C)], dtype=np.int64)
            cum = np.concatenate([[0], np.cumsum(table)])
            rank += cum[v] - cum[prev + 1]
            prev = v
        slots[hit] = off + rank
    return slots


def aggregate(registries: Sequence[Registry]) -> AggregateRegistry:
    if not registries:
        raise ValueError("nothing to aggregate")
    length = registries[0].length
    if any(r.length != length for r in registries):
        raise ValueError("registries of different lengths")
    return AggregateRegistry(np.bincount([r.slot for r in registries], minlength=length).astype(np.int64))


def aggregate_slots(slots: np.ndarray, length: int) -> AggregateRegistry:
    return AggregateRegistry(np.bincount(np.asarray(slots), minlength=length).astype(np.int64))
