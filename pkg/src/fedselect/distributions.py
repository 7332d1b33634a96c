"""Label histograms, skew metrics and synthetic non-IID federations.

A federation is ``N`` virtual clients with equal sample counts ``N_VC``.
Global skew follows a half-normal profile over the class index with the
head-to-tail ratio fixed to ``rho``. Client heterogeneity is controlled by
mixing that profile with a concentrated component (an even split over two
classes, or one class) so that the mean L1 distance to the global
distribution hits a target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EMD_TOLERANCE = 0.005
BISECTION_STEPS = 60


class InfeasibleTarget(ValueError):
    """Requested heterogeneity cannot be produced by the client family."""


@dataclass(frozen=True)
class ClassHistogram:
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ValueError("class counts must be non-negative")

    @classmethod
    def of(cls, counts) -> "ClassHistogram":
        return cls(tuple(int(c) for c in counts))

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def distribution(self) -> np.ndarray:
        if self.total <= 0:
            raise ValueError("empty histogram has no distribution")
        return np.asarray(self.counts, dtype=float) / self.total


def _as_probs(p) -> np.ndarray:
    if isinstance(p, ClassHistogram):
        return p.distribution()
    return np.asarray(p, dtype=float)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def uniform(C: int) -> np.ndarray:
    return np.full(C, 1.0 / C)


def l1_distance(p, q) -> float:
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def imbalance_ratio(h) -> float:
    """Largest class count over smallest; ``inf`` if some class is empty."""
    v = np.asarray(h.counts if isinstance(h, ClassHistogram) else h, dtype=float)
    lo = v.min()
    if lo <= 0:
        return math.inf
    return float(v.max() / lo)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with ``0 ln 0 = 0``; ``inf`` where q misses p's support."""
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def population_distribution(selected) -> np.ndarray:
    """Class distribution of the pooled data of the selected clients."""
    if isinstance(selected, np.ndarray):
        counts = selected
    else:
        selected = list(selected)
        if not selected:
            raise ValueError("population of an empty selection is undefined")
        counts = np.array([h.counts if isinstance(h, ClassHistogram) else h for h in selected])
    if counts.ndim != 2 or counts.shape[0] == 0:
        raise ValueError("population of an empty selection is undefined")
    total = counts.sum(axis=0).astype(float)
    return total / total.sum()


def emd_to_reference(distributions: np.ndarray, reference) -> np.ndarray:
    """Per-client L1 distance to a reference distribution (``p_g`` or ``p_o``)."""
    return np.abs(np.asarray(distributions, dtype=float) - np.asarray(reference, dtype=float)).sum(axis=1)


def emd_avg(counts: np.ndarray, reference=None) -> float:
    """Mean client-to-reference L1 distance; reference defaults to the pooled distribution."""
    counts = np.asarray(counts)
    dist = counts / counts.sum(axis=1, keepdims=True)
    if reference is None:
        reference = population_distribution(counts)
    return float(emd_to_reference(dist, reference).mean())


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to each row of ``weights``.

    Works row-wise on 2-D input. Ties go to the lower column index.
    """
    w = np.asarray(weights, dtype=float)
    squeeze = w.ndim == 1
    w = np.atleast_2d(w)
    ideal = w / w.sum(axis=1, keepdims=True) * total
    base = np.floor(ideal + 1e-12).astype(np.int64)
    short = total - base.sum(axis=1)
    rem = ideal - base
    order = np.argsort(-rem, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(w.shape[0])[:, None]
    ranks[rows, order] = np.arange(w.shape[1])[None, :]
    base += ranks < short[:, None]
    return base[0] if squeeze else base


def generate_global_proportions(C: int, rho: float, shuffle: bool = False, rng=None) -> np.ndarray:
    """Half-normal class profile ``q_j ~ exp(-a j^2)`` with ``q_0 / q_{C-1} = rho``."""
    if C < 2:
        raise ValueError("need at least two classes")
    if rho < 1:
        raise ValueError("imbalance ratio must be >= 1")
    a = math.log(rho) / (C - 1) ** 2
    j = np.arange(C)
    q = np.exp(-a * j * j)
    q /= q.sum()
    if shuffle:
        q = q[np.random.default_rng(rng).permutation(C)]
    return q


def _pair_slots(quota: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle class slots into rows of two distinct classes."""
    n = int(quota.sum()) // 2
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if quota.max() > n:
        raise InfeasibleTarget("one class holds more than half of the pair slots")
    slots = np.repeat(np.arange(quota.size), quota)
    rng.shuffle(slots)
    slots = slots.reshape(n, 2)
    for _ in range(200 * n):
        bad = np.flatnonzero(slots[:, 0] == slots[:, 1])
        if bad.size == 0:
            return slots
        r = bad[0]
        o = int(rng.integers(n))
        a = int(rng.integers(2))
        cls = slots[r, 0]
        if o != r and slots[o, a] != cls and slots[o, 1 - a] != cls:
            slots[r, 0], slots[o, a] = slots[o, a], cls
    raise InfeasibleTarget("could not arrange distinct class pairs")


def _components(p_g: np.ndarray, n_single: int, n_pair: int, rng) -> np.ndarray:
    C = p_g.size
    d = np.zeros((n_single + n_pair, C))
    if n_single:
        singles = np.repeat(np.arange(C), largest_remainder(p_g, n_single))
        d[np.arange(n_single), singles] = 1.0
    if n_pair:
        pairs = _pair_slots(largest_remainder(p_g, 2 * n_pair), rng)
        rows = np.arange(n_single, n_single + n_pair)
        d[rows, pairs[:, 0]] += 0.5
        d[rows, pairs[:, 1]] += 0.5
    return d[rng.permutation(d.shape[0])]


def balanced_rounding(ideal_rows, total: int) -> np.ndarray:
    """Row-wise Hamilton rounding with the column residual carried forward.

    Every entry stays at the floor or ceiling of its ideal value and every
    row sums to ``total``. Carrying ``ideal - rounded`` per column into the
    remainder ranking of later rows keeps column sums within one unit of
    their ideal, so per-row tie-breaking does not accumulate into a
    systematic bias against particular classes.
    """
    w = np.asarray(ideal_rows, dtype=float)
    ideal = w / w.sum(axis=1, keepdims=True) * total
    base = np.floor(ideal + 1e-12).astype(np.int64)
    frac = ideal - base
    out = base.copy()
    carry = np.zeros(w.shape[1])
    for k in range(w.shape[0]):
        short = total - int(base[k].sum())
        if short:
            prio = frac[k] + carry
            prio[frac[k] <= 1e-12] = -np.inf
            out[k, np.argsort(-prio, kind="stable")[:short]] += 1
        carry += ideal[k] - out[k]
    return out


def _materialize(p_g, d, lam, n_vc):
    if lam == 0.0:
        return largest_remainder(np.repeat(p_g[None, :], d.shape[0], axis=0), n_vc)
    return balanced_rounding((1.0 - lam) * p_g[None, :] + lam * d, n_vc)


@dataclass
class FederationDataset:
    """Equal-size virtual clients described by their label histograms."""

    counts: np.ndarray
    target_proportions: np.ndarray
    rho_target: float
    emd_target: float
    seed: int | None = None
    mixing: float = 0.0
    single_fraction: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.target_proportions = np.asarray(self.target_proportions, dtype=float)
        totals = self.counts.sum(axis=1)
        if totals.size and (totals != totals[0]).any():
            raise ValueError("virtual clients must all hold N_VC samples")

    @property
    def num_clients(self) -> int:
        return self.counts.shape[0]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[1]

    @property
    def n_vc(self) -> int:
        return int(self.counts[0].sum())

    @property
    def distributions(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    @property
    def global_distribution(self) -> np.ndarray:
        return population_distribution(self.counts)

    @property
    def rho_realized(self) -> float:
        return imbalance_ratio(self.counts.sum(axis=0))

    @property
    def emd_realized(self) -> float:
        return emd_avg(self.counts)

    def histogram(self, k: int) -> ClassHistogram:
        return ClassHistogram.of(self.counts[k])

    def header(self) -> dict:
        return {
            "C": self.num_classes,
            "N": self.num_clients,
            "N_VC": self.n_vc,
            "rho_target": self.rho_target,
            "rho_realized": round(self.rho_realized, 6),
            "emd_target": self.emd_target,
            "emd_realized": round(self.emd_realized, 6),
            "seed": self.seed,
            "mixing": round(self.mixing, 9),
            "single_fraction": self.single_fraction,
            **self.meta,
        }

    def to_text(self) -> str:
        lines = ["# fedselect-dataset v1"]
        lines += [f"# {k} = {json.dumps(v)}" for k, v in self.header().items()]
        lines.append("# target_proportions = " + json.dumps([float(x) for x in self.target_proportions]))
        lines += [f"{k} " + " ".join(str(int(c)) for c in row) for k, row in enumerate(self.counts)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FederationDataset":
        meta, rows = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, val = line[1:].partition("=")
                    meta[key.strip()] = json.loads(val)
                continue
            parts = line.split()
            rows.append([int(x) for x in parts[1:]])
        return cls._from_meta(meta, np.array(rows, dtype=np.int64))

    def to_json(self) -> str:
        doc = dict(self.header())
        doc["target_proportions"] = [float(x) for x in self.target_proportions]
        doc["counts"] = self.counts.tolist()
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FederationDataset":
        doc = json.loads(text)
        return cls._from_meta(doc, np.array(doc.pop("counts"), dtype=np.int64))

    @classmethod
    def _from_meta(cls, meta: dict, counts: np.ndarray) -> "FederationDataset":
        known = {"C", "N", "N_VC", "rho_realized", "emd_realized", "rho_target", "emd_target",
                 "seed", "mixing", "single_fraction", "target_proportions"}
        return cls(
            counts=counts,
            target_proportions=np.array(meta.get("target_proportions", population_distribution(counts))),
            rho_target=meta.get("rho_target", math.nan),
            emd_target=meta.get("emd_target", math.nan),
            seed=meta.get("seed"),
            mixing=meta.get("mixing", 0.0),
            single_fraction=meta.get("single_fraction", 0.0),
            meta={k: v for k, v in meta.items() if k not in known},
        )


def _single_fraction_needed(p_g: np.ndarray, target: float) -> float:
    # fully concentrated components: pairs reach 2 - 4 sum q^2, singles 2 - 2 sum q^2
    s = float(np.sum(p_g * p_g))
    pair_max = 2.0 - 4.0 * s
    if target + 2 * EMD_TOLERANCE <= pair_max:
        return 0.0
    return min(1.0, (target + 2 * EMD_TOLERANCE - pair_max) / (2.0 * s))


def generate_client_partitions(
    p_g,
    N: int,
    n_vc: int,
    target_emd_avg: float,
    rng=None,
    classes_per_client: int = 2,
    rho_target: float | None = None,
    seed: int | None = None,
) -> FederationDataset:
    """Build ``N`` clients of ``n_vc`` samples with mean L1 distance ``target_emd_avg``.

    Client ``k`` holds ``(1 - lam) p_g + lam d_k`` rounded to integer counts.
    ``d_k`` is an even split over two distinct classes (``classes_per_client=2``)
    or a single class (``1``); class slots are apportioned in proportion to
    ``p_g`` so the pooled data keeps the global skew. When the two-class family
    cannot reach the target, the fewest clients needed are given single-class
    components. ``lam`` is found by bisection on the realized, post-rounding
    mean distance to the pooled distribution.
    """
    p_g = np.asarray(p_g, dtype=float)
    p_g = p_g / p_g.sum()
    if not 0 <= target_emd_avg < 2:
        raise InfeasibleTarget("EMD target must lie in [0, 2)")
    if classes_per_client not in (1, 2):
        raise ValueError("classes_per_client must be 1 or 2")
    rng = np.random.default_rng(rng if rng is not None else seed)
    if rho_target is None:
        rho_target = float(p_g.max() / p_g.min())

    phi = 1.0 if classes_per_client == 1 else _single_fraction_needed(p_g, target_emd_avg)
    n_single = int(math.ceil(phi * N - 1e-9))
    d = _components(p_g, n_single, N - n_single, rng)

    def realized(lam: float) -> tuple[float, np.ndarray]:
        counts = _materialize(p_g, d, lam, n_vc)
        return emd_avg(counts), counts

    lo, hi = 0.0, 1.0
    emd_lo, counts = realized(0.0)
    if target_emd_avg <= emd_lo + EMD_TOLERANCE:
        lam = 0.0
    else:
        emd_hi, counts_hi = realized(1.0)
        if emd_hi < target_emd_avg - EMD_TOLERANCE:
            raise InfeasibleTarget(
                f"EMD target {target_emd_avg} exceeds the reachable {emd_hi:.4f} for this family"
            )
        lam, counts = 1.0, counts_hi
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            e, c = realized(mid)
            if abs(e - target_emd_avg) <= EMD_TOLERANCE:
                lam, counts = mid, c
                break
            if e < target_emd_avg:
                lo = mid
            else:
                hi = mid
        else:
            lam, counts = hi, realized(hi)[1]

    return FederationDataset(
        counts=counts,
        target_proportions=p_g,
        rho_target=float(rho_target),
        emd_target=float(target_emd_avg),
        seed=seed,
        mixing=lam,
        single_fraction=n_single / N,
    )


def generate_federation(
    C: int = 10,
    N: int = 1000,
    n_vc: int = 128,
    rho: float = 10.0,
    emd: float = 1.5,
    seed: int = 0,
    classes_per_client: int = 2,
    shuffle_profile: bool = False,
) -> FederationDataset:
    """Convenience wrapper: global profile plus client partition from one seed."""
    ss = np.random.SeedSequence(seed)
    prof_seed, part_seed = ss.spawn(2)
    p_g = generate_global_proportions(C, rho, shuffle=shuffle_profile, rng=np.random.default_rng(prof_seed))
    return generate_client_partitions(
        p_g, N, n_vc, emd, rng=np.random.default_rng(part_seed),
        classes_per_client=classes_per_client, rho_target=rho, seed=seed,
    )


def histograms(counts: Sequence) -> list[ClassHistogram]:
    return [ClassHistogram.of(row) for row in counts]
