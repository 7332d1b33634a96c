"""Desk-scale federated training to link selection bias to test accuracy.

Softmax regression on Gaussian class clusters stands in for an image
model: only label histograms drive selection, and a linear classifier
already loses balanced accuracy when the participating label mix is
skewed. Local updates run through :mod:`fedselect.kernels`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .distributions import FederationDataset
from .registry import RegistryScheme
from .selection import SelectionConfig, make_selector, multi_time_select, sub_rng

_TEST_STREAM = 0x7E57
_DATA_STREAM = 0xDA7A
_TRAIN_STREAM = 0x7A1
_INIT_STREAM = 0x1717
_REF_STREAM = 0x12EF


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    """``C`` isotropic Gaussian clusters with orthonormal centroids in ``R^d``."""

    C: int = 10
    d: int = 20
    noise: float = 0.45
    seed: int = 0
    means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d < self.C:
            raise ValueError("need d >= C for orthonormal class centroids")
        if 2 * self.noise >= math.sqrt(2):
            raise ValueError("noise too large: centroids (distance sqrt 2) must exceed 2 * noise")
        g = np.random.default_rng(np.random.SeedSequence(self.seed)).standard_normal((self.d, self.C))
        q, _ = np.linalg.qr(g)
        object.__setattr__(self, "means", np.ascontiguousarray(q.T))

    def sample(self, counts, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        counts = np.asarray(counts, dtype=np.int64)
        y = np.repeat(np.arange(self.C), counts)
        X = self.means[y] + self.noise * rng.standard_normal((y.size, self.d))
        return X, y

    def test_set(self, per_class: int = 500) -> tuple[np.ndarray, np.ndarray]:
        return self.sample(np.full(self.C, per_class), sub_rng(self.seed, _TEST_STREAM))


@dataclass
class ModelWeights:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, d: int, C: int) -> "ModelWeights":
        return cls(np.zeros((d, C)), np.zeros(C))

    @classmethod
    def random(cls, d: int, C: int, rng, scale: float = 0.01) -> "ModelWeights":
        return cls(scale * rng.standard_normal((d, C)), np.zeros(C))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.W.copy(), self.b.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    local_epochs: int = 1
    n_vc: int = 128
    lr: float = 0.05
    rounds: int = 200
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.batch_size, self.n_vc, self.rounds) < 1 or self.local_epochs < 0 or self.lr <= 0:
            raise ValueError("training parameters must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


def materialize_client_data(task: SyntheticTask, histogram, seed, *keys: int):
    """Draw features whose label counts equal ``histogram`` exactly."""
    counts = np.asarray(getattr(histogram, "counts", histogram))
    return task.sample(counts, sub_rng(seed, _DATA_STREAM, *keys))


def local_train(w: ModelWeights, data, config: TrainConfig, rng: np.random.Generator) -> ModelWeights:
    """``local_epochs`` passes of mini-batch descent on softmax cross-entropy."""
    X, y = data
    if X.shape[0] == 0:
        raise ValueError("no local data")
    out = w.copy()
    if config.local_epochs == 0:
        return out
    order = np.stack([rng.permutation(X.shape[0]) for _ in range(config.local_epochs)])
    kernels.train_epochs(
        out.W, out.b, np.ascontiguousarray(X, dtype=np.float64), y.astype(np.int64), order,
        config.batch_size, config.lr, config.optimizer == "adam", config.beta1, config.beta2, config.eps,
    )
    if not (np.isfinite(out.W).all() and np.isfinite(out.b).all()):
        raise NonFiniteLoss("local training diverged; lower the learning rate")
    return out


def aggregate(models: Sequence[ModelWeights]) -> ModelWeights:
    """Unweighted mean of the selected clients' weights."""
    if not models:
        raise ValueError("nothing to aggregate")
    shape = models[0].W.shape
    if any(m.W.shape != shape or m.b.shape != models[0].b.shape for m in models):
        raise ValueError("weight shapes differ")
    return ModelWeights(np.mean([m.W for m in models], axis=0), np.mean([m.b for m in models], axis=0))


def predict(w: ModelWeights, X: np.ndarray) -> np.ndarray:
    return np.argmax(X @ w.W + w.b, axis=1)


def evaluate(w: ModelWeights, test) -> float:
    X, y = test
    if y.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(w, X) == y))


def weight_divergence(w_f: ModelWeights, w_star: ModelWeights) -> float:
    if w_f.W.shape != w_star.W.shape or w_f.b.shape != w_star.b.shape:
        raise ValueError("weight shapes differ")
    return float(np.linalg.norm(w_f.flat() - w_star.flat()))


def train_reference(task: SyntheticTask, n_samples: int, config: TrainConfig, seed=0,
                    max_epochs: int = 200, grad_tol: float = 1e-6) -> ModelWeights:
    """Centralised model on label-uniform data, stopping early on a tiny full gradient."""
    per_class = max(1, n_samples // task.C)
    X, y = task.sample(np.full(task.C, per_class), sub_rng(seed, _REF_STREAM, task.seed))
    rng = sub_rng(seed, _REF_STREAM, 1)
    w = ModelWeights.random(task.d, task.C, sub_rng(seed, _INIT_STREAM))
    one = TrainConfig(batch_size=config.batch_size, local_epochs=1, n_vc=config.n_vc, lr=config.lr,
                      optimizer=config.optimizer)
    for _ in range(max_epochs):
        w = local_train(w, (X, y), one, rng)
        _, gW, gb = kernels.softmax_xent_grad(w.W, w.b, X, y)
        if math.sqrt(float((gW * gW).sum() + (gb * gb).sum())) < grad_tol:
            break
    return w


TRACE_COLUMNS = ("round", "strategy", "accuracy", "emd_po_pu", "weight_divergence", "seed")


@dataclass
class RoundRecord:
    round: int
    strategy: str
    accuracy: float
    emd_po_pu: float
    weight_divergence: float
    seed: int


def run_experiment(
    dataset: FederationDataset,
    task: SyntheticTask,
    selection: SelectionConfig,
    train: TrainConfig,
    scheme: RegistryScheme | None = None,
    test=None,
    reference: ModelWeights | None = None,
) -> list[RoundRecord]:
    """FedAvg for ``train.rounds`` rounds with one selection strategy.

    Client data is re-drawn each round from its fixed histogram with a
    round-salted seed shared across strategies, so runs with the same seed are
    paired.
    """
    counts = dataset.counts
    if counts.shape[1] != task.C:
        raise ValueError(f"dataset has {counts.shape[1]} classes, task has {task.C}")
    if test is None:
        test = task.test_set()
    seed = selection.seed
    if reference is None:
        reference = train_reference(task, selection.K * dataset.n_vc, train, seed=task.seed)
    selector = make_selector(selection.strategy, counts, selection.K, scheme)
    w = ModelWeights.random(task.d, task.C, sub_rng(seed, _INIT_STREAM))
    trace = []
    for t in range(train.rounds):
        out = multi_time_select(selector, counts, selection.H, seed, t)
        local = []
        for k in out.selected:
            data = materialize_client_data(task, counts[k], seed, t, int(k))
            local.append(local_train(w, data, train, sub_rng(seed, _TRAIN_STREAM, t, int(k))))
        w = aggregate(local)
        trace.append(RoundRecord(t, selection.strategy, evaluate(w, test), out.emd_star,
                                 weight_divergence(w, reference), int(seed)))
    return trace


def last_rounds_accuracy(trace: Sequence[RoundRecord], last: int = 50) -> float:
    return float(np.mean([r.accuracy for r in trace[-last:]]))


def trace_to_csv(records: Iterable[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in records:
        writer.writerow([r.round, r.strategy, f"{r.accuracy:.6f}", f"{r.emd_po_pu:.6f}",
                         f"{r.weight_divergence:.6f}", r.seed])
    return buf.getvalue()


def manifest(**parts) -> str:
    def enc(o):
        if hasattr(o, "__dataclass_fields__"):
            return {k: v for k, v in asdict(o).items() if not isinstance(v, np.ndarray)}
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))
    return json.dumps(parts, default=enc, indent=1, sort_keys=True)
