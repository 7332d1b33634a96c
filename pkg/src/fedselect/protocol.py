"""In-process simulation of the encrypted selection protocol with overhead accounting.

The server holds only the public key. One client per round is picked
uniformly as the agent; it generates and dispatches the key pair and ranks
tentative tries. Messages go through a FIFO :class:`MessageBus`
that records a transcript.

Counting convention: a broadcast is one *message* with ``N`` *deliveries*;
bytes are charged per delivery.

Crypto modes: ``"full"`` really encrypts and decrypts; ``"sized"`` sends
size-only ciphertext placeholders so large-key overhead can be tabulated
without paying for modular exponentiation. Selection results are identical
in both modes.
"""

from __future__ import annotations

import json
import random
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import paillier
from .distributions import FederationDataset
from .registry import AggregateRegistry, RegistryScheme, aggregate_slots, register_all
from .selection import (
    ClampWarning,
    DubheSelector,
    SearchPoint,
    SelectionConfig,
    SelectionOutcome,
    default_grid,
    draw_dubhe,
    fix_cardinality,
    participation_probabilities,
    select_random,
    sub_rng,
)

SERVER = "server"
KINDS = (
    "KeyDispatch",
    "RegistryUpload",
    "AggregateBroadcast",
    "DistributionUpload",
    "AggregateDistribution",
    "SelectionNotice",
    "ParamDispatch",
)
_CRYPTO_STREAM = 0x5EC
_AGENT_STREAM = 0xA9E


def client_name(k: int) -> str:
    return f"client:{k}"


@dataclass(frozen=True)
class Party:
    role: str
    client_id: int | None = None
    holds_secret_key: bool = False

    def __post_init__(self):
        if self.role == "server" and self.holds_secret_key:
            raise ValueError("the server must never hold the secret key")


@dataclass(frozen=True)
class SizedCiphertextVector:
    """Stand-in for an encrypted vector when only its size matters."""

    length: int
    nbytes: int


@dataclass(frozen=True)
class IdList:
    ids: tuple[int, ...]

    @property
    def nbytes(self) -> int:
        return 4 + 4 * len(self.ids)


@dataclass(frozen=True)
class Thresholds:
    sigma: tuple[float, ...]

    @property
    def nbytes(self) -> int:
        return 4 + 8 * len(self.sigma)


@dataclass(frozen=True)
class Verdict:
    index: int
    nbytes: int = 4


@dataclass(frozen=True)
class KeyMaterial:
    public_key: Any
    secret_key: Any | None
    nbytes: int


# payload types the server may legitimately observe
SERVER_VISIBLE = (paillier.EncryptedVector, SizedCiphertextVector, IdList, Verdict, Thresholds, KeyMaterial)


@dataclass
class Message:
    round: int
    phase: str
    kind: str
    sender: str
    receiver: str
    nbytes: int
    deliveries: int = 1
    payload: Any = field(default=None, repr=False)

    def line(self) -> str:
        return f"{self.round}\t{self.phase}\t{self.kind}\t{self.sender}\t{self.receiver}\t{self.nbytes * self.deliveries}"


@dataclass
class OverheadReport:
    messages: Counter = field(default_factory=Counter)
    deliveries: Counter = field(default_factory=Counter)
    bytes: Counter = field(default_factory=Counter)
    phase_messages: Counter = field(default_factory=Counter)

    def add(self, msg: Message) -> None:
        self.messages[msg.kind] += 1
        self.deliveries[msg.kind] += msg.deliveries
        self.bytes[msg.kind] += msg.nbytes * msg.deliveries
        self.phase_messages[msg.phase] += 1

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def to_dict(self) -> dict:
        return {
            "messages": {k: self.messages[k] for k in KINDS if self.messages[k]},
            "deliveries": {k: self.deliveries[k] for k in KINDS if self.deliveries[k]},
            "bytes": {k: self.bytes[k] for k in KINDS if self.bytes[k]},
            "phase_messages": dict(sorted(self.phase_messages.items())),
            "total_messages": self.total_messages,
            "total_bytes": self.total_bytes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def __eq__(self, other) -> bool:
        return isinstance(other, OverheadReport) and self.to_dict() == other.to_dict()


def overhead_report_merge(reports: Iterable[OverheadReport]) -> OverheadReport:
    out = OverheadReport()
    for r in reports:
        out.messages.update(r.messages)
        out.deliveries.update(r.deliveries)
        out.bytes.update(r.bytes)
        out.phase_messages.update(r.phase_messages)
    return out


class MessageBus:
    """Ordered in-process delivery with a transcript and running overhead totals."""

    def __init__(self, round_index: int = 0):
        self.round = round_index
        self.transcript: list[Message] = []
        self.report = OverheadReport()

    def send(self, phase, kind, sender, receiver, payload, deliveries: int = 1) -> Message:
        if kind not in KINDS:
            raise ValueError(f"unknown message kind {kind!r}")
        msg = Message(self.round, phase, kind, sender, receiver, _nbytes(payload), deliveries, payload)
        self.transcript.append(msg)
        self.report.add(msg)
        return msg

    def transcript_lines(self) -> list[str]:
        return [m.line() for m in self.transcript]


def _nbytes(payload) -> int:
    if isinstance(payload, paillier.EncryptedVector):
        return payload.nbytes
    return int(payload.nbytes)


def audit_server_view(transcript: Sequence[Message]) -> list[Message]:
    """Messages reaching the server whose payload is not ciphertext or metadata."""
    bad = []
    for m in transcript:
        if m.receiver not in (SERVER, "all"):
            continue
        p = m.payload
        if not isinstance(p, SERVER_VISIBLE):
            bad.append(m)
        elif isinstance(p, KeyMaterial) and p.secret_key is not None and m.receiver == SERVER:
            bad.append(m)
    return bad


# --------------------------------------------------------------------------
# keys and encryption helpers
# --------------------------------------------------------------------------

def _py_rng(seed, *keys) -> random.Random:
    state = np.random.SeedSequence(seed, spawn_key=(_CRYPTO_STREAM,) + tuple(keys)).generate_state(4, dtype=np.uint64)
    return random.Random(int.from_bytes(state.tobytes(), "little"))


@dataclass
class Session:
    """Key material for one registration period."""

    key_bits: int
    crypto: str
    agent: int
    public_key: Any = None
    secret_key: Any = None
    rng: random.Random | None = None

    def parties(self, N: int) -> tuple[Party, ...]:
        """Key holders for this session: the server has the public key only."""
        server = (Party("server"),)
        return server + tuple(Party("agent" if k == self.agent else "client", k, True) for k in range(N))

    def ciphertext_vector_bytes(self, length: int) -> int:
        return paillier.VECTOR_HEADER_BYTES + length * (2 * self.key_bits // 8)

    def encrypt(self, values) -> Any:
        if self.crypto == "full":
            return paillier.encrypt_vector(self.public_key, values, self.rng)
        return SizedCiphertextVector(len(values), self.ciphertext_vector_bytes(len(values)))

    def fold(self, vectors: list) -> Any:
        if self.crypto == "full":
            return paillier.sum_vectors(self.public_key, vectors)
        return SizedCiphertextVector(vectors[0].length, vectors[0].nbytes)

    def decrypt(self, vec, plain: np.ndarray) -> np.ndarray:
        if self.crypto == "full":
            return np.array(paillier.decrypt_vector(self.secret_key, vec), dtype=np.int64)
        # sized mode carries no ciphertext; the agent's view is the plaintext sum
        return plain


def open_session(N: int, key_bits: int, seed, round_index: int, bus: MessageBus, crypto: str = "full",
                 phase: str = "registration") -> Session:
    """Pick the agent, generate keys and dispatch them."""
    if crypto not in ("full", "sized"):
        raise ValueError("crypto must be 'full' or 'sized'")
    agent = int(sub_rng(seed, _AGENT_STREAM, round_index).integers(N))
    sess = Session(key_bits, crypto, agent, rng=_py_rng(seed, round_index))
    if crypto == "full":
        sess.public_key, sess.secret_key = paillier.keygen(key_bits, sess.rng, insecure=key_bits < paillier.MIN_SECURE_BITS)
    width = key_bits // 8
    a = client_name(agent)
    bus.send(phase, "KeyDispatch", a, SERVER, KeyMaterial(sess.public_key, None, width))
    for k in range(N):
        if k != agent:
            bus.send(phase, "KeyDispatch", a, client_name(k), KeyMaterial(sess.public_key, sess.secret_key, 3 * width))
    return sess


# --------------------------------------------------------------------------
# protocol phases
# --------------------------------------------------------------------------

@dataclass
class RegistrationResult:
    aggregate: AggregateRegistry
    slots: np.ndarray
    session: Session
    report: OverheadReport
    transcript: list[Message]


def _register_and_aggregate(counts, scheme, sess: Session, bus: MessageBus, phase: str):
    N = counts.shape[0]
    slots = register_all(counts, scheme)
    uploads = []
    for k in range(N):
        bits = np.zeros(scheme.length, dtype=np.int64)
        bits[slots[k]] = 1
        uploads.append(bus.send(phase, "RegistryUpload", client_name(k), SERVER, sess.encrypt(bits)).payload)
    folded = sess.fold(uploads)
    bus.send(phase, "AggregateBroadcast", SERVER, "all", folded, deliveries=N)
    plain = aggregate_slots(slots, scheme.length).counts
    # every client decrypts the same broadcast; one decryption stands for all
    decrypted = sess.decrypt(folded, plain)
    return AggregateRegistry(decrypted), slots


def run_registration_round(
    dataset: FederationDataset | np.ndarray,
    scheme: RegistryScheme,
    key_bits: int,
    seed,
    round_index: int = 0,
    crypto: str = "full",
) -> RegistrationResult:
    counts = dataset.counts if isinstance(dataset, FederationDataset) else np.asarray(dataset)
    bus = MessageBus(round_index)
    sess = open_session(counts.shape[0], key_bits, seed, round_index, bus, crypto)
    agg, slots = _register_and_aggregate(counts, scheme, sess, bus, "registration")
    return RegistrationResult(agg, slots, sess, bus.report, bus.transcript)


def _encrypted_tries(counts, K, H, tentative, seed, keys, sess: Session, bus: MessageBus, phase: str):
    """Run H tries; the agent returns per-try population distributions."""
    N = counts.shape[0]
    a = client_name(sess.agent)
    tries = []
    for h in range(H):
        rng = sub_rng(seed, *keys, h)
        opted = tentative(rng)
        for k in opted:
            bus.send(phase, "SelectionNotice", client_name(int(k)), SERVER, IdList((int(k),)))
        S = fix_cardinality(opted, K, N, rng)
        bus.send(phase, "SelectionNotice", SERVER, "all", IdList(tuple(int(k) for k in S)), deliveries=len(S))
        uploads = [
            bus.send(phase, "DistributionUpload", client_name(int(k)), SERVER, sess.encrypt(counts[k])).payload
            for k in S
        ]
        folded = sess.fold(uploads)
        bus.send(phase, "AggregateDistribution", SERVER, a, folded)
        summed = sess.decrypt(folded, counts[S].sum(axis=0))
        tries.append((S, summed / summed.sum()))
    return tries


def run_selection_round(
    registration: RegistrationResult,
    dataset: FederationDataset | np.ndarray,
    config: SelectionConfig,
    round_index: int = 0,
) -> tuple[SelectionOutcome, OverheadReport, list[Message]]:
    """Multi-time selection over encrypted class counts.

    Tries use the streams ``sub_rng(config.seed, round_index, h)``, the same
    as ``multi_time_select(selector, counts, H, seed, round_index)``.
    """
    counts = dataset.counts if isinstance(dataset, FederationDataset) else np.asarray(dataset)
    N = counts.shape[0]
    K, H = config.K, config.H
    if config.strategy == "dubhe":
        if K >= registration.aggregate.support:
            warnings.warn(f"K={K} >= registry support {registration.aggregate.support}", ClampWarning, stacklevel=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ClampWarning)
            probs = participation_probabilities(registration.slots, registration.aggregate, K)
        tentative = lambda rng: draw_dubhe(probs, rng)  # noqa: E731
    elif config.strategy == "random":
        tentative = lambda rng: select_random(N, K, rng)  # noqa: E731
    else:
        raise ValueError("greedy selection needs plaintext histograms and cannot run under the protocol")

    bus = MessageBus(round_index)
    sess = registration.session
    tries = _encrypted_tries(counts, K, H, tentative, config.seed, (round_index,), sess, bus, "selection")
    emds = [float(np.abs(p - 1.0 / counts.shape[1]).sum()) for _, p in tries]
    best = min(range(H), key=lambda h: (emds[h], h))
    bus.send("selection", "SelectionNotice", client_name(sess.agent), SERVER, Verdict(best))
    S, p_o = tries[best]
    bus.send("selection", "SelectionNotice", SERVER, "all", IdList(tuple(int(k) for k in S)), deliveries=len(S))
    outcome = SelectionOutcome(selected=S, p_o=p_o, emd_star=emds[best], tries_used=H, try_emds=emds, best_try=best)
    return outcome, bus.report, bus.transcript


def run_parameter_search_phase(
    dataset: FederationDataset | np.ndarray,
    scheme: RegistryScheme,
    grid: Sequence[Sequence[float]] | None,
    H: int,
    K: int,
    seed,
    key_bits: int = 2048,
    crypto: str = "full",
    round_index: int = 0,
) -> tuple[tuple[float, ...], OverheadReport, list[SearchPoint], list[Message]]:
    """Threshold search where the agent scores grid points and only reveals the winner.

    Matches ``selection.parameter_search(counts, scheme, grid, H, K, seed)``.
    """
    counts = dataset.counts if isinstance(dataset, FederationDataset) else np.asarray(dataset)
    N, C = counts.shape
    grid = default_grid(scheme) if grid is None else list(grid)
    bus = MessageBus(round_index)
    sess = open_session(N, key_bits, seed, round_index, bus, crypto, phase="search")
    points = []
    for sigma in grid:
        try:
            cand = scheme.with_sigma(sigma)
        except ValueError:
            continue
        bus.send("search", "ParamDispatch", SERVER, "all", Thresholds(cand.sigma), deliveries=N)
        agg, slots = _register_and_aggregate(counts, cand, sess, bus, "search")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ClampWarning)
            sel = DubheSelector(slots, agg, K)
        tries = _encrypted_tries(counts, K, H, sel.tentative, seed, (), sess, bus, "search")
        mean = np.mean([p for _, p in tries], axis=0)
        points.append(SearchPoint(cand.sigma, float(np.abs(mean - 1.0 / C).sum()), agg.support, mean.tolist()))
    if not points:
        raise ValueError("no valid point in the parameter grid")
    best = min(range(len(points)), key=lambda i: (points[i].score, i))
    bus.send("search", "SelectionNotice", client_name(sess.agent), SERVER, Verdict(best))
    return points[best].sigma, bus.report, points, bus.transcript
