"""Paillier cryptosystem with ``g = n + 1``.

Ciphertexts of count vectors are added by multiplying modulo ``n**2``;
only holders of the secret key can read the sums. Everything here is pure
Python integer arithmetic.

Wire format (big-endian throughout)::

    ciphertext  := value as a fixed-width byte string, width = 2 * bits / 8
    vector      := uint32 element count || ciphertext * count

so a vector of ``L`` elements under a ``bits``-bit key is exactly
``4 + L * bits / 4`` bytes.
"""

from __future__ import annotations

import math
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MILLER_RABIN_ROUNDS = 40
PRIME_SEARCH_LIMIT = 10_000
MIN_SECURE_BITS = 1024
VECTOR_HEADER_BYTES = 4

_SMALL_PRIMES = [p for p in range(3, 2000, 2) if all(p % d for d in range(3, int(p**0.5) + 1, 2))]


class PaillierError(ValueError):
    """Malformed key, message or ciphertext."""


# --------------------------------------------------------------------------
# primes
# --------------------------------------------------------------------------

def is_probable_prime(n: int, rng=None, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Miller-Rabin test with ``rounds`` random bases."""
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or secrets.SystemRandom()
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng=None, max_tries: int = PRIME_SEARCH_LIMIT) -> int:
    """Random prime with exactly ``bits`` bits and its top two bits set.

    Setting the two top bits guarantees that the product of two such primes
    has exactly ``2 * bits`` bits.
    """
    if bits < 8:
        raise PaillierError("prime size must be at least 8 bits")
    rng = rng or secrets.SystemRandom()
    for _ in range(max_tries):
        cand = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if is_probable_prime(cand, rng):
            return cand
    raise PaillierError(f"no {bits}-bit prime found in {max_tries} candidates")


# --------------------------------------------------------------------------
# keys and ciphertexts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    bit_length: int
    n_squared: int = field(init=False, repr=False)
    g: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.n.bit_length() != self.bit_length:
            raise PaillierError(f"modulus has {self.n.bit_length()} bits, expected {self.bit_length}")
        object.__setattr__(self, "n_squared", self.n * self.n)
        object.__setattr__(self, "g", self.n + 1)

    @property
    def ciphertext_bytes(self) -> int:
        """Fixed serialized width of one ciphertext."""
        return (2 * self.bit_length + 7) // 8


@dataclass(frozen=True)
class PaillierSecretKey:
    lam: int
    mu: int
    public_key: PaillierPublicKey = field(repr=False)


@dataclass(frozen=True)
class Ciphertext:
    value: int
    public_key: PaillierPublicKey = field(repr=False, compare=False)

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        return add_ciphertexts(self.public_key, self, other)


@dataclass(frozen=True)
class EncryptedVector:
    items: tuple[Ciphertext, ...]
    public_key: PaillierPublicKey = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __add__(self, other: "EncryptedVector") -> "EncryptedVector":
        return add_vectors(self.public_key, self, other)

    @property
    def nbytes(self) -> int:
        return ciphertext_serialized_size(self.public_key, len(self.items))


def _keys_from_primes(p: int, q: int, bit_length: int | None = None):
    if p == q:
        raise PaillierError("primes must be distinct")
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise PaillierError("gcd(pq, (p-1)(q-1)) != 1")
    pk = PaillierPublicKey(n=n, bit_length=bit_length or n.bit_length())
    lam = math.lcm(p - 1, q - 1)
    # with g = n + 1, L(g^lam mod n^2) = lam mod n
    mu = pow(lam % n, -1, n)
    return pk, PaillierSecretKey(lam=lam, mu=mu, public_key=pk)


def keypair_from_primes(p: int, q: int):
    """Build a keypair from explicit primes. Test constructor; no primality check."""
    return _keys_from_primes(p, q)


def keygen(bit_length: int = 2048, rng=None, insecure: bool = False):
    """Generate ``(public_key, secret_key)`` with an exactly ``bit_length``-bit modulus.

    Keys below 1024 bits are refused unless ``insecure`` is set. ``rng`` is any
    object with ``getrandbits``/``randrange`` (``random.Random`` for
    reproducible test keys); default is the OS source.
    """
    if bit_length < 64 or bit_length % 2:
        raise PaillierError("bit_length must be an even number >= 64")
    if bit_length < MIN_SECURE_BITS and not insecure:
        raise PaillierError(f"{bit_length}-bit keys are insecure; pass insecure=True for testing")
    rng = rng or secrets.SystemRandom()
    half = bit_length // 2
    p = random_prime(half, rng)
    for _ in range(PRIME_SEARCH_LIMIT):
        q = random_prime(half, rng)
        if q != p and math.gcd(p * q, (p - 1) * (q - 1)) == 1:
            return _keys_from_primes(p, q, bit_length)
    raise PaillierError("could not find a second distinct prime")


def _random_unit(pk: PaillierPublicKey, rng) -> int:
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


def encrypt(pk: PaillierPublicKey, m: int, rng=None, r: int | None = None) -> Ciphertext:
    """Encrypt ``0 <= m < n``. ``r`` pins the blinding factor (tests only)."""
    if not isinstance(m, int) or isinstance(m, bool):
        m = int(m)
    if m < 0 or m >= pk.n:
        raise PaillierError(f"message {m} outside [0, n)")
    if r is None:
        r = _random_unit(pk, rng or secrets.SystemRandom())
    elif math.gcd(r, pk.n) != 1:
        raise PaillierError("blinding factor must be coprime to n")
    nsq = pk.n_squared
    # (n + 1)^m = 1 + m n (mod n^2)
    gm = (1 + m * pk.n) % nsq
    return Ciphertext((gm * pow(r, pk.n, nsq)) % nsq, pk)


def decrypt(sk: PaillierSecretKey, c: Ciphertext) -> int:
    pk = sk.public_key
    if c.public_key.n != pk.n:
        raise PaillierError("ciphertext was produced under a different key")
    if not 0 < c.value < pk.n_squared or math.gcd(c.value, pk.n_squared) != 1:
        raise PaillierError("corrupted ciphertext: not a unit modulo n^2")
    x = pow(c.value, sk.lam, pk.n_squared)
    return ((x - 1) // pk.n) * sk.mu % pk.n


def add_ciphertexts(pk: PaillierPublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.public_key.n != pk.n or b.public_key.n != pk.n:
        raise PaillierError("ciphertexts under mismatched keys")
    return Ciphertext(a.value * b.value % pk.n_squared, pk)


def encrypt_vector(pk: PaillierPublicKey, values: Iterable[int], rng=None) -> EncryptedVector:
    rng = rng or secrets.SystemRandom()
    return EncryptedVector(tuple(encrypt(pk, int(v), rng) for v in values), pk)


def decrypt_vector(sk: PaillierSecretKey, vec: EncryptedVector) -> list[int]:
    return [decrypt(sk, c) for c in vec.items]


def add_vectors(pk: PaillierPublicKey, a: EncryptedVector, b: EncryptedVector) -> EncryptedVector:
    if len(a) != len(b):
        raise PaillierError(f"length mismatch: {len(a)} vs {len(b)}")
    return EncryptedVector(tuple(add_ciphertexts(pk, x, y) for x, y in zip(a.items, b.items)), pk)


def sum_vectors(pk: PaillierPublicKey, vectors: Sequence[EncryptedVector]) -> EncryptedVector:
    """Fold ``add_vectors`` over a non-empty sequence."""
    if not vectors:
        raise PaillierError("nothing to sum")
    length = len(vectors[0])
    nsq = pk.n_squared
    acc = [1] * length
    for vec in vectors:
        if len(vec) != length:
            raise PaillierError(f"length mismatch: {len(vec)} vs {length}")
        if vec.public_key.n != pk.n:
            raise PaillierError("ciphertexts under mismatched keys")
        for j, c in enumerate(vec.items):
            acc[j] = acc[j] * c.value % nsq
    return EncryptedVector(tuple(Ciphertext(v, pk) for v in acc), pk)


# --------------------------------------------------------------------------
# serialization and size accounting
# --------------------------------------------------------------------------

def ciphertext_serialized_size(pk: PaillierPublicKey, length: int) -> int:
    """Exact wire size in bytes of an encrypted vector of ``length`` elements."""
    return VECTOR_HEADER_BYTES + length * pk.ciphertext_bytes


def python_object_size(pk: PaillierPublicKey, length: int) -> int:
    """In-memory footprint of ``length`` ciphertext ints on 64-bit CPython.

    A CPython int stores 30-bit digits in 4 bytes each behind a 24-byte
    header. This is how ciphertext sizes are usually quoted by Python
    tooling (``sys.getsizeof``), as opposed to the wire format above.
    """
    digits = -(-2 * pk.bit_length // 30)
    return length * (24 + 4 * digits)


def serialize_ciphertext(c: Ciphertext) -> bytes:
    return c.value.to_bytes(c.public_key.ciphertext_bytes, "big")


def deserialize_ciphertext(pk: PaillierPublicKey, data: bytes) -> Ciphertext:
    if len(data) != pk.ciphertext_bytes:
        raise PaillierError(f"expected {pk.ciphertext_bytes} bytes, got {len(data)}")
    return Ciphertext(int.from_bytes(data, "big"), pk)


def serialize_vector(vec: EncryptedVector) -> bytes:
    parts = [struct.pack(">I", len(vec))]
    parts.extend(serialize_ciphertext(c) for c in vec.items)
    return b"".join(parts)


def deserialize_vector(pk: PaillierPublicKey, data: bytes) -> EncryptedVector:
    (length,) = struct.unpack_from(">I", data)
    width = pk.ciphertext_bytes
    if len(data) != VECTOR_HEADER_BYTES + length * width:
        raise PaillierError("vector byte length does not match its header")
    items = tuple(
        deserialize_ciphertext(pk, data[VECTOR_HEADER_BYTES + i * width:VECTOR_HEADER_BYTES + (i + 1) * width])
        for i in range(length)
    )
    return EncryptedVector(items, pk)
