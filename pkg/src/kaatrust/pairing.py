"""Bilinear pairing groups with an exact reference backend.

The reference backend stores every element of G1 and G2 as its discrete
logarithm modulo the group order ``q``.  With that representation the
pairing is simply ``e(aP, bP) = g^(ab)``, which is cryptographically
worthless but makes every protocol equation checkable with exact integer
arithmetic.  A real curve backend would provide the same element types.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

__all__ = [
    "Backend",
    "PairingParams",
    "G1Element",
    "G2Element",
    "ParameterMismatch",
    "DecodeError",
    "DEFAULT_PARAMS",
    "ELEMENT_SIZE",
    "pairing",
    "g1_scalar_mul",
    "g1_add",
    "g2_exp",
    "g2_mul",
    "hash_to_g1",
    "hash_g2_to_mask",
    "encode_scalar",
    "decode_scalar",
]

# 2^127 - 1, a Mersenne prime.
DEFAULT_Q = (1 << 127) - 1

H1_PREFIX = b"\x01"
H2_PREFIX = b"\x02"

# 1 tag byte + 16 value bytes
VALUE_BYTES = 16
ELEMENT_SIZE = 1 + VALUE_BYTES


class Backend(enum.IntEnum):
    REFERENCE = 0x01


class ParameterMismatch(ValueError):
    """Raised when elements from different pairing parameters are combined."""


class DecodeError(ValueError):
    """Raised when a byte string is not a valid element encoding."""


def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % small == 0:
            return n == small
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    # Deterministic for n < 3.3e24; probabilistic-but-negligible beyond.
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class PairingParams:
    q: int = DEFAULT_Q
    backend_id: Backend = Backend.REFERENCE

    def __post_init__(self):
        if self.q <= 3 or not _is_probable_prime(self.q):
            raise ValueError(f"group order must be a prime > 3, got {self.q}")
        if self.q >= 1 << (8 * VALUE_BYTES):
            raise ValueError("group order does not fit the 16-byte element encoding")

    @property
    def generator(self) -> G1Element:
        return G1Element(1, self)

    @property
    def zero(self) -> G1Element:
        return G1Element(0, self)

    @property
    def g2_identity(self) -> G2Element:
        return G2Element(0, self)

    def scalar(self, value: int) -> int:
        return value % self.q

    def decode_g1(self, data: bytes) -> G1Element:
        return G1Element(self._decode(data), self)

    def decode_g2(self, data: bytes) -> G2Element:
        return G2Element(self._decode(data), self)

    def _decode(self, data: bytes) -> int:
        if len(data) != ELEMENT_SIZE:
            raise DecodeError(f"element encoding must be {ELEMENT_SIZE} bytes, got {len(data)}")
        if data[0] != self.backend_id:
            raise DecodeError(f"unknown backend tag 0x{data[0]:02x}")
        value = int.from_bytes(data[1:], "big")
        if value >= self.q:
            raise DecodeError("element value out of range")
        return value


DEFAULT_PARAMS = PairingParams()


class _Element:
    __slots__ = ("value", "params")

    def __init__(self, value: int, params: PairingParams):
        self.value = value % params.q
        self.params = params

    def _check(self, other) -> None:
        if not isinstance(other, type(self)):
            raise TypeError(f"expected {type(self).__name__}, got {type(other).__name__}")
        if other.params != self.params:
            raise ParameterMismatch("elements belong to different pairing parameters")

    def __eq__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        return self.value == other.value and self.params == other.params

    def __hash__(self):
        return hash((type(self).__name__, self.value, self.params))

    def __repr__(self):
        return f"{type(self).__name__}(0x{self.value:032x})"

    def to_bytes(self) -> bytes:
        return bytes([self.params.backend_id]) + self.value.to_bytes(VALUE_BYTES, "big")


class G1Element(_Element):
    """Additive group element; reference value is the discrete log w.r.t. P."""

    __slots__ = ()

    def __add__(self, other: G1Element) -> G1Element:
        self._check(other)
        return G1Element(self.value + other.value, self.params)

    def __neg__(self) -> G1Element:
        return G1Element(-self.value, self.params)

    def __sub__(self, other: G1Element) -> G1Element:
        return self + (-other)

    def __rmul__(self, scalar: int) -> G1Element:
        if not isinstance(scalar, int):
            return NotImplemented
        return G1Element(scalar * self.value, self.params)

    __mul__ = __rmul__

    def is_zero(self) -> bool:
        return self.value == 0


class G2Element(_Element):
    """Multiplicative group element; reference value is the log w.r.t. g."""

    __slots__ = ()

    def __mul__(self, other: G2Element) -> G2Element:
        self._check(other)
        return G2Element(self.value + other.value, self.params)

    def __pow__(self, exponent: int) -> G2Element:
        return G2Element(exponent * self.value, self.params)

    def inverse(self) -> G2Element:
        return G2Element(-self.value, self.params)

    def is_identity(self) -> bool:
        return self.value == 0


def pairing(r: G1Element, s: G1Element) -> G2Element:
    """e(R, S).  Symmetric, bilinear, and e(P, P) = g != 1."""
    r._check(s)
    return G2Element(r.value * s.value, r.params)


def g1_scalar_mul(a: int, r: G1Element) -> G1Element:
    return a * r


def g1_add(r: G1Element, s: G1Element) -> G1Element:
    return r + s


def g2_exp(x: G2Element, a: int) -> G2Element:
    return x ** a


def g2_mul(x: G2Element, y: G2Element) -> G2Element:
    return x * y


def hash_to_g1(data: bytes, params: PairingParams = DEFAULT_PARAMS) -> G1Element:
    """Map arbitrary bytes into the order-q subgroup (H1)."""
    digest = hashlib.sha256(H1_PREFIX + bytes(data)).digest()
    return int.from_bytes(digest, "big") * params.generator


def hash_g2_to_mask(x: G2Element, out_len: int) -> bytes:
    """Expand a G2 element into ``out_len`` pseudo-random bytes (H2).

    Counter-mode SHA-256, so a shorter output is always a prefix of a longer
    one for the same input.
    """
    if out_len < 1:
        raise ValueError("out_len must be at least 1")
    seed = H2_PREFIX + x.to_bytes()
    blocks = []
    for counter in range((out_len + 31) // 32):
        blocks.append(hashlib.sha256(seed + counter.to_bytes(4, "big")).digest())
    return b"".join(blocks)[:out_len]


def encode_scalar(a: int, params: PairingParams = DEFAULT_PARAMS) -> bytes:
    return bytes([params.backend_id]) + (a % params.q).to_bytes(VALUE_BYTES, "big")


def decode_scalar(data: bytes, params: PairingParams = DEFAULT_PARAMS) -> int:
    return params._decode(data)
