"""Fixed-width building blocks: 256-bit words, hashing, XOR, randomness.

Every challenge, response, nonce, digest and masked protocol field is a
Word256; device and client identifiers are 32-bit DeviceIds. Multi-field
hashing concatenates fixed-width serializations, so no separators are
needed and golden digests are stable across builds.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets

__all__ = [
    "Word256",
    "DeviceId",
    "hash256",
    "hash_fields",
    "xor256",
    "ct_equal",
    "hamming",
    "Rng",
    "SystemRng",
    "SeededRng",
    "FixedWordsRng",
    "derive_rng",
]

WORD_BYTES = 32
DEVICE_ID_BYTES = 4


class Word256(bytes):
    """An immutable 256-bit value, big-endian bit order."""

    def __new__(cls, data: bytes) -> "Word256":
        if len(data) != WORD_BYTES:
            raise ValueError(f"Word256 requires exactly {WORD_BYTES} bytes, got {len(data)}")
        return super().__new__(cls, data)

    @classmethod
    def zero(cls) -> "Word256":
        return cls(bytes(WORD_BYTES))

    @classmethod
    def from_int(cls, value: int) -> "Word256":
        return cls(value.to_bytes(WORD_BYTES, "big"))

    @classmethod
    def from_hex(cls, text: str) -> "Word256":
        return cls(bytes.fromhex(text))

    def to_int(self) -> int:
        return int.from_bytes(self, "big")

    def __xor__(self, other: bytes) -> "Word256":
        if len(other) != WORD_BYTES:
            raise ValueError("XOR requires two 256-bit words")
        return Word256(bytes(a ^ b for a, b in zip(self, other)))

    __rxor__ = __xor__

    def __repr__(self) -> str:
        return f"Word256({self.hex()[:16]}…)"


class DeviceId(int):
    """32-bit unsigned identifier, serialized as 4 big-endian bytes."""

    def __new__(cls, value: int) -> "DeviceId":
        if not 0 <= value < 2**32:
            raise ValueError(f"device id out of 32-bit range: {value}")
        return super().__new__(cls, value)

    def to_bytes4(self) -> bytes:
        return int(self).to_bytes(DEVICE_ID_BYTES, "big")

    def __repr__(self) -> str:
        return f"DeviceId(0x{int(self):08x})"


def hash256(data: bytes) -> Word256:
    """SHA-256 digest as a Word256."""
    return Word256(hashlib.sha256(data).digest())


def _serialize_field(field) -> bytes:
    if isinstance(field, Word256):
        return bytes(field)
    if isinstance(field, DeviceId):
        return field.to_bytes4()
    if isinstance(field, (bytes, bytearray)):
        # Raw octets pass through unchanged (used for credentials at
        # registration, where lengths are caller-controlled).
        return bytes(field)
    raise TypeError(f"unhashable field type: {type(field).__name__}")


def hash_fields(fields) -> Word256:
    """Hash an ordered list of fields via fixed-width concatenation.

    Word256 contributes 32 bytes, DeviceId 4 bytes, raw octet strings
    pass through as-is. Within one arity the encoding is prefix-free, so
    distinct field lists yield distinct inputs.
    """
    if not fields:
        raise ValueError("hash_fields requires at least one field")
    h = hashlib.sha256()
    for field in fields:
        h.update(_serialize_field(field))
    return Word256(h.digest())


def xor256(a: Word256, b: Word256) -> Word256:
    """Bitwise XOR of two 256-bit words."""
    return a ^ b


def ct_equal(a: bytes, b: bytes) -> bool:
    """Constant-time equality; every byte is examined regardless of mismatch position."""
    return hmac.compare_digest(a, b)


def hamming(a: bytes, b: bytes) -> int:
    """Number of differing bits between two equal-length byte strings."""
    if len(a) != len(b):
        raise ValueError("hamming distance requires equal lengths")
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).bit_count()


class Rng:
    """Source of random words and bytes. Subclasses supply the stream."""

    def bytes(self, n: int) -> bytes:
        raise NotImplementedError

    def word(self) -> Word256:
        return Word256(self.bytes(WORD_BYTES))

    def uniform(self) -> float:
        """Float in [0, 1) with 64 bits of precision."""
        return int.from_bytes(self.bytes(8), "big") / 2**64

    def bit(self) -> int:
        return self.bytes(1)[0] & 1

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("randrange requires n >= 1")
        nbytes = (n.bit_length() + 7) // 8
        limit = (256**nbytes // n) * n
        while True:
            v = int.from_bytes(self.bytes(nbytes), "big")
            if v < limit:
                return v % n


class SystemRng(Rng):
    """Cryptographically secure randomness from the operating system."""

    def bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class SeededRng(Rng):
    """Deterministic stream: SHA-256 over (seed digest, block counter).

    Used wherever a run must be reproducible: chip fabrication, read
    noise, and the protocol randoms in seeded scenarios. Stable across
    platforms and Python versions, unlike random.Random.
    """

    def __init__(self, seed: int | bytes | str):
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=False) if seed >= 0 else str(seed).encode()
        elif isinstance(seed, str):
            seed = seed.encode()
        self._key = hashlib.sha256(seed).digest()
        self._counter = 0
        self._buffer = b""

    def bytes(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out


class FixedWordsRng(Rng):
    """Yields a scripted sequence of words, then falls back to another rng.

    Test rig for forcing degenerate protocol randoms (e.g. an all-zero
    pad) without touching role internals.
    """

    def __init__(self, words, fallback: Rng | None = None):
        self._words = list(words)
        self._fallback = fallback if fallback is not None else SystemRng()

    def word(self) -> Word256:
        if self._words:
            return self._words.pop(0)
        return self._fallback.word()

    def bytes(self, n: int) -> bytes:
        if self._words and n == WORD_BYTES:
            return bytes(self.word())
        return self._fallback.bytes(n)


def derive_rng(seed: int, label: str) -> SeededRng:
    """Independent deterministic stream for one named role under a scenario seed."""
    return SeededRng(seed.to_bytes(16, "big", signed=True) + b"/" + label.encode())
