import pytest
from hypothesis import given
import hypothesis.strategies as st

from pufkex.primitives import (
    DeviceId,
    FixedWordsRng,
    SeededRng,
    SystemRng,
    Word256,
    ct_equal,
    derive_rng,
    hamming,
    hash256,
    hash_fields,
    xor256,
)

# Official SHA-256 test vectors (FIPS 180 examples).
SHA256_EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
SHA256_ABC = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

words = st.binary(min_size=32, max_size=32).map(Word256)


def test_hash256_official_vectors():
    assert hash256(b"").hex() == SHA256_EMPTY
    assert hash256(b"abc").hex() == SHA256_ABC


def test_hash256_deterministic():
    data = b"some protocol payload"
    assert hash256(data) == hash256(data)


def test_word256_length_enforced():
    with pytest.raises(ValueError):
        Word256(b"\x00" * 31)
    with pytest.raises(ValueError):
        Word256(b"\x00" * 33)
    assert len(Word256.zero()) == 32


def test_word256_int_roundtrip():
    w = Word256.from_int(0xDEADBEEF)
    assert w.to_int() == 0xDEADBEEF
    assert w[-4:] == b"\xde\xad\xbe\xef"


def test_device_id_range_and_serialization():
    assert DeviceId(0).to_bytes4() == b"\x00\x00\x00\x00"
    assert DeviceId(0x01020304).to_bytes4() == b"\x01\x02\x03\x04"
    with pytest.raises(ValueError):
        DeviceId(2**32)
    with pytest.raises(ValueError):
        DeviceId(-1)


def test_xor256_against_bytewise_oracle():
    rng = SeededRng(1)
    for _ in range(50):
        a, b = rng.word(), rng.word()
        oracle = bytes(x ^ y for x, y in zip(a, b))
        assert bytes(xor256(a, b)) == oracle


def test_xor256_known_pattern():
    a = Word256(b"\xff" * 32)
    b = Word256(b"\x0f" * 32)
    assert bytes(xor256(a, b)) == b"\xf0" * 32


@given(words, words, words)
def test_xor_group_laws(a, b, c):
    zero = Word256.zero()
    assert xor256(a, zero) == a
    assert xor256(a, a) == zero
    assert xor256(a, b) == xor256(b, a)
    assert xor256(xor256(a, b), c) == xor256(a, xor256(b, c))
    assert xor256(xor256(a, b), b) == a


def test_hash_fields_single_field_reduces_to_hash256():
    zero = Word256.zero()
    assert hash_fields([zero]) == hash256(bytes(32))


def test_hash_fields_order_sensitive():
    rng = SeededRng(7)
    a, b = rng.word(), rng.word()
    assert hash_fields([a, b]) != hash_fields([b, a])


def test_hash_fields_device_id_width():
    # A DeviceId contributes exactly 4 bytes, not 32.
    did = DeviceId(0x0A0B0C0D)
    w = Word256.zero()
    assert hash_fields([w, did]) == hash256(bytes(32) + b"\x0a\x0b\x0c\x0d")


def test_hash_fields_accepts_raw_octets():
    assert hash_fields([b"user", b"pass"]) == hash256(b"userpass")


def test_hash_fields_rejects_empty_and_bad_types():
    with pytest.raises(ValueError):
        hash_fields([])
    with pytest.raises(TypeError):
        hash_fields([42])


# Golden digest: pins the multi-field input encoding. Computed once from
# the fixed-width concatenation rule; any encoding change breaks this.
def test_hash_fields_golden_vector():
    fields = [
        Word256.from_int(1),
        Word256.from_int(2),
        Word256.from_int(3),
        Word256.from_int(4),
        Word256.from_int(5),
    ]
    concat = b"".join(bytes(f) for f in fields)
    assert hash_fields(fields) == hash256(concat)
    assert hash_fields(fields).hex() == (
        "3f88c1044a05e5340ed20466276500f6d45ca5603913b9091e957161734e1635"
    )


def test_ct_equal_basic():
    rng = SeededRng(3)
    a = rng.word()
    assert ct_equal(a, Word256(bytes(a)))
    flipped_last = bytearray(a)
    flipped_last[-1] ^= 0x01
    assert not ct_equal(a, bytes(flipped_last))
    flipped_first = bytearray(a)
    flipped_first[0] ^= 0x80
    assert not ct_equal(a, bytes(flipped_first))


def test_hamming():
    a = Word256.zero()
    b = Word256.from_int(0b1011)
    assert hamming(a, b) == 3
    assert hamming(a, a) == 0
    assert hamming(Word256(b"\xff" * 32), Word256.zero()) == 256


def test_system_rng_distinct_draws():
    rng = SystemRng()
    assert rng.word() != rng.word()


def test_seeded_rng_reproducible():
    assert SeededRng(42).word() == SeededRng(42).word()
    a = SeededRng(42)
    b = SeededRng(43)
    assert a.word() != b.word()


def test_seeded_rng_stream_advances():
    rng = SeededRng(5)
    assert rng.word() != rng.word()


def test_derive_rng_labels_independent():
    assert derive_rng(9, "server").word() != derive_rng(9, "device").word()
    assert derive_rng(9, "server").word() == derive_rng(9, "server").word()


def test_rng_bit_balance():
    # 10,000 words, per-bit ones-frequency. Seed fixed, so this is a
    # deterministic check that the stream is unbiased (~4 sigma bound).
    rng = SeededRng(2024)
    counts = [0] * 256
    n = 10_000
    for _ in range(n):
        w = rng.word().to_int()
        for bit in range(256):
            counts[bit] += (w >> bit) & 1
    freqs = [c / n for c in counts]
    assert min(freqs) >= 0.48
    assert max(freqs) <= 0.52


def test_randrange_uniformity_and_bounds():
    rng = SeededRng(11)
    draws = [rng.randrange(96) for _ in range(5000)]
    assert min(draws) >= 0
    assert max(draws) <= 95
    # Every residue should appear; expected count ~52 per value.
    assert len(set(draws)) == 96


def test_fixed_words_rng_scripted_then_fallback():
    scripted = Word256.from_int(1)
    rng = FixedWordsRng([scripted], fallback=SeededRng(1))
    assert rng.word() == scripted
    assert rng.word() == SeededRng(1).word()
