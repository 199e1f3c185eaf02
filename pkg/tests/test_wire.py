import pytest
from hypothesis import given
import hypothesis.strategies as st

from pufkex.primitives import DeviceId, SeededRng, Word256
from pufkex.wire import (
    MESSAGE_TYPES,
    AuthChallenge,
    ClientNonce,
    ConnEstablish,
    ConnReq,
    CrpRotate,
    DeviceNonce,
    MalformedMessage,
    RotateAck,
    decode,
    encode,
    payload_bits,
)

words = st.binary(min_size=32, max_size=32).map(Word256)
device_ids = st.integers(min_value=0, max_value=2**32 - 1).map(DeviceId)
session_ids = st.integers(min_value=0, max_value=2**32 - 1)


def random_message(cls, rng):
    kwargs = {}
    for name, hint in cls.__annotations__.items():
        if hint == "DeviceId":
            kwargs[name] = DeviceId(int.from_bytes(rng.bytes(4), "big"))
        else:
            kwargs[name] = rng.word()
    return cls(**kwargs)


@pytest.mark.parametrize("cls", MESSAGE_TYPES)
def test_roundtrip_every_variant(cls):
    rng = SeededRng(cls.TAG)
    for session_id in (0, 1, 0xFFFFFFFF):
        msg = random_message(cls, rng)
        assert decode(encode(msg, session_id)) == (msg, session_id)


@given(words, words, session_ids)
def test_roundtrip_client_nonce_property(a, b, session_id):
    msg = ClientNonce(nonce_masked=a, tag=b)
    assert decode(encode(msg, session_id)) == (msg, session_id)


@given(device_ids, device_ids, session_ids)
def test_roundtrip_conn_establish_property(dev, cli, session_id):
    msg = ConnEstablish(device_id=dev, client_id=cli)
    assert decode(encode(msg, session_id)) == (msg, session_id)


def test_payload_bit_sizes():
    assert payload_bits(ConnReq) == 32
    assert payload_bits(ConnEstablish) == 64
    assert payload_bits(AuthChallenge) == 1280
    assert payload_bits(CrpRotate) == 1024
    assert payload_bits(RotateAck) == 256
    assert payload_bits(ClientNonce) == 512
    assert payload_bits(DeviceNonce) == 512


def test_auth_challenge_frame_layout():
    rng = SeededRng(99)
    msg = random_message(AuthChallenge, rng)
    frame = encode(msg, 0x01020304)
    assert len(frame) == 1 + 4 + 160
    assert frame[0] == 0x03
    assert frame[1:5] == b"\x01\x02\x03\x04"
    assert frame[5:37] == bytes(msg.pad1_masked)
    assert frame[133:165] == bytes(msg.challenge)


def test_tags_are_sequential():
    assert [cls.TAG for cls in MESSAGE_TYPES] == list(range(1, 8))


def test_unknown_tag_rejected():
    frame = bytes([0x55]) + bytes(4) + bytes(32)
    with pytest.raises(MalformedMessage):
        decode(frame)


def test_truncated_frame_rejected():
    frame = encode(RotateAck(crp_digest=Word256.zero()), 7)
    for cut in (0, 3, 5, len(frame) - 1):
        with pytest.raises(MalformedMessage):
            decode(frame[:cut])


def test_oversized_frame_rejected():
    frame = encode(ConnReq(client_id=DeviceId(1)), 7)
    with pytest.raises(MalformedMessage):
        decode(frame + b"\x00")


def test_session_id_bounds():
    with pytest.raises(ValueError):
        encode(ConnReq(client_id=DeviceId(1)), 2**32)
    with pytest.raises(ValueError):
        encode(ConnReq(client_id=DeviceId(1)), -1)
