"""Wire codec for the seven handshake messages.

Frame layout: 1-byte message tag, 4-byte big-endian session identifier,
then the payload fields at fixed widths in declaration order. Word
fields are 32 bytes, identifiers 4 bytes; there are no separators, so
every frame length is fixed per tag and decode(encode(m)) == m.

Field naming follows function, not transcript position: a `*_masked`
field is a secret XORed with a one-time mask the legitimate peer can
reconstruct, and a `*tag` field is a hash binding the frame to session
secrets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

from .primitives import DeviceId, Word256

__all__ = [
    "MalformedMessage",
    "ConnReq",
    "ConnEstablish",
    "AuthChallenge",
    "CrpRotate",
    "RotateAck",
    "ClientNonce",
    "DeviceNonce",
    "WireMessage",
    "MESSAGE_TYPES",
    "encode",
    "decode",
    "payload_bits",
]


class MalformedMessage(Exception):
    """Frame cannot be parsed: unknown tag, bad length, or truncation."""


@dataclass(frozen=True)
class ConnReq:
    """Client opens the handshake toward the device."""

    TAG = 0x01
    client_id: DeviceId


@dataclass(frozen=True)
class ConnEstablish:
    """Device announces itself and echoes the requesting client."""

    TAG = 0x02
    device_id: DeviceId
    client_id: DeviceId


@dataclass(frozen=True)
class AuthChallenge:
    """Server-built challenge: two masked pads, masked alias, tag, stored challenge."""

    TAG = 0x03
    pad1_masked: Word256    # pad1 XOR stored response
    pad2_masked: Word256    # pad1 XOR pad2
    alias_masked: Word256   # hash(pad1, pad2) XOR client alias
    tag: Word256            # hash(pad1, pad2, response, challenge, alias)
    challenge: Word256


@dataclass(frozen=True)
class CrpRotate:
    """Device's reply: next challenge/response, masked and tagged."""

    TAG = 0x04
    challenge_masked: Word256   # next challenge XOR current response
    challenge_tag: Word256      # hash(challenge_masked, current response)
    response_masked: Word256    # next response XOR pad2
    response_tag: Word256       # hash(response_masked, pad2)


@dataclass(frozen=True)
class RotateAck:
    """Server confirms rotation with the digest of the new pair."""

    TAG = 0x05
    crp_digest: Word256         # hash(next challenge, next response)


@dataclass(frozen=True)
class ClientNonce:
    TAG = 0x06
    nonce_masked: Word256       # client nonce XOR crp_digest
    tag: Word256                # hash(nonce_masked, crp_digest)


@dataclass(frozen=True)
class DeviceNonce:
    TAG = 0x07
    nonce_masked: Word256       # device nonce XOR client nonce
    tag: Word256                # hash(nonce_masked, client nonce)


WireMessage = (
    ConnReq | ConnEstablish | AuthChallenge | CrpRotate | RotateAck | ClientNonce | DeviceNonce
)

MESSAGE_TYPES = (
    ConnReq,
    ConnEstablish,
    AuthChallenge,
    CrpRotate,
    RotateAck,
    ClientNonce,
    DeviceNonce,
)

_BY_TAG = {cls.TAG: cls for cls in MESSAGE_TYPES}

_FIELD_WIDTH = {Word256: 32, DeviceId: 4}


def _field_types(cls):
    # Annotations are simple names ('Word256'/'DeviceId') by construction.
    resolved = {"Word256": Word256, "DeviceId": DeviceId}
    return [(f.name, resolved[f.type]) for f in dc_fields(cls)]


def _payload_length(cls) -> int:
    return sum(_FIELD_WIDTH[t] for _, t in _field_types(cls))


def encode(message: WireMessage, session_id: int) -> bytes:
    """Serialize a message into one frame."""
    if not 0 <= session_id < 2**32:
        raise ValueError("session id must fit 32 bits")
    out = bytearray()
    out.append(message.TAG)
    out += session_id.to_bytes(4, "big")
    for name, ftype in _field_types(type(message)):
        value = getattr(message, name)
        out += value.to_bytes4() if ftype is DeviceId else bytes(value)
    return bytes(out)


def decode(frame: bytes) -> tuple[WireMessage, int]:
    """Parse one frame into (message, session_id)."""
    if len(frame) < 5:
        raise MalformedMessage(f"frame too short: {len(frame)} bytes")
    cls = _BY_TAG.get(frame[0])
    if cls is None:
        raise MalformedMessage(f"unknown message tag 0x{frame[0]:02x}")
    session_id = int.from_bytes(frame[1:5], "big")
    payload = frame[5:]
    expected = _payload_length(cls)
    if len(payload) != expected:
        raise MalformedMessage(
            f"{cls.__name__} payload must be {expected} bytes, got {len(payload)}"
        )
    values = {}
    offset = 0
    for name, ftype in _field_types(cls):
        width = _FIELD_WIDTH[ftype]
        chunk = payload[offset : offset + width]
        offset += width
        values[name] = (
            DeviceId(int.from_bytes(chunk, "big")) if ftype is DeviceId else Word256(chunk)
        )
    return cls(**values), session_id


def payload_bits(message_type: type) -> int:
    """Payload size in bits (tag and session identifier excluded)."""
    return 8 * _payload_length(message_type)
