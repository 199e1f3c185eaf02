"""Role state machines: enrollment, registration, and the handshake.

Three parties. The server holds exactly one challenge-response pair per
device and replaces it inside every handshake; the device holds nothing
but its PUF and is stateless between sessions; the client relays frames
between the two and contributes its own nonce. All masking is XOR with
values only the legitimate peer can reconstruct, all integrity checks
are hashes over session secrets, compared in constant time.

Per-role operation counters record every protocol-level hash, XOR and
PUF evaluation so an instrumented run can be costed against the design
budget (see count_costs).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

from .primitives import DeviceId, Rng, SystemRng, Word256, ct_equal, hash_fields, xor256
from .sram_puf import PufFunction, respond
from .wire import (
    AuthChallenge,
    ClientNonce,
    ConnEstablish,
    CrpRotate,
    DeviceNonce,
    RotateAck,
    WireMessage,
    payload_bits,
)

__all__ = [
    "ProtocolError",
    "AuthenticationFailure",
    "RotateFailure",
    "UnknownDevice",
    "UnknownClient",
    "AlreadyEnrolled",
    "AlreadyRegistered",
    "DeviceBusy",
    "SessionStateError",
    "CrpRecord",
    "ClientRecord",
    "SessionKey",
    "MemoryStore",
    "compute_alias",
    "enroll_device",
    "register_client",
    "ServerPhase",
    "DevicePhase",
    "ClientPhase",
    "ServerSession",
    "DeviceSession",
    "ClientSession",
    "ServerProtocol",
    "DeviceProtocol",
    "ClientProtocol",
    "OpCounts",
    "RoleCost",
    "CostReport",
    "SendEvent",
    "Transcript",
    "count_costs",
    "DEFAULT_SESSION_TIMEOUT",
]

logger = logging.getLogger(__name__)

DEFAULT_SESSION_TIMEOUT = 30.0


class ProtocolError(Exception):
    """Base for all handshake failures."""


class AuthenticationFailure(ProtocolError):
    """An integrity tag did not verify; the session is dead."""


class RotateFailure(ProtocolError):
    """CRP rotation rejected; the stored pair is left untouched."""


class UnknownDevice(ProtocolError):
    pass


class UnknownClient(ProtocolError):
    pass


class AlreadyEnrolled(ProtocolError):
    pass


class AlreadyRegistered(ProtocolError):
    pass


class DeviceBusy(ProtocolError):
    """A handshake for this device is already in flight."""


class SessionStateError(ProtocolError):
    """Message does not match the session's phase or identifier."""


@dataclass(frozen=True)
class CrpRecord:
    device_id: DeviceId
    challenge: Word256
    response: Word256


@dataclass(frozen=True)
class ClientRecord:
    client_id: DeviceId
    alias_id: Word256


@dataclass(frozen=True)
class SessionKey:
    key: Word256

    def fingerprint(self) -> str:
        """Short non-reversible identifier, safe to print."""
        return hash_fields([self.key, b"fingerprint"]).hex()[:16]


class MemoryStore:
    """Server-side records: one CRP per device plus the client registry."""

    def __init__(self):
        self._crps: dict[DeviceId, CrpRecord] = {}
        self._clients: dict[DeviceId, ClientRecord] = {}

    def add_crp(self, record: CrpRecord) -> None:
        if record.device_id in self._crps:
            raise AlreadyEnrolled(f"device {int(record.device_id)} already enrolled")
        self._crps[record.device_id] = record

    def get_crp(self, device_id: DeviceId) -> CrpRecord:
        try:
            return self._crps[device_id]
        except KeyError:
            raise UnknownDevice(f"device {int(device_id)} not enrolled") from None

    def replace_crp(self, device_id: DeviceId, challenge: Word256, response: Word256) -> None:
        if device_id not in self._crps:
            raise UnknownDevice(f"device {int(device_id)} not enrolled")
        self._crps[device_id] = CrpRecord(device_id, challenge, response)

    def add_client(self, record: ClientRecord) -> None:
        if record.client_id in self._clients:
            raise AlreadyRegistered(f"client {int(record.client_id)} already registered")
        self._clients[record.client_id] = record

    def get_client(self, client_id: DeviceId) -> ClientRecord:
        try:
            return self._clients[client_id]
        except KeyError:
            raise UnknownClient(f"client {int(client_id)} not registered") from None

    def snapshot(self) -> tuple[dict, dict]:
        return dict(self._crps), dict(self._clients)


def compute_alias(username: bytes, password: bytes, client_id: DeviceId) -> Word256:
    """Alias identity: hash of credentials and client id."""
    return hash_fields([username, password, client_id])


def enroll_device(
    store, device_id: DeviceId, puf: PufFunction, rng: Rng | None = None
) -> CrpRecord:
    """One-time secure-environment capture of a device's initial CRP."""
    rng = rng if rng is not None else SystemRng()
    challenge = rng.word()
    response = respond(puf, challenge)
    record = CrpRecord(device_id=device_id, challenge=challenge, response=response)
    store.add_crp(record)
    return record


def register_client(
    store, username: bytes, password: bytes, client_id: DeviceId
) -> ClientRecord:
    """Register a client under its alias identity."""
    if not username or not password:
        logger.warning("registering client %d with empty credentials", int(client_id))
    record = ClientRecord(client_id=client_id, alias_id=compute_alias(username, password, client_id))
    store.add_client(record)
    return record


class ServerPhase(Enum):
    AWAIT_ROTATE = "await_rotate"
    DONE = "done"
    ABORTED = "aborted"


class DevicePhase(Enum):
    AWAIT_NONCE = "await_nonce"
    ESTABLISHED = "established"
    ABORTED = "aborted"


class ClientPhase(Enum):
    AWAIT_SERVER = "await_server"
    AWAIT_ROTATE_ACK = "await_rotate_ack"
    AWAIT_DEVICE_NONCE = "await_device_nonce"
    ESTABLISHED = "established"
    ABORTED = "aborted"


@dataclass
class ServerSession:
    session_id: int
    device_id: DeviceId
    alias_id: Word256
    pad1: Word256
    pad2: Word256
    challenge: Word256
    response: Word256
    deadline: float
    phase: ServerPhase = ServerPhase.AWAIT_ROTATE


@dataclass
class DeviceSession:
    session_id: int
    pad2: Word256
    alias_id: Word256
    next_challenge: Word256
    next_response: Word256
    device_nonce: Word256 | None = None
    key: SessionKey | None = None
    phase: DevicePhase = DevicePhase.AWAIT_NONCE


@dataclass
class ClientSession:
    session_id: int
    client_id: DeviceId
    device_id: DeviceId | None = None
    crp_digest: Word256 | None = None
    nonce: Word256 | None = None
    key: SessionKey | None = None
    phase: ClientPhase = ClientPhase.AWAIT_SERVER


@dataclass
class OpCounts:
    hash_ops: int = 0
    xor_ops: int = 0
    puf_ops: int = 0

    def copy(self) -> "OpCounts":
        return OpCounts(self.hash_ops, self.xor_ops, self.puf_ops)


class _Instrumented:
    """Counts protocol-level primitive operations."""

    def __init__(self):
        self.ops = OpCounts()

    def _hash(self, fields) -> Word256:
        self.ops.hash_ops += 1
        return hash_fields(fields)

    def _xor(self, a: Word256, b: Word256) -> Word256:
        self.ops.xor_ops += 1
        return xor256(a, b)


def _check_session(session, session_id, phase, expected_phase) -> None:
    if session_id is not None and session_id != session.session_id:
        raise SessionStateError(
            f"frame for session {session_id} fed to session {session.session_id}"
        )
    if phase != expected_phase:
        raise SessionStateError(f"message not acceptable in phase {phase.value}")


class ServerProtocol(_Instrumented):
    """Issues challenges from the stored CRP and commits rotations.

    One in-flight session per device: the single stored CRP makes
    interleaved handshakes unsound, so a second begin_auth for the same
    device is refused until the first finishes, aborts, or times out.
    """

    def __init__(
        self,
        store,
        rng: Rng | None = None,
        clock=time.monotonic,
        session_timeout: float = DEFAULT_SESSION_TIMEOUT,
    ):
        super().__init__()
        self.store = store
        self.rng = rng if rng is not None else SystemRng()
        self.clock = clock
        self.session_timeout = session_timeout
        self._active: dict[DeviceId, ServerSession] = {}

    def begin_auth(
        self, device_id: DeviceId, client_id: DeviceId, session_id: int = 0
    ) -> tuple[ServerSession, AuthChallenge]:
        crp = self.store.get_crp(device_id)
        client = self.store.get_client(client_id)
        existing = self._active.get(device_id)
        if existing is not None:
            if self.clock() < existing.deadline:
                raise DeviceBusy(f"device {int(device_id)} has a session in flight")
            existing.phase = ServerPhase.ABORTED
            del self._active[device_id]
            logger.info("expired stale session %d for device %d", existing.session_id, int(device_id))

        pad1 = self.rng.word()
        pad2 = self.rng.word()
        pad1_masked = self._xor(pad1, crp.response)
        pad2_masked = self._xor(pad1, pad2)
        pads_digest = self._hash([pad1, pad2])
        alias_masked = self._xor(pads_digest, client.alias_id)
        tag = self._hash([pad1, pad2, crp.response, crp.challenge, client.alias_id])

        session = ServerSession(
            session_id=session_id,
            device_id=device_id,
            alias_id=client.alias_id,
            pad1=pad1,
            pad2=pad2,
            challenge=crp.challenge,
            response=crp.response,
            deadline=self.clock() + self.session_timeout,
        )
        self._active[device_id] = session
        msg = AuthChallenge(
            pad1_masked=pad1_masked,
            pad2_masked=pad2_masked,
            alias_masked=alias_masked,
            tag=tag,
            challenge=crp.challenge,
        )
        return session, msg

    def handle_rotate(
        self, session: ServerSession, msg: CrpRotate, session_id: int | None = None
    ) -> RotateAck:
        _check_session(session, session_id, session.phase, ServerPhase.AWAIT_ROTATE)
        next_challenge = self._xor(msg.challenge_masked, session.response)
        if not ct_equal(msg.challenge_tag, self._hash([msg.challenge_masked, session.response])):
            self._abort(session)
            raise RotateFailure("challenge rotation tag mismatch")
        next_response = self._xor(session.pad2, msg.response_masked)
        if not ct_equal(msg.response_tag, self._hash([msg.response_masked, session.pad2])):
            self._abort(session)
            raise RotateFailure("response rotation tag mismatch")

        self.store.replace_crp(session.device_id, next_challenge, next_response)
        crp_digest = self._hash([next_challenge, next_response])
        session.phase = ServerPhase.DONE
        self._release(session)
        return RotateAck(crp_digest=crp_digest)

    def abort_session(self, session: ServerSession) -> None:
        self._abort(session)

    def reap_expired(self) -> list[ServerSession]:
        now = self.clock()
        expired = [s for s in self._active.values() if now >= s.deadline]
        for session in expired:
            self._abort(session)
        return expired

    def _abort(self, session: ServerSession) -> None:
        if session.phase is ServerPhase.AWAIT_ROTATE:
            session.phase = ServerPhase.ABORTED
        self._release(session)

    def _release(self, session: ServerSession) -> None:
        if self._active.get(session.device_id) is session:
            del self._active[session.device_id]


class DeviceProtocol(_Instrumented):
    """The PUF bearer. Holds no secrets at rest; every session starts cold."""

    def __init__(self, device_id: DeviceId, puf: PufFunction, rng: Rng | None = None):
        super().__init__()
        self.device_id = device_id
        self.puf = puf
        self.rng = rng if rng is not None else SystemRng()

    def _respond(self, challenge: Word256) -> Word256:
        self.ops.puf_ops += 1
        return respond(self.puf, challenge)

    def handle_conn_req(self, client_id: DeviceId) -> ConnEstablish:
        return ConnEstablish(device_id=self.device_id, client_id=client_id)

    def handle_auth(
        self, msg: AuthChallenge, session_id: int = 0
    ) -> tuple[DeviceSession, CrpRotate]:
        """Recover the pads and alias, verify the tag, emit the rotation.

        The PUF evaluation happens before verification by necessity: the
        stored response is the only key that unmasks anything.
        """
        response = self._respond(msg.challenge)
        pad1 = self._xor(msg.pad1_masked, response)
        pad2 = self._xor(msg.pad2_masked, pad1)
        pads_digest = self._hash([pad1, pad2])
        alias_id = self._xor(msg.alias_masked, pads_digest)
        expected = self._hash([pad1, pad2, response, msg.challenge, alias_id])
        if not ct_equal(expected, msg.tag):
            raise AuthenticationFailure("challenge tag mismatch")

        next_challenge = self.rng.word()
        while next_challenge == msg.challenge:  # fresh draw, never the current one
            next_challenge = self.rng.word()
        challenge_masked = self._xor(next_challenge, response)
        next_response = self._respond(next_challenge)
        challenge_tag = self._hash([challenge_masked, response])
        response_masked = self._xor(pad2, next_response)
        response_tag = self._hash([response_masked, pad2])

        session = DeviceSession(
            session_id=session_id,
            pad2=pad2,
            alias_id=alias_id,
            next_challenge=next_challenge,
            next_response=next_response,
        )
        msg_out = CrpRotate(
            challenge_masked=challenge_masked,
            challenge_tag=challenge_tag,
            response_masked=response_masked,
            response_tag=response_tag,
        )
        return session, msg_out

    def handle_nonce(
        self, session: DeviceSession, msg: ClientNonce, session_id: int | None = None
    ) -> tuple[DeviceNonce, SessionKey]:
        _check_session(session, session_id, session.phase, DevicePhase.AWAIT_NONCE)
        crp_digest = self._hash([session.next_challenge, session.next_response])
        client_nonce = self._xor(msg.nonce_masked, crp_digest)
        if not ct_equal(msg.tag, self._hash([msg.nonce_masked, crp_digest])):
            session.phase = DevicePhase.ABORTED
            raise AuthenticationFailure("client nonce tag mismatch")

        device_nonce = self.rng.word()
        nonce_masked = self._xor(device_nonce, client_nonce)
        tag = self._hash([nonce_masked, client_nonce])
        key = SessionKey(
            self._hash([client_nonce, device_nonce, session.alias_id, self.device_id])
        )
        session.device_nonce = device_nonce
        session.key = key
        session.phase = DevicePhase.ESTABLISHED
        return DeviceNonce(nonce_masked=nonce_masked, tag=tag), key


class ClientProtocol(_Instrumented):
    """The relay with credentials: knows its alias, contributes a nonce."""

    def __init__(self, client_id: DeviceId, alias_id: Word256, rng: Rng | None = None):
        super().__init__()
        self.client_id = client_id
        self.alias_id = alias_id
        self.rng = rng if rng is not None else SystemRng()

    def new_session(self, session_id: int) -> ClientSession:
        return ClientSession(session_id=session_id, client_id=self.client_id)

    def confirm_establish(
        self, session: ClientSession, msg: ConnEstablish, session_id: int | None = None
    ) -> None:
        """Bind the peer's id; reject an establishment echoing someone else."""
        _check_session(session, session_id, session.phase, ClientPhase.AWAIT_SERVER)
        if msg.client_id != self.client_id:
            session.phase = ClientPhase.ABORTED
            raise AuthenticationFailure(
                f"establishment echoes client {int(msg.client_id)}, not {int(self.client_id)}"
            )
        session.device_id = msg.device_id
        session.phase = ClientPhase.AWAIT_ROTATE_ACK

    def send_nonce(
        self, session: ClientSession, msg: RotateAck, session_id: int | None = None
    ) -> ClientNonce:
        _check_session(session, session_id, session.phase, ClientPhase.AWAIT_ROTATE_ACK)
        nonce = self.rng.word()
        nonce_masked = self._xor(nonce, msg.crp_digest)
        tag = self._hash([nonce_masked, msg.crp_digest])
        session.crp_digest = msg.crp_digest
        session.nonce = nonce
        session.phase = ClientPhase.AWAIT_DEVICE_NONCE
        return ClientNonce(nonce_masked=nonce_masked, tag=tag)

    def finish(
        self, session: ClientSession, msg: DeviceNonce, session_id: int | None = None
    ) -> SessionKey:
        _check_session(session, session_id, session.phase, ClientPhase.AWAIT_DEVICE_NONCE)
        device_nonce = self._xor(msg.nonce_masked, session.nonce)
        if not ct_equal(msg.tag, self._hash([msg.nonce_masked, session.nonce])):
            session.phase = ClientPhase.ABORTED
            raise AuthenticationFailure("device nonce tag mismatch")
        key = SessionKey(
            self._hash([session.nonce, device_nonce, self.alias_id, session.device_id])
        )
        session.key = key
        session.phase = ClientPhase.ESTABLISHED
        return key


# ---------------------------------------------------------------------------
# Cost accounting.

@dataclass(frozen=True)
class SendEvent:
    sender: str          # "device" | "client" | "server"
    channel: str         # "open" | "secure"
    frame: bytes
    message: WireMessage


@dataclass
class Transcript:
    events: list[SendEvent] = field(default_factory=list)
    ops: dict[str, OpCounts] = field(default_factory=dict)

    def record(self, sender: str, channel: str, frame: bytes, message: WireMessage) -> None:
        self.events.append(SendEvent(sender, channel, frame, message))


@dataclass(frozen=True)
class RoleCost:
    hash_ops: int
    xor_ops: int
    puf_ops: int
    payload_bits: int


@dataclass(frozen=True)
class CostReport:
    roles: dict[str, RoleCost]

    @property
    def total_bits(self) -> int:
        return sum(r.payload_bits for r in self.roles.values())


# Connection bootstrap frames are excluded from the transmission budget;
# only the authentication and key-exchange payloads are charged, with
# forwarded copies billed to the forwarder.
_COUNTED = (AuthChallenge, CrpRotate, RotateAck, ClientNonce, DeviceNonce)

ROLES = ("device", "client", "server")


def count_costs(transcript: Transcript) -> CostReport:
    """Tally per-role payload bits and primitive operation counts."""
    bits = {role: 0 for role in ROLES}
    for event in transcript.events:
        if isinstance(event.message, _COUNTED):
            bits[event.sender] += payload_bits(type(event.message))
    roles = {}
    for role in ROLES:
        ops = transcript.ops.get(role, OpCounts())
        roles[role] = RoleCost(
            hash_ops=ops.hash_ops,
            xor_ops=ops.xor_ops,
            puf_ops=ops.puf_ops,
            payload_bits=bits[role],
        )
    return CostReport(roles=roles)
