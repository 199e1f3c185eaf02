"""Deterministic in-process network simulator and attack scenarios.

Two channel classes mirror the deployment: the client-device link is
open (every frame passes through the adversary before delivery), the
client-server link is confidential and authentic (frames are recorded
for analysis but the adversary never sees them). The adversary follows
a script of per-frame actions and remembers everything it intercepts;
replay sources come only from that memory.

Scenarios are pure functions of (seed, script): every rng in play is a
seeded stream derived per role, so reruns are bit-identical.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .primitives import (
    DeviceId,
    FixedWordsRng,
    Word256,
    ct_equal,
    derive_rng,
    hash_fields,
    xor256,
)
from .protocol import (
    ClientProtocol,
    DeviceProtocol,
    MemoryStore,
    OpCounts,
    ProtocolError,
    ServerProtocol,
    SessionStateError,
    Transcript,
    compute_alias,
    count_costs,
    enroll_device,
    register_client,
)
from .sram_puf import PufFunction, fabricate_chip, find_stable_cells, respond
from .wire import (
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
)

__all__ = [
    "Forward",
    "Drop",
    "Replay",
    "Tamper",
    "Inject",
    "Adversary",
    "parse_script",
    "format_script",
    "SCRIPT_HEADER",
    "Fixture",
    "build_fixture",
    "Established",
    "AbortedAt",
    "GroundTruth",
    "ScenarioResult",
    "Simulation",
    "KnowledgeSet",
    "close_under_protocol_hashes",
    "OPEN_FIELDS",
    "tamper_positions",
    "run_honest",
    "run_replay",
    "run_tamper",
    "run_mitm_impersonation",
    "run_eavesdrop_analysis",
    "run_key_escrow_check",
    "run_rotation_linkage_analysis",
    "EavesdropReport",
    "EscrowReport",
    "LinkageReport",
    "REPLAY_VARIANTS",
]


# ---------------------------------------------------------------------------
# Adversary actions and scripts.

@dataclass(frozen=True)
class Forward:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Replay:
    index: int


@dataclass(frozen=True)
class Tamper:
    index: int
    byte_offset: int
    bit: int  # 0 = most significant bit of the byte


@dataclass(frozen=True)
class Inject:
    # Static frame bytes, or a builder called with (adversary, current
    # frame) when the action fires. reply=True answers the sender
    # (impersonating the peer); reply=False substitutes the delivery.
    payload: bytes | Callable
    reply: bool = True


Action = Forward | Drop | Replay | Tamper | Inject

SCRIPT_HEADER = "advscript 1"


def parse_script(text: str) -> list[Action]:
    """Parse the line-oriented scenario script format."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != SCRIPT_HEADER:
        raise ValueError(f"script must start with '{SCRIPT_HEADER}'")
    actions: list[Action] = []
    for ln in lines[1:]:
        parts = ln.split()
        try:
            if parts[0] == "forward" and len(parts) == 1:
                actions.append(Forward())
            elif parts[0] == "drop" and len(parts) == 1:
                actions.append(Drop())
            elif parts[0] == "replay" and len(parts) == 2:
                actions.append(Replay(int(parts[1])))
            elif parts[0] == "tamper" and len(parts) == 4:
                actions.append(Tamper(int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "inject" and len(parts) == 2:
                actions.append(Inject(bytes.fromhex(parts[1])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad script line: {ln!r}") from None
    return actions


def format_script(actions: Iterable[Action]) -> str:
    lines = [SCRIPT_HEADER]
    for action in actions:
        if isinstance(action, Forward):
            lines.append("forward")
        elif isinstance(action, Drop):
            lines.append("drop")
        elif isinstance(action, Replay):
            lines.append(f"replay {action.index}")
        elif isinstance(action, Tamper):
            lines.append(f"tamper {action.index} {action.byte_offset} {action.bit}")
        elif isinstance(action, Inject):
            if callable(action.payload):
                raise ValueError("builder-based inject cannot be serialized")
            lines.append(f"inject {action.payload.hex()}")
        else:
            raise ValueError(f"unknown action {action!r}")
    return "\n".join(lines) + "\n"


class Adversary:
    """Interposes on the open channel; remembers everything it sees."""

    def __init__(self, script: Iterable[Action] = ()):
        self.observed: list[bytes] = []
        self.script: deque[Action] = deque(script)

    def load_script(self, actions: Iterable[Action]) -> None:
        self.script = deque(actions)

    def intercept(self, frame: bytes) -> list[tuple[bool, bytes]]:
        """Returns deliveries as (to_sender, frame) pairs."""
        self.observed.append(frame)
        action = self.script.popleft() if self.script else Forward()
        if isinstance(action, Forward):
            return [(False, frame)]
        if isinstance(action, Drop):
            return []
        if isinstance(action, Replay):
            return [(False, self.observed[action.index])]
        if isinstance(action, Tamper):
            raw = bytearray(self.observed[action.index])
            raw[action.byte_offset] ^= 0x80 >> action.bit
            return [(False, bytes(raw))]
        if isinstance(action, Inject):
            payload = action.payload(self, frame) if callable(action.payload) else action.payload
            return [(action.reply, payload)]
        raise TypeError(f"unknown action {action!r}")

    def observed_words(self) -> list[tuple[str, Word256]]:
        """Word-valued fields visible on the open channel, labeled.

        Includes one zero-padded word per distinct cleartext session
        identifier (the only per-session constant on the wire).
        """
        words: list[tuple[str, Word256]] = []
        session_ids = []
        for n, frame in enumerate(self.observed):
            try:
                msg, sid = decode(frame)
            except MalformedMessage:
                continue
            if sid not in session_ids:
                session_ids.append(sid)
            prefix = type(msg).__name__
            for name, hint in type(msg).__annotations__.items():
                if hint == "Word256":
                    words.append((f"{prefix}[{n}].{name}", getattr(msg, name)))
        for sid in session_ids:
            words.append((f"session.{sid}", Word256.from_int(sid)))
        return words


# ---------------------------------------------------------------------------
# World fixtures.

@dataclass
class Fixture:
    store: MemoryStore
    puf: PufFunction
    device_id: DeviceId
    client_id: DeviceId
    username: bytes
    password: bytes
    alias_id: Word256


def build_fixture(
    seed: int,
    cell_count: int = 1024,
    stable_fraction: float = 0.95,
    qualify_reads: int = 7,
) -> Fixture:
    """Deterministic world: one enrolled device, one registered client."""
    chip = fabricate_chip(seed, cell_count, stable_fraction)
    pool = find_stable_cells(chip, reads=qualify_reads, noise=derive_rng(seed, "qualify"))
    puf = PufFunction(chip=chip, pool=pool)
    store = MemoryStore()
    device_id = DeviceId(0x1000 + (seed % 1000))
    client_id = DeviceId(0x2000 + (seed % 1000))
    username, password = b"resident", b"hunter2"
    enroll_device(store, device_id, puf, rng=derive_rng(seed, "enroll"))
    register_client(store, username, password, client_id)
    return Fixture(
        store=store,
        puf=puf,
        device_id=device_id,
        client_id=client_id,
        username=username,
        password=password,
        alias_id=compute_alias(username, password, client_id),
    )


# ---------------------------------------------------------------------------
# Scenario results.

@dataclass(frozen=True)
class Established:
    keys_match: bool


@dataclass(frozen=True)
class AbortedAt:
    step: str
    error: str


@dataclass
class GroundTruth:
    """Secrets harvested from the honest parties for analysis only."""

    challenge: Word256 | None = None        # stored challenge entering the session
    response: Word256 | None = None         # its PUF response
    pad1: Word256 | None = None
    pad2: Word256 | None = None
    alias_id: Word256 | None = None
    next_challenge: Word256 | None = None
    next_response: Word256 | None = None
    client_nonce: Word256 | None = None
    device_nonce: Word256 | None = None
    client_key: Word256 | None = None
    device_key: Word256 | None = None
    session_id: int = 0

    def secrets(self) -> dict[str, Word256]:
        named = {
            "response": self.response,
            "next_response": self.next_response,
            "pad1": self.pad1,
            "pad2": self.pad2,
            "alias_id": self.alias_id,
            "client_nonce": self.client_nonce,
            "device_nonce": self.device_nonce,
            "session_key": self.device_key or self.client_key,
        }
        return {k: v for k, v in named.items() if v is not None}


@dataclass
class ScenarioResult:
    outcome: Established | AbortedAt
    store_before: tuple[dict, dict]
    store_after: tuple[dict, dict]
    transcript: Transcript
    ground_truth: GroundTruth
    cost: object  # CostReport

    @property
    def established(self) -> bool:
        return isinstance(self.outcome, Established)

    @property
    def detection_step(self) -> str | None:
        return self.outcome.step if isinstance(self.outcome, AbortedAt) else None

    @property
    def store_changed(self) -> bool:
        return self.store_before != self.store_after


# ---------------------------------------------------------------------------
# The simulator.

_CLIENT_STEPS = {
    ConnEstablish: "client.confirm_establish",
    AuthChallenge: "client.forward_auth",
    CrpRotate: "client.forward_rotate",
    RotateAck: "client.send_nonce",
    DeviceNonce: "client.finish",
}


class Simulation:
    """One world (store, chip, roles) running any number of handshakes.

    Role rngs continue across handshakes, so values stay fresh; the
    adversary's memory also persists, which is what replay scenarios
    feed on.
    """

    def __init__(self, fixture: Fixture, seed: int, adversary: Adversary | None = None):
        self.fixture = fixture
        self.adversary = adversary if adversary is not None else Adversary()
        self.server = ServerProtocol(fixture.store, rng=derive_rng(seed, "server"))
        self.device = DeviceProtocol(fixture.device_id, fixture.puf, rng=derive_rng(seed, "device"))
        self.client = ClientProtocol(fixture.client_id, fixture.alias_id, rng=derive_rng(seed, "client"))
        self.device_sessions: dict[int, object] = {}
        self.server_sessions: dict[int, object] = {}
        self.device_keys: dict[int, object] = {}
        self._next_session = 1

    def run_handshake(self, session_id: int | None = None) -> ScenarioResult:
        sid = session_id if session_id is not None else self._next_session
        self._next_session = max(self._next_session, sid) + 1

        transcript = Transcript()
        ops_before = {
            "device": self.device.ops.copy(),
            "client": self.client.ops.copy(),
            "server": self.server.ops.copy(),
        }
        store_before = self.fixture.store.snapshot()
        queue: deque[tuple[str, bytes]] = deque()
        csession = self.client.new_session(sid)
        client_key = None

        def send(sender: str, dest: str, message, out_sid: int) -> None:
            channel = "secure" if "server" in (sender, dest) else "open"
            frame = encode(message, out_sid)
            transcript.record(sender, channel, frame, message)
            if channel == "open":
                for to_sender, delivered in self.adversary.intercept(frame):
                    queue.append((sender if to_sender else dest, delivered))
            else:
                queue.append((dest, frame))

        def dispatch(dest: str, frame: bytes) -> None:
            nonlocal client_key
            msg, fsid = decode(frame)
            if dest == "device":
                if isinstance(msg, ConnReq):
                    send("device", "client", self.device.handle_conn_req(msg.client_id), fsid)
                elif isinstance(msg, AuthChallenge):
                    session, rotate = self.device.handle_auth(msg, fsid)
                    self.device_sessions[fsid] = session
                    send("device", "client", rotate, fsid)
                elif isinstance(msg, ClientNonce):
                    session = self.device_sessions.get(fsid)
                    if session is None:
                        raise SessionStateError(f"device has no session {fsid}")
                    dnonce, key = self.device.handle_nonce(session, msg, fsid)
                    self.device_keys[fsid] = key
                    send("device", "client", dnonce, fsid)
                else:
                    raise SessionStateError(f"device cannot accept {type(msg).__name__}")
            elif dest == "server":
                if isinstance(msg, ConnEstablish):
                    session, challenge = self.server.begin_auth(msg.device_id, msg.client_id, fsid)
                    self.server_sessions[fsid] = session
                    send("server", "client", challenge, fsid)
                elif isinstance(msg, CrpRotate):
                    session = self.server_sessions.get(fsid)
                    if session is None:
                        raise SessionStateError(f"server has no session {fsid}")
                    send("server", "client", self.server.handle_rotate(session, msg, fsid), fsid)
                else:
                    raise SessionStateError(f"server cannot accept {type(msg).__name__}")
            elif dest == "client":
                if isinstance(msg, ConnEstablish):
                    self.client.confirm_establish(csession, msg, fsid)
                    send("client", "server", msg, fsid)
                elif isinstance(msg, AuthChallenge):
                    send("client", "device", msg, fsid)
                elif isinstance(msg, CrpRotate):
                    send("client", "server", msg, fsid)
                elif isinstance(msg, RotateAck):
                    send("client", "device", self.client.send_nonce(csession, msg, fsid), fsid)
                elif isinstance(msg, DeviceNonce):
                    client_key = self.client.finish(csession, msg, fsid)
                else:
                    raise SessionStateError(f"client cannot accept {type(msg).__name__}")
            else:
                raise ValueError(f"unknown destination {dest}")

        outcome: Established | AbortedAt | None = None
        send("client", "device", ConnReq(client_id=self.fixture.client_id), sid)
        while queue and outcome is None:
            dest, frame = queue.popleft()
            try:
                dispatch(dest, frame)
            except MalformedMessage as exc:
                outcome = AbortedAt(step=f"{dest}.decode", error=f"MalformedMessage: {exc}")
            except ProtocolError as exc:
                step = self._step_name(dest, frame)
                outcome = AbortedAt(step=step, error=f"{type(exc).__name__}: {exc}")
            if client_key is not None and outcome is None:
                device_key = self.device_keys.get(sid)
                keys_match = device_key is not None and ct_equal(client_key.key, device_key.key)
                outcome = Established(keys_match=keys_match)
        if outcome is None:
            outcome = AbortedAt(step="transport", error="handshake stalled: nothing in flight")

        transcript.ops = {
            role: _ops_delta(ops_before[role], current.ops)
            for role, current in (
                ("device", self.device),
                ("client", self.client),
                ("server", self.server),
            )
        }
        return ScenarioResult(
            outcome=outcome,
            store_before=store_before,
            store_after=self.fixture.store.snapshot(),
            transcript=transcript,
            ground_truth=self._harvest_ground_truth(sid, store_before, csession, client_key),
            cost=count_costs(transcript),
        )

    @staticmethod
    def _step_name(dest: str, frame: bytes) -> str:
        try:
            msg, _ = decode(frame)
        except MalformedMessage:
            return f"{dest}.decode"
        if dest == "device":
            return {
                ConnReq: "device.handle_conn_req",
                AuthChallenge: "device.handle_auth",
                ClientNonce: "device.handle_nonce",
            }.get(type(msg), "device.dispatch")
        if dest == "server":
            return {
                ConnEstablish: "server.begin_auth",
                CrpRotate: "server.handle_rotate",
            }.get(type(msg), "server.dispatch")
        return _CLIENT_STEPS.get(type(msg), "client.dispatch")

    def _harvest_ground_truth(self, sid, store_before, csession, client_key) -> GroundTruth:
        gt = GroundTruth(session_id=sid, alias_id=self.fixture.alias_id)
        crps_before, _ = store_before
        record = crps_before.get(self.fixture.device_id)
        if record is not None:
            gt.challenge, gt.response = record.challenge, record.response
        ssession = self.server_sessions.get(sid)
        if ssession is not None:
            gt.pad1, gt.pad2 = ssession.pad1, ssession.pad2
        dsession = self.device_sessions.get(sid)
        if dsession is not None:
            gt.next_challenge = dsession.next_challenge
            gt.next_response = dsession.next_response
            gt.device_nonce = dsession.device_nonce
            if dsession.key is not None:
                gt.device_key = dsession.key.key
        if csession.nonce is not None:
            gt.client_nonce = csession.nonce
        if client_key is not None:
            gt.client_key = client_key.key
        return gt


def _ops_delta(before, after):
    return OpCounts(
        hash_ops=after.hash_ops - before.hash_ops,
        xor_ops=after.xor_ops - before.xor_ops,
        puf_ops=after.puf_ops - before.puf_ops,
    )


# ---------------------------------------------------------------------------
# Adversary knowledge: XOR span plus a bounded hashing closure.

class KnowledgeSet:
    """Everything derivable from a word set by XOR combination.

    Linear span over GF(2): membership covers every subset-XOR of the
    added words, which is the closure the masking scheme must resist.
    """

    def __init__(self, words: Iterable[Word256] = ()):
        self._basis: dict[int, int] = {}  # leading bit position -> row value
        for w in words:
            self.add(w)

    def _reduce(self, value: int) -> int:
        while value:
            lead = value.bit_length() - 1
            row = self._basis.get(lead)
            if row is None:
                return value
            value ^= row
        return 0

    def add(self, word: Word256) -> None:
        residue = self._reduce(word.to_int())
        if residue:
            self._basis[residue.bit_length() - 1] = residue

    def contains(self, word: Word256) -> bool:
        return self._reduce(word.to_int()) == 0


def close_under_protocol_hashes(knowledge: KnowledgeSet, gt: GroundTruth, device_id: DeviceId, rounds: int = 2) -> None:
    """Extend the span with protocol hash values whose inputs are known.

    The handshake only ever hashes a handful of tuple shapes; an
    adversary that has derived every word argument of a shape can
    compute that digest, so it joins the knowledge set. Identifiers are
    public. Bounded at `rounds` passes.
    """
    shapes: list[list] = []
    if gt.pad1 and gt.pad2:
        shapes.append([gt.pad1, gt.pad2])
        if gt.response and gt.challenge and gt.alias_id:
            shapes.append([gt.pad1, gt.pad2, gt.response, gt.challenge, gt.alias_id])
    if gt.next_challenge and gt.next_response:
        shapes.append([gt.next_challenge, gt.next_response])
    if gt.client_nonce and gt.device_nonce and gt.alias_id:
        shapes.append([gt.client_nonce, gt.device_nonce, gt.alias_id, device_id])
    for _ in range(rounds):
        grew = False
        for shape in shapes:
            word_args = [a for a in shape if isinstance(a, Word256)]
            if all(knowledge.contains(a) for a in word_args):
                digest = hash_fields(shape)
                if not knowledge.contains(digest):
                    knowledge.add(digest)
                    grew = True
        if not grew:
            break


def adversary_knowledge(adversary: Adversary, results: Iterable[ScenarioResult], device_id: DeviceId) -> KnowledgeSet:
    knowledge = KnowledgeSet(w for _, w in adversary.observed_words())
    for result in results:
        close_under_protocol_hashes(knowledge, result.ground_truth, device_id)
    return knowledge


# ---------------------------------------------------------------------------
# Tamper targeting.

# The sixteen fields an on-path adversary can flip bits in, as
# (field name, honest open-frame index, byte offset inside the frame,
# width in bytes). Frame header is 1 tag byte + 4 session-id bytes.
OPEN_FIELDS: list[tuple[str, int, int, int]] = [
    ("conn_req.client_id", 0, 5, 4),
    ("conn_establish.device_id", 1, 5, 4),
    ("conn_establish.client_id", 1, 9, 4),
    ("auth_challenge.pad1_masked", 2, 5, 32),
    ("auth_challenge.pad2_masked", 2, 37, 32),
    ("auth_challenge.alias_masked", 2, 69, 32),
    ("auth_challenge.tag", 2, 101, 32),
    ("auth_challenge.challenge", 2, 133, 32),
    ("crp_rotate.challenge_masked", 3, 5, 32),
    ("crp_rotate.challenge_tag", 3, 37, 32),
    ("crp_rotate.response_masked", 3, 69, 32),
    ("crp_rotate.response_tag", 3, 101, 32),
    ("client_nonce.nonce_masked", 4, 5, 32),
    ("client_nonce.tag", 4, 37, 32),
    ("device_nonce.nonce_masked", 5, 5, 32),
    ("device_nonce.tag", 5, 37, 32),
]

_FIELDS_BY_NAME = {name: (frame, offset, width) for name, frame, offset, width in OPEN_FIELDS}


def tamper_positions(field_name: str) -> list[tuple[int, int]]:
    """The 32 swept (byte offset, bit) pairs for one open-channel field.

    Word fields: the first bit of each of the 32 bytes. Identifier
    fields: every bit of the 32-bit value.
    """
    _, offset, width = _FIELDS_BY_NAME[field_name]
    if width == 32:
        return [(offset + i, 0) for i in range(32)]
    return [(offset + i // 8, i % 8) for i in range(width * 8)]


# ---------------------------------------------------------------------------
# Scenarios.

def run_honest(seed: int, fixture: Fixture | None = None, simulation: Simulation | None = None) -> ScenarioResult:
    """Baseline end-to-end handshake with a pass-through adversary."""
    sim = simulation if simulation is not None else Simulation(fixture or build_fixture(seed), seed)
    return sim.run_handshake()


def run_tamper(seed: int, field_name: str, position: int) -> ScenarioResult:
    """Flip one bit of one open-channel field mid-handshake."""
    frame_index, _, _ = _FIELDS_BY_NAME[field_name]
    byte_offset, bit = tamper_positions(field_name)[position]
    script: list[Action] = [Forward()] * frame_index + [Tamper(frame_index, byte_offset, bit)]
    sim = Simulation(build_fixture(seed), seed, adversary=Adversary(script))
    return sim.run_handshake()


REPLAY_VARIANTS = ("auth_challenge", "crp_rotate", "transcript")


def _restamp(frame: bytes, session_id: int) -> bytes:
    return frame[:1] + session_id.to_bytes(4, "big") + frame[5:]


def run_replay(seed: int, variant: str = "auth_challenge") -> tuple[ScenarioResult, ScenarioResult, KnowledgeSet]:
    """Record one honest session, then replay stale material.

    Returns (honest result, attacked result, adversary knowledge after
    both sessions). The attacked result must never be an established
    session, and no secret of either session may fall inside the
    knowledge set.
    """
    if variant not in REPLAY_VARIANTS:
        raise ValueError(f"unknown replay variant {variant!r}")
    fixture = build_fixture(seed)
    sim = Simulation(fixture, seed)
    honest = sim.run_handshake()
    assert honest.established, "fixture must complete an honest session first"

    if variant == "transcript":
        attacked = _replay_full_transcript(sim)
    else:
        # Open-frame indices of session one: 0 ConnReq, 1 ConnEstablish,
        # 2 AuthChallenge, 3 CrpRotate, 4 ClientNonce, 5 DeviceNonce.
        # The fresh script starts consuming at session two's first
        # intercept, so the substitution needs only its local lead-in.
        source = 2 if variant == "auth_challenge" else 3
        lead_in = 2 if variant == "auth_challenge" else 3

        def substitute(adversary: Adversary, current: bytes) -> bytes:
            return _restamp(adversary.observed[source], int.from_bytes(current[1:5], "big"))

        sim.adversary.load_script([Forward()] * lead_in + [Inject(substitute, reply=False)])
        attacked = sim.run_handshake()

    knowledge = adversary_knowledge(sim.adversary, [honest, attacked], fixture.device_id)
    return honest, attacked, knowledge


def _replay_full_transcript(sim: Simulation) -> ScenarioResult:
    """Adversary re-drives the device with the recorded client-side frames."""
    recorded = list(sim.adversary.observed)
    client_frames = [recorded[0], recorded[2], recorded[4]]  # ConnReq, AuthChallenge, ClientNonce
    transcript = Transcript()
    store_before = sim.fixture.store.snapshot()
    outcome = None
    for frame in client_frames:
        msg, fsid = decode(frame)
        try:
            if isinstance(msg, ConnReq):
                reply = sim.device.handle_conn_req(msg.client_id)
                sim.adversary.observed.append(encode(reply, fsid))
            elif isinstance(msg, AuthChallenge):
                session, rotate = sim.device.handle_auth(msg, fsid)
                sim.device_sessions[fsid] = session
                sim.adversary.observed.append(encode(rotate, fsid))
            elif isinstance(msg, ClientNonce):
                session = sim.device_sessions[fsid]
                dnonce, key = sim.device.handle_nonce(session, msg, fsid)
                sim.device_keys[fsid] = key
                sim.adversary.observed.append(encode(dnonce, fsid))
        except ProtocolError as exc:
            step = {ConnReq: "device.handle_conn_req", AuthChallenge: "device.handle_auth", ClientNonce: "device.handle_nonce"}[type(msg)]
            outcome = AbortedAt(step=step, error=f"{type(exc).__name__}: {exc}")
            break
    if outcome is None:
        outcome = Established(keys_match=False)
    gt = GroundTruth(session_id=decode(client_frames[0])[1])
    dsession = sim.device_sessions.get(gt.session_id)
    if dsession is not None:
        gt.next_challenge = dsession.next_challenge
        gt.next_response = dsession.next_response
        if dsession.key is not None:
            gt.device_key = dsession.key.key
    return ScenarioResult(
        outcome=outcome,
        store_before=store_before,
        store_after=sim.fixture.store.snapshot(),
        transcript=transcript,
        ground_truth=gt,
        cost=count_costs(transcript),
    )


def run_mitm_impersonation(seed: int, forging: str = "random") -> tuple[ScenarioResult, KnowledgeSet]:
    """An adversary with no enrolled PUF answers the challenge itself.

    forging="random" invents the rotation words; forging="other_puf"
    builds a structurally honest rotation with a different chip's
    responses. Either way the server's tags cannot verify.
    """
    fixture = build_fixture(seed)
    rng = derive_rng(seed, "adversary")
    other_chip = fabricate_chip(seed + 10_000, 1024, 0.95)
    other_pool = find_stable_cells(other_chip, reads=7, noise=derive_rng(seed, "other-qualify"))
    other_puf = PufFunction(chip=other_chip, pool=other_pool)

    def fake_establish(adversary: Adversary, current: bytes) -> bytes:
        msg, sid = decode(current)
        return encode(ConnEstablish(device_id=fixture.device_id, client_id=msg.client_id), sid)

    def forged_rotate(adversary: Adversary, current: bytes) -> bytes:
        msg, sid = decode(current)
        if forging == "random":
            forged = CrpRotate(
                challenge_masked=rng.word(),
                challenge_tag=rng.word(),
                response_masked=rng.word(),
                response_tag=rng.word(),
            )
        else:
            # Wrong chip, honest construction: every derived value is off.
            response = respond(other_puf, msg.challenge)
            pad1 = xor256(msg.pad1_masked, response)
            pad2 = xor256(msg.pad2_masked, pad1)
            next_challenge = rng.word()
            next_response = respond(other_puf, next_challenge)
            challenge_masked = xor256(next_challenge, response)
            response_masked = xor256(pad2, next_response)
            forged = CrpRotate(
                challenge_masked=challenge_masked,
                challenge_tag=hash_fields([challenge_masked, response]),
                response_masked=response_masked,
                response_tag=hash_fields([response_masked, pad2]),
            )
        return encode(forged, sid)

    adversary = Adversary([Inject(fake_establish), Inject(forged_rotate)])
    sim = Simulation(fixture, seed, adversary=adversary)
    result = sim.run_handshake()
    knowledge = adversary_knowledge(adversary, [result], fixture.device_id)
    return result, knowledge


# ---------------------------------------------------------------------------
# Eavesdropping analysis: subset-XOR search plus the masking identities.

@dataclass
class EavesdropReport:
    subsets_checked: int
    hits: list[tuple[tuple[str, ...], str]]
    relations: list[tuple[str, bool]]

    @property
    def clean(self) -> bool:
        return not self.hits

    @property
    def relations_hold(self) -> bool:
        return all(ok for _, ok in self.relations)


def _masking_relations(msg: AuthChallenge, gt: GroundTruth) -> list[tuple[str, bool]]:
    """The closed family of XOR combinations over the three masked fields.

    Each combination of the first authentication frame's masked words
    reduces to an expression in session secrets; none reduces to a bare
    secret. The first six check the reductions against ground truth,
    the last three confirm the family is closed over itself.
    """
    m1, m2, m3 = msg.pad1_masked, msg.pad2_masked, msg.alias_masked
    pads_digest = hash_fields([gt.pad1, gt.pad2])
    masked_alias = xor256(pads_digest, gt.alias_id)
    e1, e2, e3 = xor256(m1, m2), xor256(m1, m3), xor256(m2, m3)
    e4, e5, e6 = xor256(e1, e2), xor256(e1, e3), xor256(xor256(m1, m2), m3)
    return [
        ("R1", e1 == xor256(gt.response, gt.pad2)),
        ("R2", e2 == xor256(xor256(gt.pad1, gt.response), masked_alias)),
        ("R3", e3 == xor256(xor256(gt.pad1, gt.pad2), masked_alias)),
        ("R4", e4 == xor256(xor256(gt.pad1, gt.pad2), masked_alias)),
        ("R5", e5 == xor256(xor256(gt.pad1, gt.response), masked_alias)),
        ("R6", e6 == xor256(xor256(gt.pad2, gt.response), masked_alias)),
        ("R7", xor256(e4, e5) == e1),
        ("R8", xor256(e4, e6) == m1),
        ("R9", xor256(e5, e6) == m2),
    ]


def enumerate_subset_hits(
    words: list[tuple[str, Word256]], secrets: dict[str, Word256]
) -> tuple[int, list[tuple[tuple[str, ...], str]]]:
    """XOR every subset of `words`; report collisions with any secret.

    Gray-code enumeration: one XOR per subset. The empty subset is
    included (it can only hit an all-zero secret, which never occurs).
    """
    secret_by_value = {w.to_int(): name for name, w in secrets.items()}
    labels = [name for name, _ in words]
    values = [w.to_int() for _, w in words]
    n = len(values)
    hits: list[tuple[tuple[str, ...], str]] = []
    current = 0
    mask = 0
    for i in range(1, 2**n):
        j = (i & -i).bit_length() - 1  # index of the toggled element
        current ^= values[j]
        mask ^= 1 << j
        hit = secret_by_value.get(current)
        if hit is not None:
            subset = tuple(labels[k] for k in range(n) if mask >> k & 1)
            hits.append((subset, hit))
    return 2**n, hits


def run_eavesdrop_analysis(seed: int, force_zero_pad1: bool = False) -> EavesdropReport:
    """Search all open-channel subset XORs for leaked secrets.

    force_zero_pad1 plants a degenerate server pad so the first masked
    field equals the stored response, which the analysis must flag.
    """
    fixture = build_fixture(seed)
    sim = Simulation(fixture, seed)
    if force_zero_pad1:
        sim.server.rng = FixedWordsRng([Word256.zero()], fallback=derive_rng(seed, "server"))
    result = sim.run_handshake()
    assert result.established
    words = sim.adversary.observed_words()
    secrets = result.ground_truth.secrets()
    subsets, hits = enumerate_subset_hits(words, secrets)
    auth_msg = next(
        e.message for e in result.transcript.events if isinstance(e.message, AuthChallenge)
    )
    relations = _masking_relations(auth_msg, result.ground_truth)
    return EavesdropReport(subsets_checked=subsets, hits=hits, relations=relations)


# ---------------------------------------------------------------------------
# Cross-session linkage: a measured property of the rotation masking.

@dataclass
class LinkageReport:
    """What two consecutive observed sessions surrender retroactively."""

    response_recovered: bool            # session one's stored response
    derivable_session1: list[str]       # session-one secrets inside the closure
    derivable_session2: list[str]


def run_rotation_linkage_analysis(seed: int) -> LinkageReport:
    """Observe two consecutive honest sessions and close the knowledge set.

    The rotation mask of one session is the next challenge XORed with
    the current response, and the very same challenge is re-broadcast
    in clear when the next handshake starts. XORing the two unmasks the
    earlier response, and the earlier session's masks then peel off
    layer by layer, down to its session key. The single-transcript
    analyses above cannot see this; it only appears once a second
    session's challenge crosses the open channel. Reported as measured
    behavior of the scheme, not repaired.
    """
    fixture = build_fixture(seed)
    sim = Simulation(fixture, seed)
    first = sim.run_handshake()
    second = sim.run_handshake()
    assert first.established and second.established

    rotate1 = next(e.message for e in first.transcript.events if isinstance(e.message, CrpRotate))
    challenge2 = next(
        e.message for e in second.transcript.events if isinstance(e.message, AuthChallenge)
    ).challenge
    recovered = xor256(rotate1.challenge_masked, challenge2)
    response_recovered = recovered == first.ground_truth.response

    knowledge = adversary_knowledge(sim.adversary, [first, second], fixture.device_id)
    derivable1 = [
        name for name, secret in first.ground_truth.secrets().items() if knowledge.contains(secret)
    ]
    derivable2 = [
        name for name, secret in second.ground_truth.secrets().items() if knowledge.contains(secret)
    ]
    return LinkageReport(
        response_recovered=response_recovered,
        derivable_session1=derivable1,
        derivable_session2=derivable2,
    )


# ---------------------------------------------------------------------------
# Key-escrow boundary.

@dataclass
class EscrowReport:
    server_holds_secret: list[str]
    nonces_on_secure_channel: bool
    key_derivable_with_open_taps: bool

    @property
    def clean(self) -> bool:
        return not self.server_holds_secret and not self.nonces_on_secure_channel


def run_key_escrow_check(seed: int) -> EscrowReport:
    """The server must end a handshake without the session key.

    Also runs the documented counter-case: a server additionally given
    the open-channel transcript can unmask the client nonce with the
    rotation digest it issued, then walk to the key. That derivation
    succeeding is the model boundary, not a defect.
    """
    fixture = build_fixture(seed)
    sim = Simulation(fixture, seed)
    result = sim.run_handshake()
    assert result.established
    gt = result.ground_truth

    server_words: list[Word256] = []
    for crps, _clients in (result.store_before, result.store_after):
        for record in crps.values():
            server_words.extend([record.challenge, record.response])
    session = sim.server_sessions[gt.session_id]
    server_words.extend([session.pad1, session.pad2, session.challenge, session.response, session.alias_id])
    for event in result.transcript.events:
        if event.channel == "secure":
            msg = event.message
            for name, hint in type(msg).__annotations__.items():
                if hint == "Word256":
                    server_words.append(getattr(msg, name))

    targets = {
        "client_nonce": gt.client_nonce,
        "device_nonce": gt.device_nonce,
        "session_key": gt.client_key,
    }
    span = KnowledgeSet(server_words)
    holds = [name for name, value in targets.items() if value in server_words or span.contains(value)]

    leaky_secure = False
    for event in result.transcript.events:
        if event.channel != "secure":
            continue
        for offset in range(len(event.frame) - 31):
            window = event.frame[offset : offset + 32]
            if window == bytes(gt.client_nonce) or window == bytes(gt.device_nonce):
                leaky_secure = True

    # Counter-case: server plus open-channel taps.
    rotate_ack = next(e.message for e in result.transcript.events if isinstance(e.message, RotateAck))
    client_nonce_msg = next(e.message for e in result.transcript.events if isinstance(e.message, ClientNonce))
    device_nonce_msg = next(e.message for e in result.transcript.events if isinstance(e.message, DeviceNonce))
    nc = xor256(client_nonce_msg.nonce_masked, rotate_ack.crp_digest)
    np_ = xor256(device_nonce_msg.nonce_masked, nc)
    derived = hash_fields([nc, np_, fixture.alias_id, fixture.device_id])
    return EscrowReport(
        server_holds_secret=holds,
        nonces_on_secure_channel=leaky_secure,
        key_derivable_with_open_taps=(derived == gt.client_key),
    )
