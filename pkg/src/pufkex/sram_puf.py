"""Software model of an SRAM power-on PUF.

A fabricated chip is an array of cells, each with a nominal startup bit
and a flip probability; manufacturing variation is drawn from a seed so
chips are reproducible. Cells that read identically across repeated
power-ons form the stable pool; a 256-bit challenge selects an ordered
subset of those addresses by hash-chain sampling, and the response is a
hash over the challenge and the selected startup bits, so raw cell
values never leave the device.

Quality is measured the standard way: intra-distance (same PUF, same
challenge, across noisy reads: reproducibility) and inter-distance
(different PUFs, same challenge: uniqueness).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

from .primitives import Rng, SeededRng, SystemRng, Word256, hamming, hash_fields

__all__ = [
    "CellModel",
    "SramChip",
    "StablePool",
    "PufFunction",
    "ChipUnusable",
    "DistanceStats",
    "fabricate_chip",
    "power_on_read",
    "find_stable_cells",
    "expand_challenge",
    "respond",
    "intra_distance",
    "inter_distance",
    "save_identity",
    "load_identity",
]

DEFAULT_CELL_COUNT = 4096
DEFAULT_STABLE_FRACTION = 0.85
DEFAULT_FINGERPRINT_BITS = 96
DEFAULT_QUALIFY_READS = 31
MIN_CELL_COUNT = 512

IDENTITY_MAGIC = b"SPUF"
IDENTITY_VERSION = 1


class ChipUnusable(Exception):
    """The chip cannot back a PUF (stable pool smaller than the fingerprint)."""


@dataclass(frozen=True)
class CellModel:
    nominal_bit: int
    flip_probability: float


@dataclass(frozen=True)
class SramChip:
    """Immutable cell array; all read noise comes from the caller's generator."""

    chip_id: int
    cells: tuple[CellModel, ...]

    @property
    def cell_count(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class StablePool:
    """Addresses whose startup bit repeated across every qualification read."""

    addresses: tuple[int, ...]
    read_count: int


@dataclass(frozen=True)
class PufFunction:
    chip: SramChip
    pool: StablePool
    fingerprint_size: int = DEFAULT_FINGERPRINT_BITS

    def respond(self, challenge: Word256, noise: Rng | None = None) -> Word256:
        return respond(self, challenge, noise)


def fabricate_chip(
    chip_id: int,
    cell_count: int = DEFAULT_CELL_COUNT,
    stable_fraction: float = DEFAULT_STABLE_FRACTION,
) -> SramChip:
    """Deterministically manufacture a chip from its id.

    Nominal bits are unbiased; a `stable_fraction` share of cells gets
    flip probability zero, the rest draw uniformly from (0, 0.5].
    """
    if cell_count < MIN_CELL_COUNT:
        raise ValueError(f"cell_count must be >= {MIN_CELL_COUNT}, got {cell_count}")
    if not 0.0 < stable_fraction <= 1.0:
        raise ValueError(f"stable_fraction must be in (0, 1], got {stable_fraction}")
    rng = SeededRng(chip_id.to_bytes(8, "big", signed=False) + b"/fab")
    cells = []
    for _ in range(cell_count):
        nominal = rng.bit()
        if rng.uniform() < stable_fraction:
            flip = 0.0
        else:
            flip = 0.5 * (1.0 - rng.uniform())  # uniform in (0, 0.5]
        cells.append(CellModel(nominal, flip))
    return SramChip(chip_id=chip_id, cells=tuple(cells))


def power_on_read(chip: SramChip, noise: Rng | None = None) -> list[int]:
    """One simulated startup: each cell's nominal bit, flipped with its probability."""
    bits = [cell.nominal_bit for cell in chip.cells]
    if noise is not None:
        for i, cell in enumerate(chip.cells):
            if cell.flip_probability > 0.0 and noise.uniform() < cell.flip_probability:
                bits[i] ^= 1
    return bits


def find_stable_cells(
    chip: SramChip,
    reads: int = DEFAULT_QUALIFY_READS,
    noise: Rng | None = None,
    fingerprint_size: int = DEFAULT_FINGERPRINT_BITS,
) -> StablePool:
    """Qualify cells over repeated startups; keep those that never changed.

    With reads = 1 every address qualifies vacuously. Raises ChipUnusable
    when fewer than `fingerprint_size` addresses survive.
    """
    if reads < 1:
        raise ValueError("reads must be >= 1")
    if noise is None:
        noise = SystemRng()
    reference = power_on_read(chip, noise)
    stable = [True] * chip.cell_count
    for _ in range(reads - 1):
        sample = power_on_read(chip, noise)
        for i in range(chip.cell_count):
            if stable[i] and sample[i] != reference[i]:
                stable[i] = False
    addresses = tuple(i for i in range(chip.cell_count) if stable[i])
    if len(addresses) < fingerprint_size:
        raise ChipUnusable(
            f"only {len(addresses)} stable cells, need {fingerprint_size}"
        )
    return StablePool(addresses=addresses, read_count=reads)


def expand_challenge(
    challenge: Word256, pool: StablePool, fingerprint_size: int = DEFAULT_FINGERPRINT_BITS
) -> list[int]:
    """Map a challenge to an ordered selection of stable addresses.

    Hash-chain sampling without replacement: round i picks element
    hash(challenge, i) mod remaining from the not-yet-chosen addresses.
    Equal pool and fingerprint sizes make this a pure permutation.
    """
    if len(pool.addresses) < fingerprint_size:
        raise ChipUnusable(
            f"pool holds {len(pool.addresses)} addresses, need {fingerprint_size}"
        )
    remaining = list(pool.addresses)
    selected = []
    for i in range(fingerprint_size):
        digest = hash_fields([challenge, Word256.from_int(i)])
        index = digest.to_int() % len(remaining)
        selected.append(remaining.pop(index))
    return selected


def _pack_bits(bits: list[int]) -> Word256:
    """MSB-first bit packing, zero-padded to 32 bytes."""
    out = bytearray(32)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 0x80 >> (i % 8)
    return Word256(bytes(out))


def respond(puf: PufFunction, challenge: Word256, noise: Rng | None = None) -> Word256:
    """Evaluate the PUF: select addresses, read their bits, hash-blend.

    With no noise the result is a pure function of (chip, pool, challenge).
    The response binds the challenge: R = hash(challenge, packed bits).
    """
    addresses = expand_challenge(challenge, puf.pool, puf.fingerprint_size)
    bits = []
    for addr in addresses:
        cell = puf.chip.cells[addr]
        bit = cell.nominal_bit
        if noise is not None and cell.flip_probability > 0.0:
            if noise.uniform() < cell.flip_probability:
                bit ^= 1
        bits.append(bit)
    return hash_fields([challenge, _pack_bits(bits)])


@dataclass(frozen=True)
class DistanceStats:
    mean: float
    min: int
    max: int


def intra_distance(
    puf: PufFunction, challenge: Word256, trials: int, noise: Rng | None = None
) -> DistanceStats:
    """Pairwise Hamming distance over repeated responses to one challenge."""
    if trials < 2:
        raise ValueError("intra_distance requires trials >= 2")
    responses = [respond(puf, challenge, noise) for _ in range(trials)]
    return _pairwise_stats(responses)


def inter_distance(pufs: list[PufFunction], challenge: Word256) -> DistanceStats:
    """Pairwise Hamming distance across PUFs answering the same challenge."""
    if len(pufs) < 2:
        raise ValueError("inter_distance requires at least 2 PUFs")
    responses = [respond(p, challenge) for p in pufs]
    return _pairwise_stats(responses)


def _pairwise_stats(responses: list[Word256]) -> DistanceStats:
    distances = [
        hamming(responses[i], responses[j])
        for i in range(len(responses))
        for j in range(i + 1, len(responses))
    ]
    return DistanceStats(
        mean=sum(distances) / len(distances), min=min(distances), max=max(distances)
    )


# ---------------------------------------------------------------------------
# Identity file: the device emulator's persistent chip + pool.

def save_identity(path, puf: PufFunction) -> None:
    buf = io.BytesIO()
    buf.write(IDENTITY_MAGIC)
    buf.write(struct.pack("!B", IDENTITY_VERSION))
    buf.write(struct.pack("!QI", puf.chip.chip_id, puf.chip.cell_count))
    for cell in puf.chip.cells:
        buf.write(struct.pack("!Bd", cell.nominal_bit, cell.flip_probability))
    buf.write(struct.pack("!I", len(puf.pool.addresses)))
    for addr in puf.pool.addresses:
        buf.write(struct.pack("!I", addr))
    buf.write(struct.pack("!II", puf.pool.read_count, puf.fingerprint_size))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_identity(path) -> PufFunction:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != IDENTITY_MAGIC:
            raise ValueError("not a PUF identity file")
        version = data[4]
        if version != IDENTITY_VERSION:
            raise ValueError(f"unsupported identity version {version}")
        offset = 5
        chip_id, cell_count = struct.unpack_from("!QI", data, offset)
        offset += 12
        cells = []
        for _ in range(cell_count):
            nominal, flip = struct.unpack_from("!Bd", data, offset)
            offset += 9
            cells.append(CellModel(nominal, flip))
        (pool_count,) = struct.unpack_from("!I", data, offset)
        offset += 4
        addresses = struct.unpack_from(f"!{pool_count}I", data, offset)
        offset += 4 * pool_count
        read_count, fingerprint_size = struct.unpack_from("!II", data, offset)
        offset += 8
        if offset != len(data):
            raise ValueError("trailing bytes in identity file")
    except struct.error as exc:
        raise ValueError(f"corrupt identity file: {exc}") from None
    chip = SramChip(chip_id=chip_id, cells=tuple(cells))
    pool = StablePool(addresses=tuple(addresses), read_count=read_count)
    return PufFunction(chip=chip, pool=pool, fingerprint_size=fingerprint_size)
