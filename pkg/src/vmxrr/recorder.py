"""Recording: per-exit seeds, metrics frames, and the binary containers.

A recorded exit has two halves. The seed is the input: the fifteen
general-purpose registers saved on exit plus every vmread the handler issued,
in order. The metrics are the output: the vmwrites, the coverage bitmap, and
the cycle cost. Replaying the seed must regenerate the metrics.

Trace container (.iris), all integers little-endian:

    magic "IRIS" | version u16 | field_table_hash u64 | initial_cr0 u64 |
    workload_seed u64 | algo: len u8 + utf8 | profile: len u8 + utf8 |
    frame_count u32 | frames... | fnv1a64 trailer over everything before it

    frame: reason u16 | gpr_count u8 | read_count u8 | write_count u8 |
           cycle_cost u64 | coverage bitmap (19 bytes raw) | entries...
    entry: flag u8 | encoding u8 | value u64            (10 bytes)

Snapshot container (.irisnap) carries resumable session state under the same
integrity scheme with magic "IRSN".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .hypervisor import COVERAGE_BYTES, DispatchResult
from .rng import RNG_ALGORITHM
from .session import (
    NoiseInjector,
    Session,
    SessionResult,
    SessionSnapshot,
    prepare_session,
)
from .vmx import (
    FIELD_TABLE,
    FIELD_TABLE_HASH,
    GPR_COUNT,
    LaunchState,
    fnv1a64,
    guest_cr0_view,
)

TRACE_MAGIC = b"IRIS"
SNAPSHOT_MAGIC = b"IRSN"
FORMAT_VERSION = 1

FLAG_GPR = 0x01
FLAG_VMCS_READ = 0x02
FLAG_VMCS_WRITE = 0x03
_VALID_FLAGS = (FLAG_GPR, FLAG_VMCS_READ, FLAG_VMCS_WRITE)

_ENTRY = struct.Struct("<BBQ")
_FRAME_FIXED = struct.Struct("<HBBBQ")
SEED_ENTRY_SIZE = _ENTRY.size        # 10 bytes


class TraceFormatError(Exception):
    pass


class BadMagic(TraceFormatError):
    pass


class BadVersion(TraceFormatError):
    pass


class FieldTableMismatch(TraceFormatError):
    pass


class TraceCorrupt(TraceFormatError):
    pass


class TraceTruncated(TraceFormatError):
    pass


@dataclass
class SeedEntry:
    flag: int
    encoding: int
    value: int

    def pack(self) -> bytes:
        return _ENTRY.pack(self.flag, self.encoding, self.value)


@dataclass
class ExitFrame:
    reason: int
    cycle_cost: int
    coverage_mask: int
    gpr_entries: list[SeedEntry] = field(default_factory=list)
    read_entries: list[SeedEntry] = field(default_factory=list)
    write_entries: list[SeedEntry] = field(default_factory=list)

    def seed_payload_size(self) -> int:
        return SEED_ENTRY_SIZE * (len(self.gpr_entries) + len(self.read_entries))

    def seed_payload_bytes(self) -> bytes:
        out = bytearray(self.seed_payload_size())
        pos = 0
        for entry in self.gpr_entries:
            _ENTRY.pack_into(out, pos, entry.flag, entry.encoding, entry.value)
            pos += SEED_ENTRY_SIZE
        for entry in self.read_entries:
            _ENTRY.pack_into(out, pos, entry.flag, entry.encoding, entry.value)
            pos += SEED_ENTRY_SIZE
        return bytes(out)

    def clone(self) -> "ExitFrame":
        return ExitFrame(
            self.reason,
            self.cycle_cost,
            self.coverage_mask,
            [SeedEntry(e.flag, e.encoding, e.value) for e in self.gpr_entries],
            [SeedEntry(e.flag, e.encoding, e.value) for e in self.read_entries],
            [SeedEntry(e.flag, e.encoding, e.value) for e in self.write_entries],
        )


@dataclass
class Trace:
    profile: str
    workload_seed: int
    initial_cr0: int
    frames: list[ExitFrame] = field(default_factory=list)
    rng_algorithm: str = RNG_ALGORITHM
    field_table_hash: int = FIELD_TABLE_HASH


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise ValueError("string too long for container")
    return bytes([len(raw)]) + raw


def trace_to_bytes(trace: Trace) -> bytes:
    out = bytearray()
    out += TRACE_MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<Q", trace.field_table_hash)
    out += struct.pack("<Q", trace.initial_cr0)
    out += struct.pack("<Q", trace.workload_seed)
    out += _pack_str(trace.rng_algorithm)
    out += _pack_str(trace.profile)
    out += struct.pack("<I", len(trace.frames))
    for frame in trace.frames:
        out += _FRAME_FIXED.pack(
            frame.reason,
            len(frame.gpr_entries),
            len(frame.read_entries),
            len(frame.write_entries),
            frame.cycle_cost,
        )
        out += frame.coverage_mask.to_bytes(COVERAGE_BYTES, "little")
        for entry in frame.gpr_entries:
            out += entry.pack()
        for entry in frame.read_entries:
            out += entry.pack()
        for entry in frame.write_entries:
            out += entry.pack()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TraceTruncated(
                f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u8()).decode("utf-8")


def _check_envelope(data: bytes, magic: bytes, what: str) -> bytes:
    """Validate magic, version, and trailer; return the body after them."""
    if len(data) < len(magic) + 2 + 8:
        raise TraceTruncated(f"{what} shorter than its envelope")
    if data[: len(magic)] != magic:
        raise BadMagic(f"not a {what}: magic {data[:4]!r}")
    version = struct.unpack_from("<H", data, len(magic))[0]
    if version != FORMAT_VERSION:
        raise BadVersion(f"{what} version {version}, expected {FORMAT_VERSION}")
    body, trailer = data[:-8], data[-8:]
    if struct.unpack("<Q", trailer)[0] != fnv1a64(body):
        raise TraceCorrupt(f"{what} integrity hash mismatch")
    return body


def _parse_entry(cur: _Cursor, counts_gprs: bool) -> SeedEntry:
    flag, encoding, value = _ENTRY.unpack(cur.take(SEED_ENTRY_SIZE))
    if flag not in _VALID_FLAGS:
        raise TraceFormatError(f"bad seed entry flag {flag:#x}")
    if flag == FLAG_GPR:
        if encoding >= GPR_COUNT:
            raise TraceFormatError(f"gpr entry encoding {encoding} out of range")
    elif encoding not in FIELD_TABLE:
        raise TraceFormatError(f"seed entry field encoding {encoding} unknown")
    if counts_gprs != (flag == FLAG_GPR):
        raise TraceFormatError("seed entry flag does not match its section")
    return SeedEntry(flag, encoding, value)


def trace_from_bytes(data: bytes) -> Trace:
    body = _check_envelope(data, TRACE_MAGIC, "trace")
    cur = _Cursor(body)
    cur.take(len(TRACE_MAGIC))
    cur.u16()
    table_hash = cur.u64()
    if table_hash != FIELD_TABLE_HASH:
        raise FieldTableMismatch(
            f"trace field table {table_hash:#x} differs from {FIELD_TABLE_HASH:#x}"
        )
    initial_cr0 = cur.u64()
    workload_seed = cur.u64()
    algorithm = cur.string()
    profile = cur.string()
    frame_count = cur.u32()
    frames: list[ExitFrame] = []
    for _ in range(frame_count):
        reason, n_gpr, n_read, n_write, cycle_cost = _FRAME_FIXED.unpack(
            cur.take(_FRAME_FIXED.size)
        )
        if n_gpr != GPR_COUNT:
            raise TraceFormatError(f"frame carries {n_gpr} gpr entries, expected {GPR_COUNT}")
        coverage = int.from_bytes(cur.take(COVERAGE_BYTES), "little")
        gprs = [_parse_entry(cur, True) for _ in range(n_gpr)]
        reads = [_parse_entry(cur, False) for _ in range(n_read)]
        writes = [_parse_entry(cur, False) for _ in range(n_write)]
        frames.append(ExitFrame(reason, cycle_cost, coverage, gprs, reads, writes))
    if cur.pos != len(body):
        raise TraceCorrupt(f"{len(body) - cur.pos} trailing bytes after last frame")
    return Trace(profile, workload_seed, initial_cr0, frames, algorithm, table_hash)


def save_trace(trace: Trace, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trace_to_bytes(trace))


def load_trace(path) -> Trace:
    with open(path, "rb") as fh:
        return trace_from_bytes(fh.read())


def snapshot_to_bytes(snap: SessionSnapshot) -> bytes:
    out = bytearray()
    out += SNAPSHOT_MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<Q", FIELD_TABLE_HASH)
    out += struct.pack("<B", snap.launch_state)
    out += struct.pack("<QQQ", snap.tsc, snap.virtual_clock, snap.total_exits)
    out += snap.coverage_union.to_bytes(COVERAGE_BYTES, "little")
    if len(snap.gprs) != GPR_COUNT:
        raise ValueError(f"snapshot carries {len(snap.gprs)} registers")
    out += struct.pack(f"<{GPR_COUNT}Q", *snap.gprs)
    items = sorted(snap.vmcs_values.items())
    out += struct.pack("<H", len(items))
    for enc, value in items:
        out += struct.pack("<BQ", enc, value)
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


def snapshot_from_bytes(data: bytes) -> SessionSnapshot:
    body = _check_envelope(data, SNAPSHOT_MAGIC, "snapshot")
    cur = _Cursor(body)
    cur.take(len(SNAPSHOT_MAGIC))
    cur.u16()
    table_hash = cur.u64()
    if table_hash != FIELD_TABLE_HASH:
        raise FieldTableMismatch(
            f"snapshot field table {table_hash:#x} differs from {FIELD_TABLE_HASH:#x}"
        )
    launch = cur.u8()
    if launch not in (0, 1, 2):
        raise TraceFormatError(f"bad launch state {launch}")
    tsc = cur.u64()
    virtual_clock = cur.u64()
    total_exits = cur.u64()
    coverage = int.from_bytes(cur.take(COVERAGE_BYTES), "little")
    gprs = list(struct.unpack(f"<{GPR_COUNT}Q", cur.take(8 * GPR_COUNT)))
    values: dict[int, int] = {}
    for _ in range(cur.u16()):
        enc = cur.u8()
        if enc not in FIELD_TABLE:
            raise TraceFormatError(f"snapshot field encoding {enc} unknown")
        values[enc] = cur.u64()
    if cur.pos != len(body):
        raise TraceCorrupt(f"{len(body) - cur.pos} trailing bytes in snapshot")
    return SessionSnapshot(
        vmcs_values=values,
        launch_state=LaunchState(launch),
        gprs=gprs,
        tsc=tsc,
        coverage_union=coverage,
        virtual_clock=virtual_clock,
        total_exits=total_exits,
    )


def save_snapshot(snap: SessionSnapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(snapshot_to_bytes(snap))


def load_snapshot(path) -> SessionSnapshot:
    with open(path, "rb") as fh:
        return snapshot_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Live recording
# ---------------------------------------------------------------------------

class Recorder:
    """Collects seeds and metrics from a session through the VMCS hooks."""

    def __init__(self, profile: str, workload_seed: int) -> None:
        self.profile = profile
        self.workload_seed = workload_seed
        self.initial_cr0 = 0
        self.frames: list[ExitFrame] = []
        self._session: Session | None = None
        self._gpr_snapshot: list[int] = []
        self._reads: list[SeedEntry] = []
        self._writes: list[SeedEntry] = []

    def attach(self, session: Session) -> None:
        if session.recorder is not None:
            raise RuntimeError("session already has a recorder")
        self._session = session
        session.recorder = self
        vmcs = session.vm.vmcs
        self.initial_cr0 = guest_cr0_view(vmcs)
        vmcs.on_read = self._on_read
        vmcs.on_write = self._on_write

    def detach(self) -> None:
        if self._session is None:
            return
        vmcs = self._session.vm.vmcs
        vmcs.on_read = None
        vmcs.on_write = None
        self._session.recorder = None
        self._session = None

    def _on_read(self, encoding: int, value: int) -> None:
        self._reads.append(SeedEntry(FLAG_VMCS_READ, encoding, value))

    def _on_write(self, encoding: int, value: int) -> None:
        self._writes.append(SeedEntry(FLAG_VMCS_WRITE, encoding, value))

    def begin_exit(self, reason: int) -> None:
        self._gpr_snapshot = list(self._session.vm.gprs.regs)
        self._reads = []
        self._writes = []

    def end_exit(self, result: DispatchResult, frame_mask: int, cycle_cost: int) -> None:
        gprs = [
            SeedEntry(FLAG_GPR, idx, value)
            for idx, value in enumerate(self._gpr_snapshot)
        ]
        self.frames.append(
            ExitFrame(result.reason, cycle_cost, frame_mask, gprs, self._reads, self._writes)
        )
        self._reads = []
        self._writes = []

    def to_trace(self) -> Trace:
        return Trace(self.profile, self.workload_seed, self.initial_cr0, self.frames)


@dataclass
class RecordingOutcome:
    trace: Trace
    start_snapshot: SessionSnapshot
    result: SessionResult
    session: Session
    record_cycles: int


def record(
    profile_name: str,
    workload_seed: int,
    n_exits: int,
    noise_probability: float = 0.0,
) -> RecordingOutcome:
    """Record a full session: boot or restore, attach, run, detach.

    The start snapshot is taken before the recorder attaches; replaying the
    trace from it reproduces the recording's TSC and CR state exactly.
    """
    session, program = prepare_session(profile_name, workload_seed, n_exits)
    start_snapshot = session.snapshot()
    clock_before = session.virtual_clock
    recorder = Recorder(profile_name, workload_seed)
    recorder.attach(session)
    if noise_probability > 0.0:
        session.noise = NoiseInjector(workload_seed, noise_probability)
    result = session.run(program)
    recorder.detach()
    session.noise = None
    return RecordingOutcome(
        trace=recorder.to_trace(),
        start_snapshot=start_snapshot,
        result=result,
        session=session,
        record_cycles=session.virtual_clock - clock_before,
    )
