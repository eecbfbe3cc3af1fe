"""Replay: drive recorded exits through a dummy VM and compare the results.

The dummy VM never runs a guest. Its preemption timer is armed at zero so,
conceptually, every entry exits immediately; each recorded frame is fed in by
writing the registers, loading read-write fields with their recorded values,
and queueing read-only values so the handler's vmreads pop them in order.
The handler then re-executes for real, and its writes, coverage, and crashes
are compared against what was recorded.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .guest import GuestOp
from .hypervisor import (
    ASYNC_BLOCKS,
    B_DISPATCH_ENTRY,
    B_DISPATCH_KNOWN,
    B_TIMER_ENTRY,
    B_TIMER_REARM,
    B_TIMER_ZERO,
    CrashInfo,
    DISPATCH_COST,
    DispatchResult,
    ExitOutcome,
    OTHER_HANDLER_COST,
    popcount,
)
from .recorder import (
    ExitFrame,
    FLAG_GPR,
    FLAG_VMCS_READ,
    Trace,
    record,
)
from .session import (
    CYCLES_PER_SECOND,
    REFERENCE_EXITS_PER_SECOND,
    Session,
    SessionSnapshot,
)
from .vmx import (
    FIELD_TABLE,
    FieldAccess,
    GPR_COUNT,
    GUEST_CR0,
    CpuMode,
    ExitReason,
    classify_cr0_mode,
)

ASYNC_MASK = sum(1 << b for b in ASYNC_BLOCKS)
IDEAL_COVERAGE_MASK = (
    (1 << B_DISPATCH_ENTRY) | (1 << B_DISPATCH_KNOWN)
    | (1 << B_TIMER_ENTRY) | (1 << B_TIMER_ZERO) | (1 << B_TIMER_REARM)
)


class ReplayError(Exception):
    pass


class OverrideUnderflow(ReplayError):
    def __init__(self, encoding: int) -> None:
        name = FIELD_TABLE[encoding].name if encoding in FIELD_TABLE else str(encoding)
        super().__init__(f"vmread of {name} past the recorded reads")
        self.encoding = encoding


class InvalidSeed(ReplayError):
    pass


class ReplayDivergence(ReplayError):
    pass


@dataclass(frozen=True)
class Divergence:
    frame_index: int
    kind: str        # read_underflow | read_leftover | write_value | write_count
    detail: str


@dataclass
class FrameReplay:
    result: DispatchResult | None   # None when the frame aborted mid-handler
    coverage_mask: int
    writes: list[tuple[int, int]]
    divergences: list[Divergence]
    aborted: bool
    matched_writes: int
    recorded_writes: int


@dataclass
class ReplayResult:
    frames_completed: int
    crash: CrashInfo | None
    divergences: list[Divergence]
    recorded_union: int
    replayed_union: int
    replay_clock: int
    matched_writes: int
    recorded_writes: int
    frame_masks: list[tuple[int, int, int]]   # (reason, recorded, replayed)
    final_writes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.divergences and self.crash is None


class Replayer:
    def __init__(self, snapshot: SessionSnapshot | None = None) -> None:
        self.session = Session()
        self.session.power_on()
        if snapshot is not None:
            self.session.restore(snapshot)
        self.queues: dict[int, deque[int]] = {}
        self.replay_clock = 0
        self.session.vm.vmcs.read_override = self._override

    def _override(self, encoding: int) -> int:
        queue = self.queues.get(encoding)
        if not queue:
            raise OverrideUnderflow(encoding)
        return queue.popleft()

    def inject_seed(self, frame: ExitFrame) -> None:
        if len(frame.gpr_entries) != GPR_COUNT:
            raise InvalidSeed(
                f"seed carries {len(frame.gpr_entries)} registers, expected {GPR_COUNT}"
            )
        gprs = self.session.vm.gprs
        for entry in frame.gpr_entries:
            if entry.flag != FLAG_GPR or entry.encoding >= GPR_COUNT:
                raise InvalidSeed(f"bad gpr entry {entry}")
            gprs.write(entry.encoding, entry.value)
        self.queues.clear()
        vmcs = self.session.vm.vmcs
        for entry in frame.read_entries:
            if entry.flag != FLAG_VMCS_READ:
                raise InvalidSeed(f"bad read entry {entry}")
            spec = FIELD_TABLE.get(entry.encoding)
            if spec is None:
                raise InvalidSeed(f"read entry for unknown field {entry.encoding}")
            if spec.access is FieldAccess.READ_ONLY:
                self.queues.setdefault(entry.encoding, deque()).append(entry.value)
            else:
                vmcs.hw_set(entry.encoding, entry.value)

    def replay_frame(self, frame: ExitFrame, index: int = 0) -> FrameReplay:
        self.inject_seed(frame)
        vmcs = self.session.vm.vmcs
        writes: list[tuple[int, int]] = []
        vmcs.on_write = lambda enc, val: writes.append((enc, val))
        cov = self.session.hyp.cov
        cov.begin_frame()
        divergences: list[Divergence] = []
        result: DispatchResult | None = None
        aborted = False
        try:
            result = self.session.hyp.handle_exit()
        except OverrideUnderflow as exc:
            aborted = True
            divergences.append(Divergence(index, "read_underflow", str(exc)))
        finally:
            vmcs.on_write = None
        mask = cov.end_frame()
        if result is not None:
            self.replay_clock += result.base_cost
        leftover = sum(len(q) for q in self.queues.values() if q)
        if leftover:
            names = ", ".join(
                FIELD_TABLE[enc].name for enc, q in sorted(self.queues.items()) if q
            )
            divergences.append(
                Divergence(index, "read_leftover", f"{leftover} unread values: {names}")
            )
        self.queues.clear()
        self.session.total_exits += 1

        recorded = [(e.encoding, e.value) for e in frame.write_entries]
        matched = 0
        for pos, (rec, rep) in enumerate(zip(recorded, writes)):
            if rec == rep:
                matched += 1
            else:
                rec_name = FIELD_TABLE[rec[0]].name
                rep_name = FIELD_TABLE[rep[0]].name
                divergences.append(
                    Divergence(
                        index,
                        "write_value",
                        f"write {pos}: recorded {rec_name}={rec[1]:#x},"
                        f" replayed {rep_name}={rep[1]:#x}",
                    )
                )
        if len(recorded) != len(writes):
            divergences.append(
                Divergence(
                    index,
                    "write_count",
                    f"recorded {len(recorded)} writes, replayed {len(writes)}",
                )
            )
        return FrameReplay(result, mask, writes, divergences, aborted, matched, len(recorded))

    def replay_trace(self, trace: Trace, strict: bool = False) -> ReplayResult:
        divergences: list[Divergence] = []
        frame_masks: list[tuple[int, int, int]] = []
        all_writes: list[tuple[int, int]] = []
        replayed_union = 0
        matched_writes = 0
        recorded_writes = 0
        crash: CrashInfo | None = None
        completed = 0
        for i, frame in enumerate(trace.frames):
            fr = self.replay_frame(frame, i)
            completed += 1
            replayed_union |= fr.coverage_mask
            divergences.extend(fr.divergences)
            matched_writes += fr.matched_writes
            recorded_writes += fr.recorded_writes
            frame_masks.append((frame.reason, frame.coverage_mask, fr.coverage_mask))
            all_writes.extend(fr.writes)
            if strict and fr.divergences:
                raise ReplayDivergence(fr.divergences[0].detail)
            if fr.aborted:
                break
            if fr.result.outcome is not ExitOutcome.RESUME:
                crash = fr.result.crash
                break
        recorded_union = 0
        for frame in trace.frames:
            recorded_union |= frame.coverage_mask
        return ReplayResult(
            frames_completed=completed,
            crash=crash,
            divergences=divergences,
            recorded_union=recorded_union,
            replayed_union=replayed_union,
            replay_clock=self.replay_clock,
            matched_writes=matched_writes,
            recorded_writes=recorded_writes,
            frame_masks=frame_masks,
            final_writes=all_writes,
        )


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------

@dataclass
class AccuracyReport:
    block_fitting: float            # percent of recorded blocks seen in replay
    write_exact_pct: float
    recorded_blocks: int
    replayed_blocks: int
    matched_writes: int
    recorded_writes: int
    diffs_total: int                # coverage diffs after noise filtering
    diffs_by_reason: dict[str, int]
    noise_filtered: int             # recorded-only bits attributed to injection
    fitting_curve: list[float]


def _reason_name(reason: int) -> str:
    try:
        return ExitReason(reason).name
    except ValueError:
        return f"REASON_{reason}"


def compute_accuracy(result: ReplayResult) -> AccuracyReport:
    rec_union = result.recorded_union
    rep_union = result.replayed_union
    rec_count = popcount(rec_union)
    fitting = 100.0 * popcount(rep_union) / rec_count if rec_count else 100.0
    write_pct = (
        100.0 * result.matched_writes / result.recorded_writes
        if result.recorded_writes
        else 100.0
    )
    diffs_total = 0
    noise_filtered = 0
    diffs_by_reason: dict[str, int] = {}
    curve: list[float] = []
    rec_cum = 0
    rep_cum = 0
    for reason, rec_mask, rep_mask in result.frame_masks:
        diff = rec_mask ^ rep_mask
        noise_bits = diff & ASYNC_MASK & rec_mask
        filtered = popcount(diff & ~ASYNC_MASK)
        noise_filtered += popcount(noise_bits)
        diffs_total += filtered
        if filtered:
            name = _reason_name(reason)
            diffs_by_reason[name] = diffs_by_reason.get(name, 0) + filtered
        rec_cum |= rec_mask
        rep_cum |= rep_mask
        denom = popcount(rec_cum)
        curve.append(100.0 * popcount(rep_cum) / denom if denom else 100.0)
    return AccuracyReport(
        block_fitting=fitting,
        write_exact_pct=write_pct,
        recorded_blocks=rec_count,
        replayed_blocks=popcount(rep_union),
        matched_writes=result.matched_writes,
        recorded_writes=result.recorded_writes,
        diffs_total=diffs_total,
        diffs_by_reason=diffs_by_reason,
        noise_filtered=noise_filtered,
        fitting_curve=curve,
    )


# ---------------------------------------------------------------------------
# CR0 mode trajectory
# ---------------------------------------------------------------------------

def cr0_mode_trajectory(initial_cr0: int, writes) -> list[CpuMode]:
    """Modes visited, given the initial CR0 view and a (field, value) write
    stream; consecutive duplicates collapse."""
    modes = [classify_cr0_mode(initial_cr0)]
    for encoding, value in writes:
        if encoding != GUEST_CR0:
            continue
        mode = classify_cr0_mode(value)
        if mode is not modes[-1]:
            modes.append(mode)
    return modes


def trajectory_of_trace(trace: Trace) -> list[CpuMode]:
    writes = (
        (e.encoding, e.value)
        for frame in trace.frames
        for e in frame.write_entries
    )
    return cr0_mode_trajectory(trace.initial_cr0, writes)


def trajectory_of_replay(trace: Trace, result: ReplayResult) -> list[CpuMode]:
    return cr0_mode_trajectory(trace.initial_cr0, result.final_writes)


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThroughputReport:
    exits: int
    total_cycles: int
    virtual_seconds: float
    exits_per_second: float
    speedup_vs_reference: float
    coverage_union: int = 0


def ideal_throughput(n_exits: int) -> ThroughputReport:
    """Replay floor: timer exits only, nothing but dispatch and the handler."""
    cycles = n_exits * (DISPATCH_COST + OTHER_HANDLER_COST)
    seconds = cycles / CYCLES_PER_SECOND
    per_second = n_exits / seconds if seconds else 0.0
    return ThroughputReport(
        n_exits, cycles, seconds, per_second, per_second / REFERENCE_EXITS_PER_SECOND
    )


def measure_throughput(n_exits: int) -> ThroughputReport:
    """Actually drive n timer exits through an idle dummy VM and count cycles."""
    session = Session()
    session.power_on()
    op = GuestOp(ExitReason.PREEMPTION_TIMER, 0)
    for _ in range(n_exits):
        result = session.drive(op)
        if result.outcome is not ExitOutcome.RESUME:
            raise RuntimeError(f"dummy exit failed: {result.crash}")
    cycles = session.virtual_clock
    seconds = cycles / CYCLES_PER_SECOND
    per_second = n_exits / seconds if seconds else 0.0
    return ThroughputReport(
        n_exits,
        cycles,
        seconds,
        per_second,
        per_second / REFERENCE_EXITS_PER_SECOND,
        session.hyp.cov.union_mask,
    )


@dataclass(frozen=True)
class SpeedupReport:
    profile: str
    exits: int
    record_cycles: int
    replay_cycles: int
    speedup: float


def measure_speedup(profile_name: str, workload_seed: int, n_exits: int) -> SpeedupReport:
    outcome = record(profile_name, workload_seed, n_exits)
    if not outcome.result.ok:
        raise RuntimeError(f"recording crashed: {outcome.result.crash.detail}")
    replayer = Replayer(outcome.start_snapshot)
    replay = replayer.replay_trace(outcome.trace)
    if not replay.clean:
        raise RuntimeError("replay diverged while measuring speedup")
    record_cycles = outcome.record_cycles
    return SpeedupReport(
        profile_name,
        n_exits,
        record_cycles,
        replay.replay_clock,
        record_cycles / replay.replay_clock if replay.replay_clock else 0.0,
    )
