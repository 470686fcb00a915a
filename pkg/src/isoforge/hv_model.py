"""Tick-based model of a partitioning hypervisor.

The eight partitioning mechanisms are enforcement points that are always on
unless the system spec carries the matching seeded defect:

    M1  user-space memory access control (split into write/read checks)
    M2  kernel-space memory access control
    M3  hardware (shared device) access control
    M4  static memory allocation (quotas)
    T1  CPU register scrubbing on context switch
    T2  cyclic scheduler
    T3  per-hypercall WCET bound
    T4  temporal normalization of device latency

Everything observable is appended to ``state.trace`` as a :class:`TraceEvent`.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

NUM_REGS = 8
REG_MASK = (1 << 64) - 1
HYPERVISOR = "hypervisor"

KIND_TEST_PV = "test-PV"
KIND_TEST_HWFV = "test-HWFV"
KIND_REGULAR = "regular"
PARTITION_KINDS = (KIND_TEST_PV, KIND_TEST_HWFV, KIND_REGULAR)

MECHANISMS = ("M1", "M2", "M3", "M4", "T1", "T2", "T3", "T4")

MECHANISM_NAMES = {
    "M1": "Access control to user-space memory",
    "M2": "Access control to kernel-space memory",
    "M3": "Access control to hardware resources",
    "M4": "Static memory allocation",
    "T1": "CPU registers reuse",
    "T2": "Cyclical scheduler",
    "T3": "Worst-case execution time",
    "T4": "Temporal normalization",
}

# defect id -> (mechanism label, what it switches off)
DEFECTS = {
    "D-M1W": ("M1", "cross-partition user-space writes are not checked"),
    "D-M1R": ("M1", "cross-partition user-space reads are not checked"),
    "D-M2": ("M2", "guest writes to kernel space are not checked"),
    "D-M3": ("M3", "device windows and device separation are not enforced"),
    "D-M4": ("M4", "allocation quotas are not enforced"),
    "D-T1": ("T1", "registers are neither scrubbed nor reloaded on switch"),
    "D-T2": ("T2", "a greedy partition may overrun its slot"),
    "D-T3": ("T3", "hypercalls are not aborted at their WCET bound"),
    "D-T4": ("T4", "device latency is not normalized"),
}

# trace event kinds
MEM_READ = "MEM_READ"
MEM_WRITE = "MEM_WRITE"
MEM_DENIED = "MEM_DENIED"
SCHED_SWITCH = "SCHED_SWITCH"
HYPERCALL = "HYPERCALL"
TRAP = "TRAP"
ALLOC = "ALLOC"
ALLOC_DENIED = "ALLOC_DENIED"
DEVICE_ACCESS = "DEVICE_ACCESS"
PART_FAULT = "PART_FAULT"
REG_SNAPSHOT = "REG_SNAPSHOT"
SLOT_OVERRUN = "SLOT_OVERRUN"
WCET_ABORT = "WCET_ABORT"

EVENT_KINDS = (
    MEM_READ, MEM_WRITE, MEM_DENIED, SCHED_SWITCH, HYPERCALL, TRAP, ALLOC,
    ALLOC_DENIED, DEVICE_ACCESS, PART_FAULT, REG_SNAPSHOT, SLOT_OVERRUN,
    WCET_ABORT,
)


class InvalidSpec(ValueError):
    pass


class UnknownDefect(KeyError):
    pass


class SpecFrozen(RuntimeError):
    """Defects can only be seeded into a spec that has not been booted."""


@dataclass(frozen=True)
class MemoryRegion:
    id: str
    base: int
    size: int
    space: str = "user"
    owner: str = HYPERVISOR
    grants: FrozenSet[Tuple[str, str]] = frozenset()
    mmio: bool = False

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def granted(self, partition: str, kind: str) -> bool:
        return (partition, kind) in self.grants


@dataclass(frozen=True)
class PartitionSpec:
    id: str
    kind: str
    memory_quota: int
    regions_owned: Tuple[str, ...] = ()
    role: str = ""

    @property
    def is_test(self) -> bool:
        return self.kind != KIND_REGULAR


@dataclass(frozen=True)
class CyclicSchedule:
    slots: Tuple[Tuple[str, int], ...]

    @property
    def major_frame(self) -> int:
        return sum(length for _, length in self.slots)

    def slot_starts(self) -> List[int]:
        starts, t = [], 0
        for _, length in self.slots:
            starts.append(t)
            t += length
        return starts

    def slot_index_at(self, offset: int) -> int:
        """Slot index covering ``offset`` (0 <= offset < major_frame)."""
        t = 0
        for i, (_, length) in enumerate(self.slots):
            t += length
            if offset < t:
                return i
        raise ValueError(offset)

    def ticks_per_frame(self, partition: str) -> int:
        return sum(length for p, length in self.slots if p == partition)


@dataclass(frozen=True)
class DeviceSpec:
    base_latency: int = 2
    normalized_latency: int = 16
    pulse_ticks: int = 4
    # partition -> ((offset, length), ...) inside the major frame;
    # a partition without an entry may use the device during its own slots
    windows: Tuple[Tuple[str, Tuple[Tuple[int, int], ...]], ...] = ()

    def windows_for(self, partition: str) -> Optional[Tuple[Tuple[int, int], ...]]:
        for p, w in self.windows:
            if p == partition:
                return w
        return None


@dataclass(frozen=True)
class SystemSpec:
    partitions: Tuple[PartitionSpec, ...]
    memory_regions: Tuple[MemoryRegion, ...]
    schedule: CyclicSchedule
    channels: Tuple[Tuple[str, str], ...] = ()
    device: DeviceSpec = DeviceSpec()
    wcet_table: Tuple[Tuple[int, int], ...] = ()
    defects: FrozenSet[str] = frozenset()
    booted: bool = field(default=False, compare=False)

    def partition(self, pid: str) -> PartitionSpec:
        for p in self.partitions:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def has_partition(self, pid) -> bool:
        return any(p.id == pid for p in self.partitions)

    def region(self, rid: str) -> MemoryRegion:
        for r in self.memory_regions:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def region_at(self, addr) -> Optional[MemoryRegion]:
        for r in self.memory_regions:
            if r.contains(addr):
                return r
        return None

    def wcet(self, call_id: int) -> Optional[int]:
        for k, v in self.wcet_table:
            if k == call_id:
                return v
        return None

    def enforces(self, mech: str) -> bool:
        """True unless the mechanism (M1W/M1R for the M1 halves) is defective."""
        return ("D-" + mech) not in self.defects

    def regular_partitions(self) -> List[str]:
        return [p.id for p in self.partitions if p.kind == KIND_REGULAR]

    def test_partitions(self) -> List[str]:
        return [p.id for p in self.partitions if p.kind != KIND_REGULAR]

    def owned_regions(self, pid: str) -> List[MemoryRegion]:
        return [r for r in self.memory_regions if r.owner == pid]

    def status_address(self, pid: str) -> Optional[int]:
        """First word of the partition's first non-MMIO region."""
        for rid in self.partition(pid).regions_owned:
            r = self.region(rid)
            if not r.mmio:
                return r.base
        return None


@dataclass
class RegisterContext:
    regs: List[int] = field(default_factory=lambda: [0] * NUM_REGS)
    writers: List[Optional[str]] = field(default_factory=lambda: [None] * NUM_REGS)

    def __post_init__(self):
        if len(self.regs) != NUM_REGS or len(self.writers) != NUM_REGS:
            raise ValueError("register context must hold exactly %d registers" % NUM_REGS)

    def copy(self) -> "RegisterContext":
        return RegisterContext(list(self.regs), list(self.writers))


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    tick: int
    kind: str
    actor: str
    payload: Tuple[Tuple[str, object], ...] = ()

    def get(self, key, default=None):
        for k, v in self.payload:
            if k == key:
                return v
        return default

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "tick": self.tick,
            "kind": self.kind,
            "actor": self.actor,
            "payload": {k: _jsonable(v) for k, v in self.payload},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        payload = tuple(sorted((k, _frozen(v)) for k, v in d["payload"].items()))
        return cls(d["seq"], d["tick"], d["kind"], d["actor"], payload)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _frozen(v):
    if isinstance(v, list):
        return tuple(_frozen(x) for x in v)
    return v


@dataclass
class SystemState:
    spec: SystemSpec
    tick: int = 0
    active: str = ""
    slot: int = 0
    saved_contexts: Dict[str, RegisterContext] = field(default_factory=dict)
    live: RegisterContext = field(default_factory=RegisterContext)
    alloc_used: Dict[str, int] = field(default_factory=dict)
    memory_words: Dict[int, int] = field(default_factory=dict)
    halted: set = field(default_factory=set)
    trace: List[TraceEvent] = field(default_factory=list)
    greedy: Dict[str, int] = field(default_factory=dict)
    active_ticks: Dict[str, int] = field(default_factory=dict)
    inbox: Dict[str, List[int]] = field(default_factory=dict)
    # shared device: busy ticks enqueued in the current major frame
    device_queue: List[Tuple[str, int]] = field(default_factory=list)
    device_frame: int = 0
    # pending delayed switch: (tick, slot index) while a slot overrun is in progress
    overrun: Optional[Tuple[int, int]] = None
    next_seq: int = 0

    @property
    def live_regs(self) -> List[int]:
        return self.live.regs

    @property
    def frame(self) -> int:
        return self.tick // self.spec.schedule.major_frame

    def emit(self, kind: str, actor: str, **payload) -> TraceEvent:
        ev = TraceEvent(self.next_seq, self.tick, kind, actor,
                        tuple(sorted((k, _frozen(v)) for k, v in payload.items())))
        self.next_seq += 1
        self.trace.append(ev)
        return ev

    def write_reg(self, actor: str, idx: int, value: int) -> None:
        self.live.regs[idx] = value & REG_MASK
        self.live.writers[idx] = actor


def validate(spec: SystemSpec) -> None:
    ids = [p.id for p in spec.partitions]
    if not ids:
        raise InvalidSpec("no partitions")
    if len(set(ids)) != len(ids):
        raise InvalidSpec("duplicate partition ids")
    for p in spec.partitions:
        if p.kind not in PARTITION_KINDS:
            raise InvalidSpec("partition %s: unknown kind %r" % (p.id, p.kind))
        if p.id == HYPERVISOR:
            raise InvalidSpec("partition id %r is reserved" % HYPERVISOR)

    rids = [r.id for r in spec.memory_regions]
    if len(set(rids)) != len(rids):
        raise InvalidSpec("duplicate region ids")
    regions = sorted(spec.memory_regions, key=lambda r: r.base)
    for r in regions:
        if r.size <= 0 or r.base < 0:
            raise InvalidSpec("region %s: bad extent" % r.id)
        if r.space not in ("user", "kernel"):
            raise InvalidSpec("region %s: unknown space %r" % (r.id, r.space))
        if r.space == "kernel" and r.owner != HYPERVISOR:
            raise InvalidSpec("kernel region %s must be owned by the hypervisor" % r.id)
        if r.owner != HYPERVISOR and r.owner not in ids:
            raise InvalidSpec("region %s: unknown owner %s" % (r.id, r.owner))
        for who, perm in r.grants:
            if who not in ids or perm not in ("read", "write"):
                raise InvalidSpec("region %s: bad grant (%s, %s)" % (r.id, who, perm))
    for a, b in zip(regions, regions[1:]):
        if a.end > b.base:
            raise InvalidSpec("regions %s and %s overlap" % (a.id, b.id))

    for p in spec.partitions:
        owned = 0
        for rid in p.regions_owned:
            if rid not in rids:
                raise InvalidSpec("partition %s: unknown region %s" % (p.id, rid))
            r = spec.region(rid)
            if r.owner != p.id:
                raise InvalidSpec("partition %s lists region %s owned by %s" % (p.id, rid, r.owner))
            owned += r.size
        if p.memory_quota < owned:
            raise InvalidSpec("partition %s: quota below statically owned memory" % p.id)

    if not spec.schedule.slots:
        raise InvalidSpec("empty schedule")
    for pid, length in spec.schedule.slots:
        if pid not in ids:
            raise InvalidSpec("schedule references unknown partition %s" % pid)
        if length <= 0:
            raise InvalidSpec("slot lengths must be positive")

    for a, b in spec.channels:
        if a not in ids or b not in ids:
            raise InvalidSpec("channel (%s, %s) references unknown partition" % (a, b))
        if a == b:
            raise InvalidSpec("self-channel on %s" % a)

    for call_id, bound in spec.wcet_table:
        if bound < 1:
            raise InvalidSpec("WCET bound for call %s must be >= 1" % call_id)

    for d in spec.defects:
        if d not in DEFECTS:
            raise InvalidSpec("unknown defect %s" % d)

    dev = spec.device
    if dev.base_latency < 0 or dev.normalized_latency < 0 or dev.pulse_ticks < 0:
        raise InvalidSpec("negative device latency")
    mf = spec.schedule.major_frame
    for pid, wins in dev.windows:
        if pid not in ids:
            raise InvalidSpec("device window for unknown partition %s" % pid)
        for off, length in wins:
            if off < 0 or length <= 0 or off + length > mf:
                raise InvalidSpec("device window (%d, %d) outside major frame" % (off, length))


def seed_defect(spec, d: str) -> SystemSpec:
    if isinstance(spec, SystemState):
        spec = spec.spec
    if d not in DEFECTS:
        raise UnknownDefect(d)
    if spec.booted:
        raise SpecFrozen("defects are fixed at boot time")
    return dataclasses.replace(spec, defects=spec.defects | {d})


def boot(spec: SystemSpec) -> SystemState:
    validate(spec)
    spec = dataclasses.replace(spec, booted=True)
    first = spec.schedule.slots[0][0]
    state = SystemState(spec=spec, active=first, slot=0)
    for p in spec.partitions:
        state.saved_contexts[p.id] = RegisterContext()
        state.alloc_used[p.id] = sum(spec.region(r).size for r in p.regions_owned)
        state.active_ticks[p.id] = 0
    state.emit(SCHED_SWITCH, first, src=None, dst=first, slot=0)
    return state


# -- scheduling ------------------------------------------------------------

def ticks_to_switch(state: SystemState) -> int:
    """Ticks until the next scheduling decision (slot boundary or overrun end)."""
    if state.overrun is not None:
        return state.overrun[0] - state.tick
    sched = state.spec.schedule
    mf = sched.major_frame
    offset = state.tick % mf
    end = 0
    for _, length in sched.slots:
        end += length
        if offset < end:
            return end - offset
    raise AssertionError("unreachable")


def advance(state: SystemState, n: int) -> List[TraceEvent]:
    if n < 1:
        raise ValueError("advance needs n >= 1")
    first = len(state.trace)
    sched = state.spec.schedule
    mf = sched.major_frame
    starts = sched.slot_starts()
    boundary = {s: i for i, s in enumerate(starts)}
    for _ in range(n):
        state.active_ticks[state.active] += 1
        state.tick += 1
        if state.overrun is not None:
            due, idx = state.overrun
            if state.tick == due:
                state.overrun = None
                _switch(state, idx)
            continue
        offset = state.tick % mf
        if offset in boundary:
            _slot_boundary(state, boundary[offset])
    return state.trace[first:]


def _slot_boundary(state: SystemState, idx: int) -> None:
    outgoing = state.active
    extra = state.greedy.get(outgoing, 0)
    if extra > 0 and not state.spec.enforces("T2") and outgoing not in state.halted:
        victim, length = state.spec.schedule.slots[idx]
        extra = min(extra, length - 1)
        if extra > 0:
            state.overrun = (state.tick + extra, idx)
            state.emit(SLOT_OVERRUN, outgoing, extra=extra, victim=victim, slot=idx)
            return
    _switch(state, idx)


def _switch(state: SystemState, idx: int) -> None:
    src = state.active
    dst = state.spec.schedule.slots[idx][0]
    state.slot = idx
    state.emit(SCHED_SWITCH, dst, src=src, dst=dst, slot=idx)
    context_switch(state, src, dst)


def context_switch(state: SystemState, src: str, dst: str) -> List[TraceEvent]:
    first = len(state.trace)
    if src != dst:
        state.saved_contexts[src] = state.live.copy()
        if state.spec.enforces("T1"):
            state.live = RegisterContext()
            state.live = state.saved_contexts[dst].copy()
        state.active = dst
    state.emit(REG_SNAPSHOT, dst, regs=tuple(state.live.regs),
               writers=tuple(state.live.writers))
    return state.trace[first:]


# -- spatial mechanisms ----------------------------------------------------

def check_mem_access(state: SystemState, actor: str, addr, kind: str,
                     value: Optional[int] = None) -> bool:
    """Decide an access by ``actor``; writes with a value update memory on allow."""
    region = state.spec.region_at(addr) if isinstance(addr, int) else None
    if region is None:
        state.emit(MEM_DENIED, actor, addr=addr if isinstance(addr, int) else None,
                   region=None, access=kind, reason="unmapped")
        return False
    spec = state.spec
    if region.space == "kernel":
        allowed = kind == "write" and not spec.enforces("M2")
        reason = "kernel"
    elif region.owner == actor or region.granted(actor, kind):
        allowed, reason = True, "owner" if region.owner == actor else "grant"
    elif kind == "write":
        allowed, reason = not spec.enforces("M1W"), "foreign"
    else:
        allowed, reason = not spec.enforces("M1R"), "foreign"
    if not allowed:
        state.emit(MEM_DENIED, actor, addr=addr, region=region.id, access=kind, reason=reason)
        return False
    if kind == "write":
        if value is not None:
            state.memory_words[addr] = value & REG_MASK
        state.emit(MEM_WRITE, actor, addr=addr, region=region.id, owner=region.owner,
                   space=region.space, value=value)
    else:
        state.emit(MEM_READ, actor, addr=addr, region=region.id, owner=region.owner,
                   space=region.space, value=state.memory_words.get(addr, 0))
    return True


def read_word(state: SystemState, addr: int) -> int:
    return state.memory_words.get(addr, 0)


def alloc_memory(state: SystemState, actor: str, nbytes: int) -> bool:
    if nbytes <= 0:
        raise ValueError("allocation size must be positive")
    quota = state.spec.partition(actor).memory_quota
    used = state.alloc_used[actor]
    if used + nbytes <= quota or not state.spec.enforces("M4"):
        state.alloc_used[actor] = used + nbytes
        state.emit(ALLOC, actor, bytes=nbytes, used=used + nbytes, quota=quota)
        return True
    state.emit(ALLOC_DENIED, actor, bytes=nbytes, used=used, quota=quota)
    return False


def free_memory(state: SystemState, actor: str, nbytes: int) -> bool:
    static = sum(r.size for r in state.spec.owned_regions(actor))
    if nbytes <= 0 or state.alloc_used[actor] - nbytes < static:
        return False
    state.alloc_used[actor] -= nbytes
    return True


# -- device ----------------------------------------------------------------

def in_device_window(state: SystemState, actor: str) -> bool:
    sched = state.spec.schedule
    offset = state.tick % sched.major_frame
    wins = state.spec.device.windows_for(actor)
    if wins is None:
        starts = sched.slot_starts()
        wins = tuple((s, length) for s, (p, length) in zip(starts, sched.slots) if p == actor)
    return any(off <= offset < off + length for off, length in wins)


def device_access(state: SystemState, actor: str, hold: int = 0) -> Optional[int]:
    """Access the shared device, holding it busy for ``hold`` extra ticks.

    Returns the observed latency, or None when M3 denies the access.
    Contention is the sum of busy ticks queued by other partitions during
    the current major frame; the queue drains at every frame boundary.
    """
    spec = state.spec
    dev = spec.device
    if state.frame != state.device_frame:
        state.device_queue = []
        state.device_frame = state.frame
    m3 = spec.enforces("M3")
    if m3 and not in_device_window(state, actor):
        state.emit(DEVICE_ACCESS, actor, denied=True, latency=None, hold=hold)
        return None
    if m3 and spec.enforces("T4"):
        latency = dev.normalized_latency
    else:
        contention = sum(t for who, t in state.device_queue if who != actor)
        latency = dev.base_latency + contention
    if hold > 0:
        state.device_queue.append((actor, hold))
    state.emit(DEVICE_ACCESS, actor, denied=False, latency=latency, hold=hold)
    return latency


# -- faults ----------------------------------------------------------------

def halt(state: SystemState, actor: str, kind: str) -> TraceEvent:
    state.halted.add(actor)
    return state.emit(PART_FAULT, actor, fault=kind)


# -- snapshot / restore ----------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    state: SystemState


def snapshot(state: SystemState) -> Snapshot:
    return Snapshot(copy.deepcopy(state))


def restore(snap: Snapshot) -> SystemState:
    return copy.deepcopy(snap.state)
