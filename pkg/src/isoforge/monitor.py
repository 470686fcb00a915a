"""Run-time isolation monitor.

The monitor is an external observer of the trace.  It is fed events one at a
time (:meth:`Monitor.observe`) and returns violations as soon as they can be
decided; detectors that need the whole run (covert channel capacity, the last
frame's accounting) report from :meth:`Monitor.finalize`.
"""
from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from . import hv_model as hv
from . import vm_interface as vi

SP_INT = "SP-INT"
SP_CONF = "SP-CONF"
SP_KERN = "SP-KERN"
SP_QUOTA = "SP-QUOTA"
TP_SLOT = "TP-SLOT"
TP_WCET = "TP-WCET"
TP_RESID = "TP-RESID"
TP_COVERT = "TP-COVERT"
FT_CONT = "FT-CONT"

PROPERTIES = (SP_INT, SP_CONF, SP_KERN, SP_QUOTA, TP_SLOT, TP_WCET, TP_RESID, TP_COVERT, FT_CONT)

FAULT_ISOLATION = "fault-isolation"

# property -> mechanism tag; a tag may name more than one mechanism
PROPERTY_MECHANISMS: Dict[str, Tuple[str, ...]] = {
    SP_INT: ("M1",),
    SP_CONF: ("M1",),
    SP_KERN: ("M2",),
    SP_QUOTA: ("M4",),
    TP_SLOT: ("T2",),
    TP_WCET: ("T3",),
    TP_RESID: ("T1",),
    TP_COVERT: ("M3", "T4"),
    FT_CONT: (FAULT_ISOLATION,),
}

PROPERTY_NAMES = {
    SP_INT: "spatial integrity",
    SP_CONF: "spatial confidentiality",
    SP_KERN: "kernel-space protection",
    SP_QUOTA: "static allocation",
    TP_SLOT: "slot availability",
    TP_WCET: "bounded execution",
    TP_RESID: "residual registers",
    TP_COVERT: "timing channel",
    FT_CONT: "fault containment",
}

# fewest paired frames before the covert detector estimates capacity
COVERT_MIN_FRAMES = 16
EVIDENCE_CAP = 16


class OutOfOrderEvent(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class SpecHasDefects(ValueError):
    pass


def mechanism_tag(prop: str) -> str:
    return "/".join(PROPERTY_MECHANISMS[prop])


@dataclass(frozen=True)
class BaselineMetrics:
    checksums: Dict[str, Tuple[Optional[int], ...]] = field(default_factory=dict)
    active_ticks: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    latencies: Dict[str, Tuple[Optional[int], ...]] = field(default_factory=dict)
    frames: int = 0

    def to_dict(self) -> dict:
        return {"frames": self.frames,
                "checksums": {k: list(v) for k, v in sorted(self.checksums.items())},
                "active_ticks": {k: list(v) for k, v in sorted(self.active_ticks.items())},
                "latencies": {k: list(v) for k, v in sorted(self.latencies.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineMetrics":
        return cls({k: tuple(v) for k, v in d["checksums"].items()},
                   {k: tuple(v) for k, v in d["active_ticks"].items()},
                   {k: tuple(v) for k, v in d["latencies"].items()},
                   d["frames"])


@dataclass(frozen=True)
class MonitorConfig:
    enabled: FrozenSet[str] = frozenset(PROPERTIES)
    slot_jitter: int = 1
    degradation: float = 0.2
    covert_capacity: float = 0.05
    baseline: Optional[BaselineMetrics] = None

    def __post_init__(self):
        unknown = set(self.enabled) - set(PROPERTIES)
        if unknown:
            raise ValueError("unknown properties: %s" % ", ".join(sorted(unknown)))
        if self.slot_jitter < 0:
            raise ValueError("slot jitter must be >= 0")
        if not 0 < self.degradation < 1:
            raise ValueError("degradation fraction must lie in (0, 1)")
        if not 0 <= self.covert_capacity <= 1:
            raise ValueError("covert capacity bound must lie in [0, 1]")


@dataclass(frozen=True)
class Violation:
    property: str
    mechanism: str
    evidence: Tuple[int, ...]
    detail: str

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("a violation needs at least one evidence event")
        if self.mechanism != mechanism_tag(self.property):
            raise ValueError("mechanism tag %s does not match %s" % (self.mechanism, self.property))

    @property
    def mechanisms(self) -> Tuple[str, ...]:
        return PROPERTY_MECHANISMS[self.property]

    def to_dict(self) -> dict:
        return {"property": self.property, "mechanism": self.mechanism,
                "evidence": list(self.evidence), "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> "Violation":
        return cls(d["property"], d["mechanism"], tuple(d["evidence"]), d["detail"])


@dataclass(frozen=True)
class MonitorReport:
    enabled: Tuple[str, ...]
    violations: Tuple[Violation, ...]
    exercised: Tuple[str, ...]
    interfaces: Tuple[Tuple[str, int], ...]
    metrics: Dict[str, object]

    @property
    def passed(self) -> Dict[str, bool]:
        bad = {v.property for v in self.violations}
        return {p: p not in bad for p in self.enabled}

    @property
    def by_property(self) -> Dict[str, List[Violation]]:
        out: Dict[str, List[Violation]] = {p: [] for p in self.enabled}
        for v in self.violations:
            out[v.property].append(v)
        return out

    @property
    def by_mechanism(self) -> Dict[str, List[Violation]]:
        out: Dict[str, List[Violation]] = {}
        for v in self.violations:
            out.setdefault(v.mechanism, []).append(v)
        return out

    def to_dict(self) -> dict:
        return {"enabled": list(self.enabled),
                "passed": self.passed,
                "violations": [v.to_dict() for v in self.violations],
                "exercised": list(self.exercised),
                "interfaces": [list(i) for i in self.interfaces],
                "metrics": self.metrics}

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorReport":
        return cls(tuple(d["enabled"]), tuple(Violation.from_dict(v) for v in d["violations"]),
                   tuple(d["exercised"]), tuple(tuple(i) for i in d["interfaces"]),
                   d["metrics"])


# -- capacity --------------------------------------------------------------

def quantize(latencies: Sequence[float]) -> List[int]:
    """Split at the median; ties go to the upper class only if the median is the max."""
    med = statistics.median(latencies)
    if med == max(latencies):
        return [1 if v >= med else 0 for v in latencies]
    return [1 if v > med else 0 for v in latencies]


def mutual_information(xs: Sequence[int], ys: Sequence[int]) -> float:
    """Plug-in mutual information of two discrete sequences, in bits."""
    n = len(xs)
    joint = Counter(zip(xs, ys))
    px = Counter(xs)
    py = Counter(ys)
    mi = 0.0
    for (x, y), c in joint.items():
        mi += c / n * math.log2(c * n / (px[x] * py[y]))
    return mi


def estimate_capacity(sent_bits: Sequence[int], latencies: Sequence[float]) -> float:
    if len(sent_bits) != len(latencies):
        raise LengthMismatch("%d bits vs %d latencies" % (len(sent_bits), len(latencies)))
    if not sent_bits:
        raise LengthMismatch("need at least one observation")
    mi = mutual_information(list(sent_bits), quantize(latencies))
    return min(1.0, max(0.0, mi))


def decode_accuracy(sent_bits: Sequence[int], latencies: Sequence[float]) -> float:
    """Fraction of bits recovered by the median-threshold decoder."""
    if len(sent_bits) != len(latencies) or not sent_bits:
        raise LengthMismatch("%d bits vs %d latencies" % (len(sent_bits), len(latencies)))
    decoded = quantize(latencies)
    return sum(int(a == b) for a, b in zip(sent_bits, decoded)) / len(sent_bits)


# -- baseline --------------------------------------------------------------

def capture_baseline(spec: hv.SystemSpec, workloads=None, frames: int = 0) -> BaselineMetrics:
    """Per-frame metrics of the regular partitions on a defect-free run."""
    from . import runner

    if spec.defects:
        raise SpecHasDefects(", ".join(sorted(spec.defects)))
    if frames == 0:
        return BaselineMetrics()
    res = runner.run(spec, {}, frames, workloads=workloads)
    return BaselineMetrics(
        {q: tuple(v) for q, v in res.checksums.items()},
        {q: tuple(v) for q, v in res.active_ticks.items()},
        {q: tuple(v) for q, v in res.latencies.items()},
        frames,
    )


# -- monitor ---------------------------------------------------------------

class Monitor:
    def __init__(self, spec: hv.SystemSpec, config: Optional[MonitorConfig] = None,
                 baseline: Optional[BaselineMetrics] = None):
        self.spec = spec
        self.config = config or MonitorConfig()
        self.baseline = baseline if baseline is not None else self.config.baseline
        self.enabled = frozenset(self.config.enabled)
        sched = spec.schedule
        self.mf = sched.major_frame
        self.regular = set(spec.regular_partitions())
        self.tests = set(spec.test_partitions())
        self.kinds = {p.id: p.kind for p in spec.partitions}
        self.quota = {p.id: p.memory_quota for p in spec.partitions}
        self.status = {q: spec.status_address(q) for q in self.regular}
        # expected slot starts (offset within frame) per partition
        self.slot_offsets: Dict[str, List[int]] = {}
        for off, (pid, _) in zip(sched.slot_starts(), sched.slots):
            self.slot_offsets.setdefault(pid, []).append(off)
        self.expected_ticks = {q: sched.ticks_per_frame(q) for q in self.regular}

        self.last_seq = -1
        self.violations: List[Violation] = []
        self.exercised: set = set()
        self.events = 0
        # scheduling accounting
        self.cur_active: Optional[str] = None
        self.cur_since = 0
        self.cur_switch_seq = 0
        self.frame_ticks: Dict[int, Counter] = {}
        self.frame_switch: Dict[int, List[int]] = {}
        self.closed_frame = -1
        # fault containment
        self.fault_seen: Optional[Tuple[int, int, str]] = None
        self.checksums: Dict[Tuple[str, int], Tuple[int, int]] = {}
        # covert channel: per frame, busy accesses and first observed latency
        self.busy: Dict[str, Dict[int, int]] = {}
        self.samples: Dict[str, Dict[int, Tuple[int, int]]] = {}
        self.interfaces: set = set()
        self.finalized = False

    # -- helpers
    def _flag(self, prop: str, evidence, detail: str, out: List[Violation]):
        if prop not in self.enabled:
            return
        v = Violation(prop, mechanism_tag(prop), tuple(evidence), detail)
        self.violations.append(v)
        out.append(v)

    def observe(self, ev: hv.TraceEvent) -> List[Violation]:
        if self.finalized:
            raise OutOfOrderEvent("monitor already finalized")
        if ev.seq <= self.last_seq:
            raise OutOfOrderEvent("seq %d after %d" % (ev.seq, self.last_seq))
        self.last_seq = ev.seq
        self.events += 1
        out: List[Violation] = []
        handler = getattr(self, "_on_" + ev.kind, None)
        if handler is not None:
            handler(ev, out)
        return out

    # -- spatial
    def _on_MEM_WRITE(self, ev, out):
        self._mem(ev, "write", out)
        q = ev.actor
        if q in self.regular and ev.get("addr") == self.status[q]:
            self.checksums[(q, ev.tick // self.mf)] = (ev.get("value"), ev.seq)

    def _on_MEM_READ(self, ev, out):
        self._mem(ev, "read", out)

    def _on_MEM_DENIED(self, ev, out):
        region = ev.get("region")
        if region is None:
            return
        r = self.spec.region(region)
        self._exercise_mem(ev.actor, r)

    def _exercise_mem(self, actor, r):
        if actor not in self.tests:
            return
        if r.space == "kernel":
            self.exercised.add("M2")
        elif r.owner != actor:
            self.exercised.add("M1")

    def _mem(self, ev, access, out):
        r = self.spec.region(ev.get("region"))
        p = ev.actor
        self._exercise_mem(p, r)
        if r.space == "kernel":
            if access == "write":
                self._flag(SP_KERN, [ev.seq], "%s wrote kernel region %s at %#x" % (p, r.id, ev.get("addr")), out)
            return
        q = r.owner
        if q == p or q not in self.regular or r.granted(p, access):
            return
        if access == "write":
            self._flag(SP_INT, [ev.seq], "%s wrote %s's region %s at %#x" % (p, q, r.id, ev.get("addr")), out)
        else:
            self._flag(SP_CONF, [ev.seq], "%s read %s's region %s at %#x" % (p, q, r.id, ev.get("addr")), out)

    def _on_ALLOC(self, ev, out):
        if ev.actor in self.tests:
            self.exercised.add("M4")
        used = ev.get("used")
        if used > self.quota[ev.actor]:
            self._flag(SP_QUOTA, [ev.seq], "%s holds %d bytes over a quota of %d"
                       % (ev.actor, used, self.quota[ev.actor]), out)

    def _on_ALLOC_DENIED(self, ev, out):
        if ev.actor in self.tests:
            self.exercised.add("M4")

    # -- temporal
    def _on_HYPERCALL(self, ev, out):
        call = vi.hypercall(ev.get("call"))
        if call is None:
            return
        if ev.actor in self.tests:
            self.interfaces.add((vi.PV, call.id))
        bound = self.spec.wcet(call.id)
        if bound is None:
            return
        if ev.actor in self.tests:
            self.exercised.add("T3")
        if ev.get("duration") > bound and not ev.get("aborted"):
            self._flag(TP_WCET, [ev.seq], "%s ran %s for %d ticks, bound %d"
                       % (ev.actor, call.name, ev.get("duration"), bound), out)

    def _on_TRAP(self, ev, out):
        t = vi.trap(ev.get("call"))
        if t is not None and ev.actor in self.tests:
            self.interfaces.add((vi.HWFV, t.id))

    def _on_REG_SNAPSHOT(self, ev, out):
        p = ev.actor
        leaks = [(i, v, w) for i, (v, w) in enumerate(zip(ev.get("regs"), ev.get("writers")))
                 if v != 0 and w is not None and w != p]
        if leaks:
            i, v, w = leaks[0]
            self._flag(TP_RESID, [ev.seq], "%s entered with r%d=%#x left by %s" % (p, i, v, w), out)

    def _on_SLOT_OVERRUN(self, ev, out):
        pass

    def _on_SCHED_SWITCH(self, ev, out):
        src, dst = ev.get("src"), ev.get("dst")
        if src is not None:
            self.exercised.add("T2")
            if src != dst and (src in self.tests or dst in self.tests):
                self.exercised.add("T1")
        self._accrue(ev.tick)
        self._close_frames(ev.tick, out)
        self.cur_active, self.cur_since, self.cur_switch_seq = dst, ev.tick, ev.seq
        frame = ev.tick // self.mf
        self.frame_switch.setdefault(frame, []).append(ev.seq)
        if dst in self.regular and dst in self.slot_offsets:
            offset = ev.tick % self.mf
            expected = max((o for o in self.slot_offsets[dst] if o <= offset), default=None)
            if expected is not None and offset - expected > self.config.slot_jitter:
                self._flag(TP_SLOT, [ev.seq], "%s started %d ticks late in frame %d"
                           % (dst, offset - expected, frame), out)

    def _accrue(self, tick: int):
        if self.cur_active is None:
            return
        t = self.cur_since
        while t < tick:
            frame = t // self.mf
            stop = min(tick, (frame + 1) * self.mf)
            self.frame_ticks.setdefault(frame, Counter())[self.cur_active] += stop - t
            t = stop
        self.cur_since = tick

    def _close_frames(self, tick: int, out):
        upto = tick // self.mf - 1
        while self.closed_frame < upto:
            self.closed_frame += 1
            self._check_frame(self.closed_frame, out)

    def _check_frame(self, frame: int, out):
        ticks = self.frame_ticks.pop(frame, Counter())
        switches = self.frame_switch.pop(frame, [])
        evidence = switches[:EVIDENCE_CAP] or [self.cur_switch_seq]
        floor = 1.0 - self.config.degradation
        for q in sorted(self.regular):
            got, want = ticks[q], self.expected_ticks[q]
            if want and got < floor * want:
                self._flag(TP_SLOT, evidence, "%s ran %d of %d ticks in frame %d" % (q, got, want, frame), out)
        if self.fault_seen is None or self.baseline is None:
            return
        fault_seq, fault_frame, faulty = self.fault_seen
        if frame < fault_frame or frame >= self.baseline.frames:
            return
        for q in sorted(self.regular):
            if q == faulty or q not in self.baseline.checksums:
                continue
            expected = self.baseline.checksums[q][frame]
            got = self.checksums.get((q, frame))
            if got is None:
                self._flag(FT_CONT, [fault_seq], "%s produced no checksum in frame %d after a fault in %s"
                           % (q, frame, faulty), out)
            elif got[0] != expected:
                self._flag(FT_CONT, [fault_seq, got[1]], "%s checksum %#x != baseline %#x in frame %d"
                           % (q, got[0], expected, frame), out)

    # -- faults and device
    def _on_PART_FAULT(self, ev, out):
        if self.fault_seen is None:
            self.fault_seen = (ev.seq, ev.tick // self.mf, ev.actor)

    def _on_DEVICE_ACCESS(self, ev, out):
        p = ev.actor
        if p in self.tests:
            self.exercised.add("M3")
        if ev.get("denied"):
            return
        frame = ev.tick // self.mf
        if ev.get("hold", 0) > 0:
            self.busy.setdefault(p, {}).setdefault(frame, ev.seq)
        self.samples.setdefault(p, {}).setdefault(frame, (ev.get("latency"), ev.seq))

    def _covert(self, out) -> Dict[str, float]:
        found = {}
        for q in sorted(self.samples):
            frames = sorted(self.samples[q])
            if len(frames) < COVERT_MIN_FRAMES:
                continue
            ys = [self.samples[q][f][0] for f in frames]
            for p in sorted(self.busy):
                if p == q:
                    continue
                xs = [1 if f in self.busy[p] else 0 for f in frames]
                if len(set(xs)) < 2:
                    continue
                cap = estimate_capacity(xs, ys)
                found["%s->%s" % (p, q)] = round(cap, 6)
                if cap > self.config.covert_capacity:
                    ev_rx = [self.samples[q][f][1] for f in frames][:EVIDENCE_CAP // 2]
                    ev_tx = sorted(self.busy[p].values())[:EVIDENCE_CAP // 2]
                    self._flag(TP_COVERT, sorted(ev_tx + ev_rx),
                               "%s -> %s device-latency channel carries %.3f bits/symbol (bound %.3f)"
                               % (p, q, cap, self.config.covert_capacity), out)
        return found

    def finalize(self, end_tick: Optional[int] = None) -> MonitorReport:
        out: List[Violation] = []
        if not self.finalized:
            if end_tick is not None:
                self._accrue(end_tick)
                self._close_frames(end_tick, out)
            capacities = self._covert(out)
            self.finalized = True
            self._capacities = capacities
        metrics = {"events": self.events,
                   "covert_capacity": dict(sorted(self._capacities.items())),
                   "frames_checked": self.closed_frame + 1}
        return MonitorReport(
            tuple(p for p in PROPERTIES if p in self.enabled),
            tuple(self.violations),
            tuple(m for m in hv.MECHANISMS if m in self.exercised),
            tuple(sorted(self.interfaces, key=lambda i: (i[0] != vi.PV, i[1]))),
            metrics,
        )


def observe(mon: Monitor, event: hv.TraceEvent) -> List[Violation]:
    return mon.observe(event)


def finalize(mon: Monitor, end_tick: Optional[int] = None) -> MonitorReport:
    return mon.finalize(end_tick)


def check_trace(spec: hv.SystemSpec, trace, config: Optional[MonitorConfig] = None,
                baseline: Optional[BaselineMetrics] = None,
                end_tick: Optional[int] = None) -> MonitorReport:
    """Batch evaluation of a whole trace."""
    mon = Monitor(spec, config, baseline)
    for ev in trace:
        mon.observe(ev)
    return mon.finalize(end_tick)
