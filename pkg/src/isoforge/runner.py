"""Interprets step programs and regular workloads on a booted testbed."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from . import hv_model as hv
from . import vm_interface as vi
from . import workloads as wl


def bind_workloads(spec: hv.SystemSpec) -> Dict[str, wl.Workload]:
    """Representative workload for every regular partition, from its role."""
    out = {}
    for p in spec.partitions:
        if p.kind != hv.KIND_REGULAR:
            continue
        out[p.id] = wl.representative(p.role or "periodic_compute")
        if spec.status_address(p.id) is None:
            raise hv.InvalidSpec("regular partition %s owns no memory for its workload" % p.id)
    return out


@dataclass
class Program:
    steps: tuple
    idx: int = 0
    wait_until: Optional[int] = None
    leak: int = 0
    leak_frame: int = -1

    @property
    def done(self) -> bool:
        return self.idx >= len(self.steps)


@dataclass
class RunResult:
    state: hv.SystemState
    frames: int
    checksums: Dict[str, List[Optional[int]]] = field(default_factory=dict)
    latencies: Dict[str, List[Optional[int]]] = field(default_factory=dict)
    active_ticks: Dict[str, List[int]] = field(default_factory=dict)
    steps_executed: Dict[str, int] = field(default_factory=dict)

    @property
    def trace(self):
        return self.state.trace


def _resolve(spec, actor, args):
    return tuple(vi.resolve_selector(spec, actor, a) for a in args)


def execute_step(state: hv.SystemState, actor: str, step, prog: Program) -> int:
    """Run one step for ``actor``; returns the CPU ticks it costs the actor."""
    spec = state.spec
    if isinstance(step, wl.PVCall):
        return vi.dispatch_pv(state, actor, step.call, _resolve(spec, actor, step.args)).duration
    if isinstance(step, wl.HWFVTrap):
        return vi.dispatch_hwfv(state, actor, step.reason, _resolve(spec, actor, step.payload)).duration
    if isinstance(step, wl.InjectFault):
        args = _resolve(spec, actor, step.args)
        if step.kind == "crash":
            hv.halt(state, actor, "crash")
        elif step.kind == "mem_corrupt":
            hv.check_mem_access(state, actor, args[0], "write", args[1])
        elif step.kind == "reg_corrupt":
            state.write_reg(actor, args[0], args[1])
        elif step.kind == "leak":
            prog.leak = args[0]
            prog.leak_frame = state.frame
            hv.alloc_memory(state, actor, prog.leak)
        return 1
    if isinstance(step, wl.Wait):
        if step.frames:
            prog.wait_until = (state.frame + step.frames) * spec.schedule.major_frame
        else:
            prog.wait_until = state.tick + step.ticks
        return 0
    if isinstance(step, wl.SetGreedy):
        state.greedy[actor] = step.extra_ticks
        return 1
    if isinstance(step, wl.DevPulse):
        if step.busy:
            hv.device_access(state, actor, hold=spec.device.pulse_ticks)
        return 1
    raise TypeError("not a step: %r" % (step,))


def run(spec_or_state, programs: Dict[str, "wl.TestCase"], frames: int, *,
        workloads: Optional[Dict[str, wl.Workload]] = None,
        sink: Optional[Callable[[hv.TraceEvent], None]] = None) -> RunResult:
    """Run ``frames`` major frames with test programs bound to their partitions.

    ``sink`` receives every trace event in order as soon as it is produced.
    """
    if isinstance(spec_or_state, hv.SystemState):
        state = spec_or_state
    else:
        state = hv.boot(spec_or_state)
    spec = state.spec
    if workloads is None:
        workloads = bind_workloads(spec)
    progs = {pid: Program(tuple(tc.steps)) for pid, tc in programs.items()}
    for pid in progs:
        if not spec.has_partition(pid):
            raise KeyError("no partition %s for test program" % pid)

    mf = spec.schedule.major_frame
    end = state.tick + frames * mf
    debt = {p.id: 0 for p in spec.partitions}
    body_frame = {q: -1 for q in workloads}
    result = RunResult(state, frames)
    for q in workloads:
        result.checksums[q] = [None] * frames
        result.latencies[q] = [None] * frames
        result.active_ticks[q] = []
    start_frame = state.frame
    last_ticks = dict(state.active_ticks)
    sent = len(state.trace) if sink is not None else 0
    if sink is not None:
        for ev in state.trace:
            sink(ev)

    while state.tick < end:
        p = state.active
        room = min(hv.ticks_to_switch(state), end - state.tick)
        cost = -1
        if p in state.halted:
            pass
        elif debt[p]:
            cost = 0
        elif p in workloads and body_frame[p] != state.frame:
            body_frame[p] = state.frame
            out = workloads[p].run_frame(state, p, state.frame)
            k = state.frame - start_frame
            if 0 <= k < frames:
                result.checksums[p][k] = out["checksum"]
                result.latencies[p][k] = out["latency"]
            cost = 1
        elif p in progs:
            cost = _program_turn(state, p, progs[p], room)
            if cost > 0:
                result.steps_executed[p] = progs[p].idx
        debt[p] += max(cost, 0)

        if sink is not None and len(state.trace) > sent:
            for ev in state.trace[sent:]:
                sink(ev)
            sent = len(state.trace)

        if cost == 0 and not debt[p]:
            continue  # zero-cost step (wait setup); look again at the same tick
        if debt[p]:
            step = min(debt[p], room)
            debt[p] -= step
        elif cost < 0 and p in progs and progs[p].wait_until is not None \
                and p not in state.halted:
            step = max(1, min(room, progs[p].wait_until - state.tick))
        else:
            step = room
        hv.advance(state, step)
        if sink is not None:
            for ev in state.trace[sent:]:
                sink(ev)
            sent = len(state.trace)
        if state.tick % mf == 0:
            for q in workloads:
                result.active_ticks[q].append(state.active_ticks[q] - last_ticks[q])
            last_ticks = dict(state.active_ticks)
    for p, prog in progs.items():
        result.steps_executed[p] = prog.idx
    return result


def _program_turn(state: hv.SystemState, actor: str, prog: Program, room: int) -> int:
    """Execute at most one action; -1 means the partition idles."""
    if prog.leak and prog.leak_frame != state.frame:
        prog.leak_frame = state.frame
        hv.alloc_memory(state, actor, prog.leak)
        return 1
    if prog.wait_until is not None:
        if state.tick < prog.wait_until:
            return -1
        prog.wait_until = None
    if prog.done:
        return -1
    step = prog.steps[prog.idx]
    prog.idx += 1
    return execute_step(state, actor, step, prog)
