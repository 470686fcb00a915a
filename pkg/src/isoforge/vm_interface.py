"""PV hypercall and HWFV trap surfaces, dispatched into the hypervisor model.

Both dispatchers are total: any id/reason and any argument list yields a
:class:`CallRecord` with a status code.  Nothing here raises on guest input.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from . import hv_model as hv

PV = "PV"
HWFV = "HWFV"

OK = "OK"
EINVAL = "EINVAL"
EPERM = "EPERM"
EFAULT = "EFAULT"
ENOMEM = "ENOMEM"
ETIME = "ETIME"
EACCES = "EACCES"
STATUSES = (OK, EINVAL, EPERM, EFAULT, ENOMEM, ETIME, EACCES)

U64 = 1 << 64
COPY_WORDS_PER_TICK = 64
CONTROL_REGS = 16
DEVICE_PORT = 0

# symbolic address selectors accepted wherever an address is expected;
# they are resolved against the system spec relative to the calling partition
SELECTORS = ("@own", "@peer", "@kernel", "@unmapped", "@mmio", "@mmio_peer")


@dataclass(frozen=True)
class HypercallSpec:
    id: int
    name: str
    arg_names: Tuple[str, ...]
    arg_domains: Tuple[Tuple, ...]
    cost: str = "1 tick"

    @property
    def arg_arity(self) -> int:
        return len(self.arg_names)

    def duration(self, args: Sequence) -> int:
        if self.name == "COPY":
            return max(1, math.ceil(args[2] / COPY_WORDS_PER_TICK))
        return 1

    def to_dict(self) -> dict:
        return {"surface": PV, "id": self.id, "name": self.name,
                "args": [{"name": n, "domain": list(d)}
                         for n, d in zip(self.arg_names, self.arg_domains)],
                "cost": self.cost}


@dataclass(frozen=True)
class TrapSpec:
    id: int
    reason: str
    arg_names: Tuple[str, ...]
    arg_domains: Tuple[Tuple, ...]

    @property
    def name(self) -> str:
        return self.reason

    @property
    def arg_arity(self) -> int:
        return len(self.arg_names)

    def to_dict(self) -> dict:
        return {"surface": HWFV, "id": self.id, "reason": self.reason,
                "args": [{"name": n, "domain": list(d)}
                         for n, d in zip(self.arg_names, self.arg_domains)],
                "cost": "1 tick"}


# Domains list the small, brute-forceable value sets the fuzzer sweeps.
# They are the *in-domain* samples; any u64 (or selector) is still accepted
# where an address or value is expected.
_ADDR = SELECTORS
_PERM = (0, 1)
_VALUE = (0, 1, 0xCAFE, U64 - 1)

PV_CATALOG: Tuple[HypercallSpec, ...] = (
    HypercallSpec(0, "CONSOLE_WRITE", ("len",), ((0, 1, 80, 256),)),
    HypercallSpec(1, "MEM_MAP", ("addr", "perm"), (_ADDR, _PERM)),
    HypercallSpec(2, "MEM_UNMAP", ("addr",), (_ADDR,)),
    HypercallSpec(3, "ALLOC", ("bytes",), ((1, 4096, 8192, 65536, 1 << 20),)),
    HypercallSpec(4, "FREE", ("bytes",), ((1, 4096, 8192, 65536),)),
    HypercallSpec(5, "IPC_SEND", ("dest", "word"), ((0, 1, 2, 3, 4, 5), _VALUE)),
    HypercallSpec(6, "YIELD", (), ()),
    HypercallSpec(7, "DEV_ACCESS", ("hold",), ((0, 1, 4, 8),)),
    HypercallSpec(8, "COPY", ("src", "dst", "len"), (_ADDR, _ADDR, (1, 16, 64, 640, 4096)),
                  "ceil(len/64) ticks"),
    HypercallSpec(9, "INFO", (), ()),
)

HWFV_CATALOG: Tuple[TrapSpec, ...] = (
    TrapSpec(0, "MMIO_READ", ("addr",), (_ADDR,)),
    TrapSpec(1, "MMIO_WRITE", ("addr", "value"), (_ADDR, _VALUE)),
    TrapSpec(2, "IO_PORT", ("port",), ((0, 1, 0x60, 0xFFFF),)),
    TrapSpec(3, "INFO_QUERY", (), ()),
    TrapSpec(4, "HALT", (), ()),
    TrapSpec(5, "CONTROL_REG", ("index", "value"), ((0, 3, 15), _VALUE)),
)

# hard limits on argument values (outside these a call is malformed)
_LIMITS = {
    ("CONSOLE_WRITE", "len"): (0, 4096),
    ("ALLOC", "bytes"): (1, U64 - 1),
    ("FREE", "bytes"): (1, U64 - 1),
    ("IPC_SEND", "dest"): (0, 255),
    ("DEV_ACCESS", "hold"): (0, 64),
    ("COPY", "len"): (1, 1 << 16),
    ("MMIO_WRITE", "value"): (0, U64 - 1),
    ("IPC_SEND", "word"): (0, U64 - 1),
    ("MEM_MAP", "perm"): (0, 1),
    ("IO_PORT", "port"): (0, 0xFFFF),
    ("CONTROL_REG", "index"): (0, CONTROL_REGS - 1),
    ("CONTROL_REG", "value"): (0, U64 - 1),
}
_ADDRESS_ARGS = {"addr", "src", "dst"}


def list_surface(kind: str):
    if kind == PV:
        return PV_CATALOG
    if kind == HWFV:
        return HWFV_CATALOG
    raise ValueError("unknown surface %r" % kind)


def full_catalog():
    return [(PV, h) for h in PV_CATALOG] + [(HWFV, t) for t in HWFV_CATALOG]


def export_catalog() -> str:
    doc = {"version": 1,
           "PV": [h.to_dict() for h in PV_CATALOG],
           "HWFV": [t.to_dict() for t in HWFV_CATALOG]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def hypercall(name_or_id) -> Optional[HypercallSpec]:
    for h in PV_CATALOG:
        if h.name == name_or_id or (type(name_or_id) is int and h.id == name_or_id):
            return h
    return None


def trap(reason) -> Optional[TrapSpec]:
    for t in HWFV_CATALOG:
        if t.reason == reason or (type(reason) is int and t.id == reason):
            return t
    return None


@dataclass(frozen=True)
class CallRecord:
    surface: str
    id: object
    args: Tuple
    result: str
    duration: int
    value: Optional[int] = None

    def to_dict(self) -> dict:
        return {"surface": self.surface, "id": self.id, "args": list(self.args),
                "result": self.result, "duration": self.duration, "value": self.value}


# -- argument handling -----------------------------------------------------

def resolve_selector(spec: hv.SystemSpec, actor: str, token):
    """Turn ``@sel`` or ``@sel+N`` into a concrete address; other values pass through."""
    if not isinstance(token, str) or not token.startswith("@"):
        return token
    name, _, off = token.partition("+")
    try:
        offset = int(off, 0) if off else 0
    except ValueError:
        return token
    base = _selector_base(spec, actor, name)
    if base is None:
        return token
    return base + offset


def _selector_base(spec, actor, name):
    regions = spec.memory_regions
    own = [r for r in regions if r.owner == actor]
    regular = spec.regular_partitions()
    peers = [r for q in regular if q != actor for r in regions if r.owner == q]
    if name == "@own":
        ram = [r for r in own if not r.mmio]
        return ram[0].base + 1 if ram else None
    if name == "@peer":
        ram = [r for r in peers if not r.mmio]
        return ram[0].base + 1 if ram else None
    if name == "@kernel":
        k = [r for r in regions if r.space == "kernel"]
        return k[0].base + 1 if k else None
    if name == "@unmapped":
        return max((r.end for r in regions), default=0) + 0x10000
    if name == "@mmio":
        m = [r for r in own if r.mmio]
        return m[0].base if m else None
    if name == "@mmio_peer":
        m = [r for r in peers if r.mmio]
        return m[0].base if m else None
    return None


def _valid_args(name: str, arg_names, args) -> bool:
    if len(args) != len(arg_names):
        return False
    for an, v in zip(arg_names, args):
        if type(v) is not int:
            return False
        if an in _ADDRESS_ARGS:
            if not 0 <= v < U64:
                return False
            continue
        lo, hi = _LIMITS.get((name, an), (0, U64 - 1))
        if not lo <= v <= hi:
            return False
    return True


def _record(state, surface, actor, ident, args, result, duration, value=None,
            aborted=False):
    kind = hv.HYPERCALL if surface == PV else hv.TRAP
    state.emit(kind, actor, call=ident, args=tuple(_plain(a) for a in args),
               result=result, duration=duration, aborted=aborted, value=value)
    return CallRecord(surface, ident, tuple(args), result, duration, value)


def _plain(v):
    if isinstance(v, (int, str)) or v is None:
        return v
    return repr(v)


def _caller_kind_ok(state, actor, allowed_test_kind) -> bool:
    if not state.spec.has_partition(actor):
        return False
    kind = state.spec.partition(actor).kind
    return kind in (allowed_test_kind, hv.KIND_REGULAR)


def _digest(state, actor) -> int:
    view = (actor, state.tick, state.alloc_used.get(actor, 0),
            state.spec.partition(actor).memory_quota)
    return int.from_bytes(hashlib.sha256(repr(view).encode()).digest()[:8], "big")


# -- PV --------------------------------------------------------------------

def dispatch_pv(state: hv.SystemState, actor: str, ident, args: Sequence = ()) -> CallRecord:
    args = tuple(args) if isinstance(args, (list, tuple)) else (args,)
    spec = hypercall(ident)
    if spec is None:
        return _record(state, PV, actor, _plain(ident), args, EINVAL, 1)
    if actor in state.halted or not _caller_kind_ok(state, actor, hv.KIND_TEST_PV):
        return _record(state, PV, actor, spec.id, args, EINVAL, 1)
    if not _valid_args(spec.name, spec.arg_names, args):
        return _record(state, PV, actor, spec.id, args, EINVAL, 1)
    handler = _PV_HANDLERS[spec.name]
    return handler(state, actor, spec, args)


def _pv_simple(state, actor, spec, args):
    return _record(state, PV, actor, spec.id, args, OK, 1)


def _pv_mem_map(state, actor, spec, args):
    addr, perm = args
    ok = hv.check_mem_access(state, actor, addr, "write" if perm else "read")
    return _record(state, PV, actor, spec.id, args, OK if ok else EPERM, 1)


def _pv_mem_unmap(state, actor, spec, args):
    region = state.spec.region_at(args[0])
    if region is None:
        return _record(state, PV, actor, spec.id, args, EFAULT, 1)
    if region.owner != actor:
        return _record(state, PV, actor, spec.id, args, EPERM, 1)
    return _record(state, PV, actor, spec.id, args, OK, 1)


def _pv_alloc(state, actor, spec, args):
    ok = hv.alloc_memory(state, actor, args[0])
    return _record(state, PV, actor, spec.id, args, OK if ok else ENOMEM, 1)


def _pv_free(state, actor, spec, args):
    ok = hv.free_memory(state, actor, args[0])
    return _record(state, PV, actor, spec.id, args, OK if ok else EINVAL, 1)


def _pv_ipc(state, actor, spec, args):
    dest_idx, word = args
    parts = state.spec.partitions
    if dest_idx >= len(parts):
        return _record(state, PV, actor, spec.id, args, EINVAL, 1)
    dest = parts[dest_idx].id
    if (actor, dest) not in state.spec.channels:
        return _record(state, PV, actor, spec.id, args, EPERM, 1)
    state.inbox.setdefault(dest, []).append(word)
    return _record(state, PV, actor, spec.id, args, OK, 1)


def _pv_dev(state, actor, spec, args):
    latency = hv.device_access(state, actor, hold=args[0])
    if latency is None:
        return _record(state, PV, actor, spec.id, args, EACCES, 1)
    return _record(state, PV, actor, spec.id, args, OK, 1, value=latency)


def _pv_copy(state, actor, spec, args):
    src, dst, length = args
    duration = spec.duration(args)
    bound = state.spec.wcet(spec.id)
    abort = bound is not None and duration > bound and state.spec.enforces("T3")
    words = min(length, bound * COPY_WORDS_PER_TICK) if abort else length
    result = OK
    for i in range(words):
        if not hv.check_mem_access(state, actor, src + i, "read"):
            result = EFAULT
            break
        v = hv.read_word(state, src + i)
        if not hv.check_mem_access(state, actor, dst + i, "write", v):
            result = EFAULT
            break
    if abort:
        state.emit(hv.WCET_ABORT, actor, call=spec.id, bound=bound, requested=duration)
        return _record(state, PV, actor, spec.id, args, ETIME, bound, aborted=True)
    return _record(state, PV, actor, spec.id, args, result, duration)


def _pv_info(state, actor, spec, args):
    return _record(state, PV, actor, spec.id, args, OK, 1, value=_digest(state, actor))


_PV_HANDLERS = {
    "CONSOLE_WRITE": _pv_simple,
    "MEM_MAP": _pv_mem_map,
    "MEM_UNMAP": _pv_mem_unmap,
    "ALLOC": _pv_alloc,
    "FREE": _pv_free,
    "IPC_SEND": _pv_ipc,
    "YIELD": _pv_simple,
    "DEV_ACCESS": _pv_dev,
    "COPY": _pv_copy,
    "INFO": _pv_info,
}


# -- HWFV ------------------------------------------------------------------

def dispatch_hwfv(state: hv.SystemState, actor: str, reason, payload: Sequence = ()) -> CallRecord:
    payload = tuple(payload) if isinstance(payload, (list, tuple)) else (payload,)
    spec = trap(reason)
    if spec is None:
        return _record(state, HWFV, actor, _plain(reason), payload, EINVAL, 1)
    if actor in state.halted or not _caller_kind_ok(state, actor, hv.KIND_TEST_HWFV):
        return _record(state, HWFV, actor, spec.reason, payload, EINVAL, 1)
    if not _valid_args(spec.reason, spec.arg_names, payload):
        return _record(state, HWFV, actor, spec.reason, payload, EINVAL, 1)
    return _HWFV_HANDLERS[spec.reason](state, actor, spec, payload)


def _mmio_region(state, addr):
    region = state.spec.region_at(addr)
    return region if region is not None and region.mmio else None


def _trap_mmio_read(state, actor, spec, payload):
    if _mmio_region(state, payload[0]) is None:
        return _record(state, HWFV, actor, spec.reason, payload, EFAULT, 1)
    ok = hv.check_mem_access(state, actor, payload[0], "read")
    value = hv.read_word(state, payload[0]) if ok else None
    return _record(state, HWFV, actor, spec.reason, payload, OK if ok else EPERM, 1, value=value)


def _trap_mmio_write(state, actor, spec, payload):
    addr, value = payload
    if _mmio_region(state, addr) is None:
        return _record(state, HWFV, actor, spec.reason, payload, EFAULT, 1)
    ok = hv.check_mem_access(state, actor, addr, "write", value)
    return _record(state, HWFV, actor, spec.reason, payload, OK if ok else EPERM, 1)


def _trap_io_port(state, actor, spec, payload):
    if payload[0] != DEVICE_PORT:
        return _record(state, HWFV, actor, spec.reason, payload, EPERM, 1)
    latency = hv.device_access(state, actor)
    if latency is None:
        return _record(state, HWFV, actor, spec.reason, payload, EACCES, 1)
    return _record(state, HWFV, actor, spec.reason, payload, OK, 1, value=latency)


def _trap_info(state, actor, spec, payload):
    return _record(state, HWFV, actor, spec.reason, payload, OK, 1, value=_digest(state, actor))


def _trap_halt(state, actor, spec, payload):
    hv.halt(state, actor, "halt")
    return _record(state, HWFV, actor, spec.reason, payload, OK, 1)


def _trap_control_reg(state, actor, spec, payload):
    index, value = payload
    kernel = [r for r in state.spec.memory_regions if r.space == "kernel"]
    if not kernel or index >= kernel[0].size:
        return _record(state, HWFV, actor, spec.reason, payload, EFAULT, 1)
    ok = hv.check_mem_access(state, actor, kernel[0].base + index, "write", value)
    return _record(state, HWFV, actor, spec.reason, payload, OK if ok else EPERM, 1)


_HWFV_HANDLERS = {
    "MMIO_READ": _trap_mmio_read,
    "MMIO_WRITE": _trap_mmio_write,
    "IO_PORT": _trap_io_port,
    "INFO_QUERY": _trap_info,
    "HALT": _trap_halt,
    "CONTROL_REG": _trap_control_reg,
}


def exercised_interfaces(trace, spec: hv.SystemSpec) -> List[Tuple[str, int]]:
    """Distinct catalog entries invoked by test partitions, in catalog order."""
    tests = set(spec.test_partitions())
    seen = set()
    for ev in trace:
        if ev.actor not in tests:
            continue
        if ev.kind == hv.HYPERCALL:
            h = hypercall(ev.get("call"))
            if h is not None:
                seen.add((PV, h.id))
        elif ev.kind == hv.TRAP:
            t = trap(ev.get("call"))
            if t is not None:
                seen.add((HWFV, t.id))
    return [(s, e.id) for s, e in full_catalog() if (s, e.id) in seen]
