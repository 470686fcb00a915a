"""Test-case generation for test partitions and workloads for regular ones.

Every generator is a pure function of its seed and policy: the same inputs
always produce the same list of :class:`TestCase` objects.
"""
from __future__ import annotations

import hashlib
import itertools
import random
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

from . import hv_model as hv
from . import vm_interface as vi

FUZZ = "fuzz"
FAULT_INJECTION = "fault_injection"
SCRIPTED = "scripted"
COVERT_PROBE = "covert_probe"
TECHNIQUES = (FUZZ, FAULT_INJECTION, SCRIPTED, COVERT_PROBE)

POLICIES = ("sweep", "random", "malformed")
FAULT_KINDS = ("crash", "mem_corrupt", "reg_corrupt", "leak")
DEFAULT_TARGETS = {vi.PV: "T1", vi.HWFV: "T2"}

# argument values outside every declared domain
_BAD_VALUES = (-1, vi.U64, "junk", None, 2.5)
_BAD_PV_IDS = (-1, 10, 42, 255, vi.U64, "BOGUS")
_BAD_TRAP_REASONS = ("BOGUS", "halt", 6, -1, 99)


class ParseError(ValueError):
    def __init__(self, line: int, reason: str, column: int = 1):
        super().__init__("line %d, column %d: %s" % (line, column, reason))
        self.line = line
        self.column = column
        self.reason = reason


class PlanTargetsRegularPartition(ValueError):
    pass


class UnknownProfile(KeyError):
    pass


# -- steps -----------------------------------------------------------------

@dataclass(frozen=True)
class PVCall:
    call: object
    args: Tuple = ()


@dataclass(frozen=True)
class HWFVTrap:
    reason: object
    payload: Tuple = ()


@dataclass(frozen=True)
class InjectFault:
    kind: str
    args: Tuple = ()


@dataclass(frozen=True)
class Wait:
    ticks: int = 0
    frames: int = 0


@dataclass(frozen=True)
class SetGreedy:
    extra_ticks: int


@dataclass(frozen=True)
class DevPulse:
    busy: bool


Step = Union[PVCall, HWFVTrap, InjectFault, Wait, SetGreedy, DevPulse]

_STEP_TYPES = {cls.__name__: cls for cls in (PVCall, HWFVTrap, InjectFault, Wait, SetGreedy, DevPulse)}


def step_to_dict(step: Step) -> dict:
    d = {"step": type(step).__name__}
    for k, v in step.__dict__.items():
        d[k] = list(v) if isinstance(v, tuple) else v
    return d


def step_from_dict(d: dict) -> Step:
    d = dict(d)
    cls = _STEP_TYPES[d.pop("step")]
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class TestCase:
    id: int
    seed: int
    technique: str
    steps: Tuple[Step, ...]
    target: str

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a test case needs at least one step")

    def to_dict(self) -> dict:
        return {"id": self.id, "seed": self.seed, "technique": self.technique,
                "target": self.target, "steps": [step_to_dict(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "TestCase":
        return cls(d["id"], d["seed"], d["technique"],
                   tuple(step_from_dict(s) for s in d["steps"]), d["target"])


def derive_seed(seed: int, *parts) -> int:
    h = hashlib.sha256(repr((seed,) + parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


# -- fuzzing ---------------------------------------------------------------

def _catalog_pairs(surface_catalog) -> List[Tuple[str, object]]:
    pairs = []
    for item in surface_catalog:
        if isinstance(item, tuple):
            pairs.append(item)
        elif isinstance(item, vi.HypercallSpec):
            pairs.append((vi.PV, item))
        else:
            pairs.append((vi.HWFV, item))
    return pairs


def _make_step(surface, entry, args) -> Step:
    if surface == vi.PV:
        return PVCall(entry.name, tuple(args))
    return HWFVTrap(entry.reason, tuple(args))


def arg_combinations(entry, seed: int) -> List[Tuple]:
    """Sweep order for one catalog entry.

    Each-choice rows come first so every domain value appears within the
    first max(|domain|) combinations; the rest of the cross product follows
    in a seeded order.
    """
    domains = entry.arg_domains
    if not domains:
        return [()]
    width = max(len(d) for d in domains)
    head = [tuple(d[i % len(d)] for d in domains) for i in range(width)]
    seen = set(head)
    rest = [c for c in itertools.product(*domains) if c not in seen]
    random.Random(derive_seed(seed, "combos", entry.name)).shuffle(rest)
    return head + rest


def gen_fuzz(seed: int, surface_catalog, policy: str, n: int, *,
             targets: Optional[Dict[str, str]] = None, steps_per_case: int = 4,
             first_id: int = 0) -> List[TestCase]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if policy not in POLICIES:
        raise ValueError("unknown fuzz policy %r" % policy)
    targets = dict(DEFAULT_TARGETS, **(targets or {}))
    pairs = _catalog_pairs(surface_catalog)
    surfaces = sorted({s for s, _ in pairs}, key=[vi.PV, vi.HWFV].index)
    cases = []
    for i in range(n):
        case_seed = derive_seed(seed, policy, i)
        rng = random.Random(case_seed)
        if policy == "sweep":
            surface, entry = pairs[i % len(pairs)]
            combos = arg_combinations(entry, seed)
            rnd = i // len(pairs)
            count = min(steps_per_case, len(combos))
            steps = [_make_step(surface, entry, combos[(rnd * count + j) % len(combos)])
                     for j in range(count)]
        elif policy == "random":
            surface = rng.choice(surfaces)
            entries = [e for s, e in pairs if s == surface]
            steps = []
            for _ in range(steps_per_case):
                entry = rng.choice(entries)
                steps.append(_make_step(surface, entry,
                                        [rng.choice(d) for d in entry.arg_domains]))
        else:
            surface = rng.choice(surfaces)
            entries = [e for s, e in pairs if s == surface]
            steps = [_malformed_step(rng, surface, entries) for _ in range(steps_per_case)]
        cases.append(TestCase(first_id + i, case_seed, FUZZ, tuple(steps), targets[surface]))
    return cases


def _malformed_step(rng: random.Random, surface: str, entries) -> Step:
    mode = rng.choice(("id", "arity", "value"))
    entry = rng.choice(entries)
    args = [rng.choice(d) for d in entry.arg_domains]
    if mode == "value" and not args:
        mode = "arity"
    if mode == "id":
        bad = rng.choice(_BAD_PV_IDS if surface == vi.PV else _BAD_TRAP_REASONS)
        return PVCall(bad, tuple(args)) if surface == vi.PV else HWFVTrap(bad, tuple(args))
    if mode == "arity":
        if args and rng.random() < 0.5:
            args = args[:-1]
        else:
            args = args + [rng.choice((0, 1, 7))]
    else:
        args[rng.randrange(len(args))] = rng.choice(_BAD_VALUES)
    return _make_step(surface, entry, args)


# -- fault injection -------------------------------------------------------

def gen_fault_plan(seed: int, plan: dict, spec: hv.SystemSpec, *, first_id: int = 0) -> List[TestCase]:
    """One case per (kind, target, frame); a case waits ``frame`` frames then injects."""
    kinds = plan.get("kinds", ["crash"])
    targets = plan.get("targets") or spec.test_partitions()[:1]
    frames = plan.get("frames", [0])
    for t in targets:
        if not spec.has_partition(t):
            raise PlanTargetsRegularPartition("unknown fault target %s" % t)
        if not spec.partition(t).is_test:
            raise PlanTargetsRegularPartition("faults are injected only via test partitions (%s)" % t)
    cases = []
    for i, (kind, target, frame) in enumerate(itertools.product(kinds, targets, frames)):
        case_seed = derive_seed(seed, "fault", i)
        rng = random.Random(case_seed)
        fault = _fault_step(kind, rng)
        steps = ([Wait(frames=frame)] if frame > 0 else []) + [fault]
        cases.append(TestCase(first_id + i, case_seed, FAULT_INJECTION, tuple(steps), target))
    return cases


def _fault_step(kind, rng: random.Random) -> InjectFault:
    if isinstance(kind, (list, tuple)):
        name, args = kind[0], tuple(kind[1:])
    else:
        name, args = kind, None
    if name not in FAULT_KINDS:
        raise ValueError("unknown fault kind %r" % name)
    if args is None:
        if name == "crash":
            args = ()
        elif name == "mem_corrupt":
            args = ("@peer", rng.randrange(1, 1 << 32))
        elif name == "reg_corrupt":
            args = (rng.randrange(hv.NUM_REGS), rng.randrange(1, 1 << 32))
        else:
            args = (1024,)
    return InjectFault(name, args)


# -- scripts ---------------------------------------------------------------

def _parse_arg(tok: str, line: int, col: int):
    if tok.startswith("@"):
        return tok
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(line, "bad argument %r" % tok, col) from None


def _tokens(text: str):
    """Yield (token, column) pairs for a line, stopping at a comment."""
    col, out = 0, []
    for part in text.split(" "):
        if part.startswith("#"):
            break
        if part:
            out.append((part, col + 1))
        col += len(part) + 1
    return out


def parse_script(text: str, *, target: str = "T1", seed: int = 0, case_id: int = 0) -> TestCase:
    steps: List[Step] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokens(raw.replace("\t", " "))
        if not toks:
            continue
        (verb, vcol), rest = toks[0], toks[1:]
        if verb in ("pv", "hwfv"):
            if not rest:
                raise ParseError(lineno, "missing %s name" % ("call" if verb == "pv" else "trap"), vcol)
            name, ncol = rest[0]
            entry = vi.hypercall(name) if verb == "pv" else vi.trap(name)
            if entry is None:
                raise ParseError(lineno, "unknown %s" % ("call" if verb == "pv" else "trap"), ncol)
            args = tuple(_parse_arg(t, lineno, c) for t, c in rest[1:])
            if len(args) != entry.arg_arity:
                raise ParseError(lineno, "%s takes %d argument(s)" % (name, entry.arg_arity), ncol)
            steps.append(PVCall(name, args) if verb == "pv" else HWFVTrap(name, args))
        elif verb == "inject":
            if not rest:
                raise ParseError(lineno, "missing fault kind", vcol)
            kind, kcol = rest[0]
            arity = {"crash": 0, "mem_corrupt": 2, "reg_corrupt": 2, "leak": 1}.get(kind)
            if arity is None:
                raise ParseError(lineno, "unknown fault kind", kcol)
            args = tuple(_parse_arg(t, lineno, c) for t, c in rest[1:])
            if len(args) != arity:
                raise ParseError(lineno, "%s takes %d argument(s)" % (kind, arity), kcol)
            if kind == "reg_corrupt" and not (isinstance(args[0], int) and 0 <= args[0] < hv.NUM_REGS):
                raise ParseError(lineno, "register index out of range", rest[1][1])
            if kind == "leak" and not (isinstance(args[0], int) and args[0] > 0):
                raise ParseError(lineno, "leak size must be a positive integer", rest[1][1])
            steps.append(InjectFault(kind, args))
        elif verb == "wait":
            if len(rest) not in (1, 2) or (len(rest) == 2 and rest[1][0] not in ("frame", "frames")):
                raise ParseError(lineno, "usage: wait <ticks> [frames]", vcol)
            n = _parse_arg(rest[0][0], lineno, rest[0][1])
            if not isinstance(n, int) or n < 1:
                raise ParseError(lineno, "wait needs a positive count", rest[0][1])
            steps.append(Wait(frames=n) if len(rest) == 2 else Wait(ticks=n))
        elif verb == "greedy":
            if len(rest) != 1:
                raise ParseError(lineno, "usage: greedy <ticks>", vcol)
            n = _parse_arg(rest[0][0], lineno, rest[0][1])
            if not isinstance(n, int) or n < 1:
                raise ParseError(lineno, "greedy needs a positive tick count", rest[0][1])
            steps.append(SetGreedy(n))
        elif verb == "dev":
            if len(rest) != 1 or rest[0][0] not in ("busy", "idle"):
                raise ParseError(lineno, "usage: dev busy|idle", vcol)
            steps.append(DevPulse(rest[0][0] == "busy"))
        else:
            raise ParseError(lineno, "unknown directive %r" % verb, vcol)
    if not steps:
        raise ParseError(1, "script has no steps")
    return TestCase(case_id, seed, SCRIPTED, tuple(steps), target)


def format_step(step: Step) -> str:
    """Render a step back to script syntax."""
    def arg(v):
        return v if isinstance(v, str) else str(v)
    if isinstance(step, PVCall):
        return " ".join(["pv", str(step.call)] + [arg(a) for a in step.args])
    if isinstance(step, HWFVTrap):
        return " ".join(["hwfv", str(step.reason)] + [arg(a) for a in step.payload])
    if isinstance(step, InjectFault):
        return " ".join(["inject", step.kind] + [arg(a) for a in step.args])
    if isinstance(step, Wait):
        return "wait %d frames" % step.frames if step.frames else "wait %d" % step.ticks
    if isinstance(step, SetGreedy):
        return "greedy %d" % step.extra_ticks
    return "dev busy" if step.busy else "dev idle"


# -- covert channel probes -------------------------------------------------

def covert_pair(seed: int, n_bits: int, *, sender: str = "T1", receiver: str = "T3",
                first_id: int = 0):
    """Sender modulates the shared device once per frame; receiver samples it."""
    if n_bits < 1:
        raise ValueError("n_bits must be >= 1")
    rng = random.Random(derive_seed(seed, "covert"))
    bits = tuple(rng.getrandbits(1) for _ in range(n_bits))
    tx, rx = [], []
    for b in bits:
        tx += [DevPulse(bool(b)), Wait(frames=1)]
        rx += [PVCall("DEV_ACCESS", (0,)), Wait(frames=1)]
    s = TestCase(first_id, seed, COVERT_PROBE, tuple(tx), sender)
    r = TestCase(first_id, seed, COVERT_PROBE, tuple(rx), receiver)
    return s, r, bits


# -- representative workloads ----------------------------------------------

def _crc(*parts) -> int:
    return zlib.crc32(repr(parts).encode())


@dataclass(frozen=True)
class Workload:
    """A regular-partition workload; runs once per major frame in its slot."""

    name: str
    touches: int = 0
    device: bool = False

    def checksum(self, frame: int) -> int:
        """Checksum the workload reports for ``frame`` on an undisturbed system."""
        if self.name == "memory_toucher":
            prev = [self._word(frame - 1, i) if frame > 0 else 0 for i in range(self.touches)]
            return _crc(self.name, frame, tuple(prev))
        if self.name == "periodic_compute":
            return _crc(self.name, frame, _compute(frame))
        return _crc(self.name, frame)

    def _word(self, frame: int, i: int) -> int:
        return _crc(self.name, "word", frame, i)

    def run_frame(self, state: hv.SystemState, actor: str, frame: int) -> dict:
        status = state.spec.status_address(actor)
        out = {"latency": None}
        if self.name == "memory_toucher":
            readback = []
            for i in range(self.touches):
                addr = status + 1 + i
                ok = hv.check_mem_access(state, actor, addr, "read")
                readback.append(hv.read_word(state, addr) if ok else None)
            for i in range(self.touches):
                hv.check_mem_access(state, actor, status + 1 + i, "write", self._word(frame, i))
            value = _crc(self.name, frame, tuple(readback))
        elif self.name == "periodic_compute":
            value = _crc(self.name, frame, _compute(frame))
        else:
            rec = vi.dispatch_pv(state, actor, "DEV_ACCESS", (1,))
            out["latency"] = rec.value
            value = _crc(self.name, frame)
        hv.check_mem_access(state, actor, status, "write", value)
        out["checksum"] = value
        return out


def _compute(frame: int) -> int:
    acc = frame & 0xFFFFFFFF
    for i in range(64):
        acc = (acc * 1103515245 + 12345 + i) & 0xFFFFFFFF
    return acc


PROFILES = {
    "periodic_compute": Workload("periodic_compute"),
    "memory_toucher": Workload("memory_toucher", touches=4),
    "device_client": Workload("device_client", device=True),
}


def representative(profile: str) -> Workload:
    try:
        return PROFILES[profile]
    except KeyError:
        raise UnknownProfile(profile) from None
