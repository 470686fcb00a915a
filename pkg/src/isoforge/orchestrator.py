"""Campaign configuration, case execution with reset between cases, logging and evidence."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import certmap
from . import hv_model as hv
from . import monitor as mon
from . import runner
from . import vm_interface as vi
from . import workloads as wl

log = logging.getLogger("isoforge.orchestrator")

TRACE_CAP = 10 ** 6
COMPLETED = "completed"
HV_RESET = "hv_reset"
FLOAT_DIGITS = 6
LOG_VERSION = 1

_KIND_ALIASES = {"test-PV": hv.KIND_TEST_PV, "test-HWFV": hv.KIND_TEST_HWFV,
                 "regular": hv.KIND_REGULAR}

DEFAULT_SYSTEM = {
    "partitions": [
        {"id": "T1", "kind": "test-PV", "quota": 12288},
        {"id": "T2", "kind": "test-HWFV", "quota": 12288},
        {"id": "T3", "kind": "test-PV", "quota": 12288},
        {"id": "R1", "kind": "regular", "role": "memory_toucher", "quota": 12288},
        {"id": "R2", "kind": "regular", "role": "periodic_compute", "quota": 12288},
        {"id": "R3", "kind": "regular", "role": "device_client", "quota": 12288},
    ],
    "regions": [
        {"id": "kernel", "base": 0, "size": 256, "space": "kernel"},
        {"id": "T1.ram", "base": 0x1000, "size": 4096, "owner": "T1"},
        {"id": "T2.ram", "base": 0x2000, "size": 4096, "owner": "T2"},
        {"id": "T3.ram", "base": 0x3000, "size": 4096, "owner": "T3"},
        {"id": "R1.ram", "base": 0x4000, "size": 4096, "owner": "R1"},
        {"id": "R2.ram", "base": 0x5000, "size": 4096, "owner": "R2"},
        {"id": "R3.ram", "base": 0x6000, "size": 4096, "owner": "R3"},
        {"id": "T2.mmio", "base": 0x8000, "size": 16, "owner": "T2", "mmio": True},
        {"id": "R1.mmio", "base": 0x8100, "size": 16, "owner": "R1", "mmio": True},
    ],
    "schedule": [["T1", 4], ["R1", 4], ["T2", 4], ["R2", 4], ["T3", 4], ["R3", 4]],
    "device": {"base_latency": 2, "normalized_latency": 16, "pulse_ticks": 4},
    "wcet": {"COPY": 5},
    "wcet_default": 1,
    "channels": [["T1", "T3"], ["T3", "T1"]],
    "defects": [],
}

DEFAULT_MONITOR = {"enabled": list(mon.PROPERTIES), "slot_jitter": 1,
                   "degradation": 0.2, "covert_capacity": 0.05}

TECHNIQUE_PARAMS = {
    wl.FUZZ: {"policy", "surface", "steps_per_case", "targets", "frames"},
    wl.FAULT_INJECTION: {"kinds", "targets", "frames", "frames_per_case"},
    wl.SCRIPTED: {"scripts", "builtin", "target", "text", "frames"},
    wl.COVERT_PROBE: {"n_bits", "sender", "receiver"},
}

# canned scripts; each one targets a single mechanism
BUILTIN_SCRIPTS = {
    "canary": ("T1", "# leave a marker in every register, then idle\n"
                     + "".join("inject reg_corrupt %d 0x%X\n" % (i, 0xC0DE0000 + i)
                               for i in range(hv.NUM_REGS))
                     + "wait 2 frames\n"),
    "greedy": ("T1", "# ask the scheduler for three extra ticks at every slot end\n"
                     "greedy 3\nwait 2 frames\n"),
    "kernel_poke": ("T2", "hwfv CONTROL_REG 3 0xDEAD\nwait 1 frames\n"),
    "boundary": ("T1", "pv ALLOC 1\npv FREE 1\npv COPY @own @own+64 64\n"
                       "pv COPY @own @own+128 65\npv CONSOLE_WRITE 4096\n"),
}


class SchemaError(ValueError):
    def __init__(self, path: str, reason: str):
        super().__init__("%s: %s" % (path or "<root>", reason))
        self.path = path
        self.reason = reason


# -- configuration ---------------------------------------------------------

def _need(cond, path, reason):
    if not cond:
        raise SchemaError(path, reason)


def _int(v, path, lo=None):
    _need(type(v) is int, path, "expected an integer")
    if lo is not None:
        _need(v >= lo, path, "must be >= %d" % lo)
    return v


def _list(v, path):
    _need(isinstance(v, list), path, "expected a list")
    return v


def _dict(v, path):
    _need(isinstance(v, dict), path, "expected an object")
    return v


def merged_system(doc: Optional[dict]) -> dict:
    """The default testbed with the document's top-level keys laid over it."""
    base = copy.deepcopy(DEFAULT_SYSTEM)
    if doc is None:
        return base
    _dict(doc, "system")
    for k, v in doc.items():
        _need(k in DEFAULT_SYSTEM, "system." + k, "unknown key")
        base[k] = copy.deepcopy(v)
    return base


def build_spec(system: dict) -> hv.SystemSpec:
    """Turn a full system description into a validated SystemSpec."""
    parts = []
    regions = []
    for i, r in enumerate(_list(system["regions"], "system.regions")):
        p = "system.regions[%d]" % i
        _dict(r, p)
        for k in ("id", "base", "size"):
            _need(k in r, p + "." + k, "missing")
        grants = frozenset((g[0], g[1]) for g in r.get("grants", []))
        regions.append(hv.MemoryRegion(r["id"], _int(r["base"], p + ".base", 0),
                                       _int(r["size"], p + ".size", 1),
                                       r.get("space", "user"), r.get("owner", hv.HYPERVISOR),
                                       grants, bool(r.get("mmio", False))))
    for i, d in enumerate(_list(system["partitions"], "system.partitions")):
        p = "system.partitions[%d]" % i
        _dict(d, p)
        _need("id" in d and "kind" in d, p, "partition needs id and kind")
        _need(d["kind"] in _KIND_ALIASES, p + ".kind", "unknown kind %r" % d["kind"])
        owned = tuple(r.id for r in regions if r.owner == d["id"])
        role = d.get("role", "")
        if d["kind"] == "regular":
            wl.representative(role or "periodic_compute")
        quota = d.get("quota", sum(r.size for r in regions if r.owner == d["id"]))
        parts.append(hv.PartitionSpec(d["id"], _KIND_ALIASES[d["kind"]],
                                      _int(quota, p + ".quota", 0), owned, role))
    slots = []
    for i, s in enumerate(_list(system["schedule"], "system.schedule")):
        _need(isinstance(s, (list, tuple)) and len(s) == 2, "system.schedule[%d]" % i,
              "expected [partition, ticks]")
        slots.append((s[0], _int(s[1], "system.schedule[%d][1]" % i, 1)))
    dev = _dict(system.get("device", {}), "system.device")
    windows = tuple((pid, tuple((int(o), int(n)) for o, n in w))
                    for pid, w in sorted(dev.get("windows", {}).items()))
    device = hv.DeviceSpec(dev.get("base_latency", 2), dev.get("normalized_latency", 16),
                           dev.get("pulse_ticks", 4), windows)
    default = system.get("wcet_default")
    wcet = dict(_dict(system.get("wcet", {}), "system.wcet"))
    table = []
    for entry in vi.PV_CATALOG:
        bound = wcet.pop(entry.name, default)
        if bound is not None:
            table.append((entry.id, _int(bound, "system.wcet." + entry.name, 1)))
    _need(not wcet, "system.wcet", "unknown hypercall(s) %s" % ", ".join(sorted(wcet)))
    defects = frozenset(_list(system.get("defects", []), "system.defects"))
    for d in sorted(defects):
        if d not in hv.DEFECTS:
            raise hv.UnknownDefect(d)
    spec = hv.SystemSpec(tuple(parts), tuple(regions), hv.CyclicSchedule(tuple(slots)),
                         tuple(tuple(c) for c in system.get("channels", [])),
                         device, tuple(table), defects)
    try:
        hv.validate(spec)
    except hv.InvalidSpec as e:
        raise SchemaError("system", str(e)) from None
    return spec


def default_spec(defects: Sequence[str] = ()) -> hv.SystemSpec:
    return build_spec(merged_system({"defects": list(defects)}))


@dataclass(frozen=True)
class TechniqueSpec:
    name: str
    seed: int
    count: int
    params: Dict[str, object]


@dataclass(frozen=True)
class Campaign:
    spec: hv.SystemSpec
    monitor_config: mon.MonitorConfig
    techniques: Tuple[TechniqueSpec, ...]
    frames_per_case: int
    parallelism: int
    document: dict = field(compare=False)


def load_campaign(document) -> Campaign:
    """Validate a campaign document (a dict or JSON text) and fill defaults."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise SchemaError("", "not valid JSON: %s" % e) from None
    doc = copy.deepcopy(_dict(document, ""))
    known = {"system", "monitor", "techniques", "frames_per_case", "parallelism", "name"}
    for k in doc:
        _need(k in known, k, "unknown key")

    system = merged_system(doc.get("system"))
    spec = build_spec(system)

    mdoc = dict(DEFAULT_MONITOR, **_dict(doc.get("monitor", {}), "monitor"))
    for k in mdoc:
        _need(k in DEFAULT_MONITOR, "monitor." + k, "unknown key")
    try:
        config = mon.MonitorConfig(frozenset(mdoc["enabled"]), mdoc["slot_jitter"],
                                   float(mdoc["degradation"]), float(mdoc["covert_capacity"]))
    except (TypeError, ValueError) as e:
        raise SchemaError("monitor", str(e)) from None

    techs = _list(doc.get("techniques"), "techniques")
    _need(len(techs) >= 1, "techniques", "at least one technique is required")
    parsed = []
    for i, t in enumerate(techs):
        p = "techniques[%d]" % i
        _dict(t, p)
        for k in t:
            _need(k in ("name", "seed", "count", "params"), p + "." + k, "unknown key")
        name = t.get("name")
        _need(name in TECHNIQUE_PARAMS, p + ".name", "unknown technique %r" % (name,))
        params = _dict(t.get("params", {}), p + ".params")
        for k in params:
            _need(k in TECHNIQUE_PARAMS[name], p + ".params." + k, "unknown parameter")
        parsed.append(TechniqueSpec(name, _int(t.get("seed", 0), p + ".seed", 0),
                                    _int(t.get("count", 1), p + ".count", 1), params))
    fpc = _int(doc.get("frames_per_case", 16), "frames_per_case", 1)
    par = _int(doc.get("parallelism", 1), "parallelism", 1)

    echo = {"system": system,
            "monitor": {k: sorted(v) if k == "enabled" else v for k, v in mdoc.items()},
            "techniques": [{"name": t.name, "seed": t.seed, "count": t.count, "params": t.params}
                           for t in parsed],
            "frames_per_case": fpc, "parallelism": par}
    if "name" in doc:
        echo["name"] = doc["name"]
    campaign = Campaign(spec, config, tuple(parsed), fpc, par, echo)
    expand_cases(campaign)  # surfaces parameter errors at load time
    return campaign


# -- cases -----------------------------------------------------------------

@dataclass(frozen=True)
class CaseSpec:
    id: int
    technique: str
    seed: int
    programs: Tuple[Tuple[str, wl.TestCase], ...]
    frames: int
    bits: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {"id": self.id, "technique": self.technique, "seed": self.seed,
                "frames": self.frames,
                "programs": {pid: tc.to_dict() for pid, tc in self.programs},
                "bits": "".join(map(str, self.bits)) if self.bits is not None else None}

    @classmethod
    def from_dict(cls, d: dict) -> "CaseSpec":
        progs = tuple((pid, wl.TestCase.from_dict(tc)) for pid, tc in d["programs"].items())
        bits = tuple(int(c) for c in d["bits"]) if d.get("bits") is not None else None
        return cls(d["id"], d["technique"], d["seed"], progs, d["frames"], bits)


def _surface_catalog(which: str):
    if which == "all":
        return vi.full_catalog()
    _need(which in (vi.PV, vi.HWFV), "params.surface", "expected all, PV or HWFV")
    return vi.list_surface(which)


def _expand_one(campaign: Campaign, t: TechniqueSpec, first_id: int, where: str) -> List[CaseSpec]:
    spec = campaign.spec
    prm = t.params
    fpc = campaign.frames_per_case
    out = []
    if t.name == wl.FUZZ:
        policy = prm.get("policy", "sweep")
        _need(policy in wl.POLICIES, where + ".params.policy", "unknown policy %r" % (policy,))
        targets = prm.get("targets")
        for who in (targets or {}).values():
            _need(spec.has_partition(who) and spec.partition(who).is_test,
                  where + ".params.targets", "%s is not a test partition" % who)
        steps = _int(prm.get("steps_per_case", 4), where + ".params.steps_per_case", 1)
        frames = _int(prm.get("frames", fpc), where + ".params.frames", 1)
        for tc in wl.gen_fuzz(t.seed, _surface_catalog(prm.get("surface", "all")), policy,
                              t.count, targets=targets, steps_per_case=steps, first_id=first_id):
            out.append(CaseSpec(tc.id, t.name, tc.seed, ((tc.target, tc),), frames))
    elif t.name == wl.FAULT_INJECTION:
        plan = {k: prm[k] for k in ("kinds", "targets", "frames") if k in prm}
        try:
            cases = wl.gen_fault_plan(t.seed, plan, spec, first_id=first_id)
        except (ValueError, wl.PlanTargetsRegularPartition) as e:
            raise SchemaError(where + ".params", str(e)) from None
        base = _int(prm.get("frames_per_case", fpc), where + ".params.frames_per_case", 1)
        for tc in cases:
            wait = sum(s.frames for s in tc.steps if isinstance(s, wl.Wait))
            out.append(CaseSpec(tc.id, t.name, tc.seed, ((tc.target, tc),),
                                max(base, wait + 2)))
    elif t.name == wl.SCRIPTED:
        scripts = list(prm.get("scripts", []))
        if "builtin" in prm:
            _need(prm["builtin"] in BUILTIN_SCRIPTS, where + ".params.builtin",
                  "unknown builtin script %r" % (prm["builtin"],))
            target, text = BUILTIN_SCRIPTS[prm["builtin"]]
            scripts.append({"target": prm.get("target", target), "text": text})
        if "text" in prm:
            scripts.append({"target": prm.get("target", "T1"), "text": prm["text"]})
        _need(scripts, where + ".params", "scripted technique needs scripts, builtin or text")
        n = 0
        for rep in range(t.count):
            for j, s in enumerate(scripts):
                sp = "%s.params.scripts[%d]" % (where, j)
                target = s.get("target", "T1")
                _need(spec.has_partition(target) and spec.partition(target).is_test,
                      sp + ".target", "%s is not a test partition" % target)
                seed = wl.derive_seed(t.seed, "script", rep, j)
                try:
                    tc = wl.parse_script(s["text"], target=target, seed=seed,
                                         case_id=first_id + n)
                except wl.ParseError as e:
                    raise SchemaError(sp + ".text", str(e)) from None
                frames = _int(s.get("frames", prm.get("frames", fpc)), sp + ".frames", 1)
                out.append(CaseSpec(tc.id, t.name, seed, ((target, tc),), frames))
                n += 1
    else:
        n_bits = _int(prm.get("n_bits", 1000), where + ".params.n_bits", 1)
        sender = prm.get("sender", "T1")
        receiver = prm.get("receiver", "T3")
        for who in (sender, receiver):
            _need(spec.has_partition(who) and spec.partition(who).kind == hv.KIND_TEST_PV,
                  where + ".params", "%s is not a PV test partition" % who)
        _need(sender != receiver, where + ".params", "sender and receiver must differ")
        for k in range(t.count):
            seed = wl.derive_seed(t.seed, "probe", k) if k else t.seed
            tx, rx, bits = wl.covert_pair(seed, n_bits, sender=sender, receiver=receiver,
                                          first_id=first_id + k)
            out.append(CaseSpec(first_id + k, t.name, seed, ((sender, tx), (receiver, rx)),
                                n_bits + 1, bits))
    return out


def expand_cases(campaign: Campaign) -> List[CaseSpec]:
    cases: List[CaseSpec] = []
    for i, t in enumerate(campaign.techniques):
        cases += _expand_one(campaign, t, len(cases), "techniques[%d]" % i)
    return cases


# -- execution -------------------------------------------------------------

def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(v):
    if isinstance(v, (set, frozenset)):
        return sorted(v)
    raise TypeError("not serializable: %r" % (v,))


def state_digest(state: hv.SystemState) -> str:
    view = {"tick": state.tick, "active": state.active, "halted": sorted(state.halted),
            "alloc": dict(sorted(state.alloc_used.items())),
            "memory": sorted(state.memory_words.items()),
            "live": state.live.regs}
    return hashlib.sha256(_canon(view).encode()).hexdigest()


@dataclass
class CaseResult:
    case: CaseSpec
    status: str
    digest: str
    report: mon.MonitorReport
    events: int
    final_state: str
    covert: Optional[Dict[str, float]] = None
    error: Optional[str] = None
    trace: Optional[List[dict]] = None

    @property
    def case_id(self) -> int:
        return self.case.id

    @property
    def technique(self) -> str:
        return self.case.technique

    def summary(self) -> dict:
        return {"id": self.case.id, "technique": self.case.technique, "seed": self.case.seed,
                "frames": self.case.frames, "status": self.status, "digest": self.digest,
                "events": self.events, "final_state": self.final_state,
                "violations": [v.to_dict() for v in self.report.violations],
                "exercised": list(self.report.exercised),
                "interfaces": [list(i) for i in self.report.interfaces],
                "covert": self.covert, "error": self.error}


def run_case(spec: hv.SystemSpec, config: mon.MonitorConfig, baseline: mon.BaselineMetrics,
             case: CaseSpec, *, snap: Optional[hv.Snapshot] = None,
             trace_cap: int = TRACE_CAP) -> CaseResult:
    """Execute one case on a fresh system and monitor it as the trace streams."""
    state = hv.restore(snap) if snap is not None else hv.boot(spec)
    monitor = mon.Monitor(state.spec, config, baseline)
    h = hashlib.sha256()
    kept: List[dict] = []
    count = 0
    receiver = case.programs[1][0] if case.bits is not None else None
    samples: Dict[int, int] = {}
    mf = state.spec.schedule.major_frame

    def sink(ev):
        nonlocal count
        d = ev.to_dict()
        h.update(_canon(d).encode())
        h.update(b"\n")
        count += 1
        if count <= trace_cap:
            kept.append(d)
        monitor.observe(ev)
        if receiver is not None and ev.actor == receiver and ev.kind == hv.HYPERCALL \
                and ev.get("call") == 7 and ev.get("result") == vi.OK:
            samples.setdefault(ev.tick // mf, ev.get("value"))

    error = None
    try:
        runner.run(state, dict(case.programs), case.frames, sink=sink)
    except Exception as e:  # the simulated hypervisor is reset, the campaign goes on
        error = "%s: %s" % (type(e).__name__, e)
        log.warning("case %d aborted: %s", case.id, error)
    report = monitor.finalize(state.tick)
    status = HV_RESET if error or state.halted else COMPLETED

    covert = None
    if case.bits is not None:
        lat = [samples.get(k) for k in range(len(case.bits))]
        pairs = [(b, l) for b, l in zip(case.bits, lat) if l is not None]
        if pairs:
            bits, ys = zip(*pairs)
            covert = {"bits": len(case.bits), "samples": len(pairs),
                      "accuracy": round(mon.decode_accuracy(bits, ys), FLOAT_DIGITS),
                      "capacity": round(mon.estimate_capacity(bits, ys), FLOAT_DIGITS)}
        else:
            covert = {"bits": len(case.bits), "samples": 0, "accuracy": 0.0, "capacity": 0.0}
    return CaseResult(case, status, h.hexdigest(), report, count, state_digest(state),
                      covert, error, kept)


def twin_baseline(spec: hv.SystemSpec, frames: int) -> mon.BaselineMetrics:
    """Regular-partition reference metrics from the same system without defects."""
    import dataclasses
    twin = dataclasses.replace(spec, defects=frozenset(), booted=False)
    return mon.capture_baseline(twin, None, frames)


@dataclass
class CampaignResults:
    campaign: Campaign
    cases: List[CaseResult]
    baseline: mon.BaselineMetrics
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return sum(len(c.report.violations) for c in self.cases)

    def case(self, case_id: int) -> CaseResult:
        for c in self.cases:
            if c.case.id == case_id:
                return c
        raise KeyError(case_id)

    def interface_coverage(self) -> Tuple[Tuple[str, int], ...]:
        seen = {tuple(i) for c in self.cases for i in c.report.interfaces}
        return tuple(sorted(seen, key=lambda i: (i[0] != vi.PV, i[1])))

    def coverage(self) -> certmap.CoverageReport:
        return certmap.coverage(self.cases)


_WORKER: dict = {}


def _worker_init(spec, config, baseline, snap, trace_cap):
    _WORKER.update(spec=spec, config=config, baseline=baseline, snap=snap, trace_cap=trace_cap)


def _worker_run(case: CaseSpec) -> CaseResult:
    w = _WORKER
    return run_case(w["spec"], w["config"], w["baseline"], case, snap=w["snap"],
                    trace_cap=w["trace_cap"])


def run_campaign(campaign: Campaign, *, parallelism: Optional[int] = None,
                 trace_cap: int = TRACE_CAP, order: Optional[Sequence[int]] = None) -> CampaignResults:
    """Run every case of a campaign; results come back ordered by case id.

    ``order`` permutes execution order (for reset-hygiene checks) without
    changing the result.
    """
    t0 = time.perf_counter()
    cases = expand_cases(campaign)
    if order is not None:
        cases = [cases[i] for i in order]
    frames = max((c.frames for c in cases), default=0)
    baseline = twin_baseline(campaign.spec, frames)
    snap = hv.snapshot(hv.boot(campaign.spec))
    workers = parallelism or campaign.parallelism
    log.info("campaign: %d cases, %d baseline frames, %d worker(s)", len(cases), frames, workers)
    if workers <= 1 or len(cases) <= 1:
        results = [run_case(campaign.spec, campaign.monitor_config, baseline, c, snap=snap,
                            trace_cap=trace_cap) for c in cases]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(campaign.spec, campaign.monitor_config, baseline,
                                           snap, trace_cap)) as ex:
            results = list(ex.map(_worker_run, cases, chunksize=max(1, len(cases) // (workers * 4))))
    results.sort(key=lambda r: r.case.id)
    for r in results:
        log.debug("case %d %s: %d events, %d violation(s)", r.case.id, r.status, r.events,
                  len(r.report.violations))
    return CampaignResults(campaign, results, baseline,
                           {"wall_clock_s": round(time.perf_counter() - t0, 3),
                            "workers": workers})


# -- results log -----------------------------------------------------------

def _line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), default=_json_default)


def results_log_lines(results: CampaignResults, *, events: bool = True):
    """Line-delimited records: header, baseline, then per case its events and violations."""
    yield _line({"type": "campaign", "version": LOG_VERSION,
                 "document": results.campaign.document, "metadata": results.metadata})
    yield _line({"type": "baseline", "baseline": results.baseline.to_dict()})
    for r in results.cases:
        yield _line({"type": "case", "case": r.case.to_dict(), "status": r.status,
                     "digest": r.digest, "events": r.events, "final_state": r.final_state,
                     "report": r.report.to_dict(), "covert": r.covert, "error": r.error,
                     "trace_kept": len(r.trace or ())})
        if events:
            for ev in r.trace or ():
                yield _line({"type": "event", "case": r.case.id, "event": ev})
        for v in r.report.violations:
            yield _line({"type": "violation", "case": r.case.id, **v.to_dict()})


def write_results_log(results: CampaignResults, path, *, events: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in results_log_lines(results, events=events):
            f.write(line + "\n")


def read_results_log(path) -> CampaignResults:
    header = baseline = None
    cases: List[CaseResult] = []
    traces: Dict[int, List[dict]] = {}
    with open(path, encoding="utf-8") as f:
        for n, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaError("line %d" % n, "not JSON: %s" % e) from None
            kind = rec.get("type")
            if kind == "campaign":
                header = rec
            elif kind == "baseline":
                baseline = mon.BaselineMetrics.from_dict(rec["baseline"])
            elif kind == "case":
                cases.append(CaseResult(CaseSpec.from_dict(rec["case"]), rec["status"],
                                        rec["digest"], mon.MonitorReport.from_dict(rec["report"]),
                                        rec["events"], rec["final_state"], rec.get("covert"),
                                        rec.get("error"), None))
            elif kind == "event":
                traces.setdefault(rec["case"], []).append(rec["event"])
    if header is None or baseline is None:
        raise SchemaError("", "results log lacks a campaign header or baseline")
    for c in cases:
        c.trace = traces.get(c.case.id, [])
    campaign = load_campaign(header["document"])
    return CampaignResults(campaign, cases, baseline, header.get("metadata", {}))


def replay(results: CampaignResults, case_id: int) -> Tuple[bool, str, str]:
    """Re-execute a stored case; returns (match, stored digest, regenerated digest)."""
    stored = results.case(case_id)
    fresh = run_case(results.campaign.spec, results.campaign.monitor_config, results.baseline,
                     stored.case, trace_cap=0)
    return fresh.digest == stored.digest, stored.digest, fresh.digest


# -- evidence --------------------------------------------------------------

def _round(v):
    if isinstance(v, float):
        return round(v, FLOAT_DIGITS)
    if isinstance(v, dict):
        return {k: _round(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round(x) for x in v]
    return v


def evidence_document(results: CampaignResults) -> dict:
    """The single source both evidence renderings are produced from."""
    cov = results.coverage()
    spec = results.campaign.spec
    by_prop: Dict[str, int] = {}
    by_mech: Dict[str, int] = {}
    for c in results.cases:
        for v in c.report.violations:
            by_prop[v.property] = by_prop.get(v.property, 0) + 1
            by_mech[v.mechanism] = by_mech.get(v.mechanism, 0) + 1
    statuses: Dict[str, int] = {}
    for c in results.cases:
        statuses[c.status] = statuses.get(c.status, 0) + 1
    cites = {prop: [{"standard": s.standard, "locator": s.locator}
                    for s in certmap.citations(prop) if not s.not_applicable]
             for prop in certmap.ISOLATION_PROPERTIES}
    doc = {
        "format": "isoforge-evidence",
        "version": LOG_VERSION,
        "campaign": results.campaign.document,
        "baseline": {"frames": results.baseline.frames,
                     "digest": hashlib.sha256(_canon(results.baseline.to_dict()).encode()).hexdigest()},
        "defects": [{"id": d, "mechanism": hv.DEFECTS[d][0], "effect": hv.DEFECTS[d][1]}
                    for d in sorted(spec.defects)],
        "summary": {"cases": len(results.cases), "violations": results.violations,
                    "by_property": dict(sorted(by_prop.items())),
                    "by_mechanism": dict(sorted(by_mech.items())),
                    "statuses": dict(sorted(statuses.items())),
                    "tsfi_covered": len(cov.tsfi_covered), "tsfi_total": cov.tsfi_total},
        "coverage": cov.to_dict(),
        "citations": cites,
        "cases": [c.summary() for c in results.cases],
    }
    return _round(doc)


def _render_machine(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def _render_human(doc: dict) -> str:
    out = []
    s = doc["summary"]
    cov = doc["coverage"]
    name = doc["campaign"].get("name", "unnamed campaign")
    out.append("Isolation evidence: %s" % name)
    out.append("=" * len(out[0]))
    out.append("cases: %d   violations: %d   statuses: %s"
               % (s["cases"], s["violations"],
                  ", ".join("%s=%d" % kv for kv in s["statuses"].items()) or "none"))
    if doc["defects"]:
        out.append("seeded defects: " + ", ".join("%s (%s)" % (d["id"], d["mechanism"])
                                                  for d in doc["defects"]))
    out.append("TSFI coverage: %d/%d (%.1f%%)" % (s["tsfi_covered"], s["tsfi_total"],
                                                100.0 * cov["tsfi_fraction"]))
    out.append("mechanisms exercised: %s" % (" ".join(cov["mechanisms_exercised"]) or "none"))
    out.append("")
    out.append("Security functional requirements")
    for ref, st in cov["sfr_status"].items():
        mechs = "+".join(sorted(certmap.mechanisms_for_sfr(ref)))
        line = "  %-12s %-9s [%s]" % (ref, st, mechs)
        ev = cov["sfr_evidence"].get(ref)
        if ev:
            seqs = ["case %d %s seq %s" % (e["case"], e["property"],
                                           ",".join(map(str, e["seq"][:4])))
                    for e in ev[:3]]
            line += "  " + "; ".join(seqs)
            if len(ev) > 3:
                line += "; +%d more" % (len(ev) - 3)
        out.append(line)
    out.append("")
    out.append("Security assurance requirements")
    for ref, st in cov["sar_status"].items():
        techs = ", ".join(str(t) for t in certmap.sar(ref).techniques)
        line = "  %-8s %-14s %s" % (ref, st, techs)
        if ref in cov["notes"]:
            line += "  (%s)" % cov["notes"][ref]
        out.append(line)
    out.append("")
    out.append("Violations by property")
    if not s["by_property"]:
        out.append("  none")
    for prop, n in s["by_property"].items():
        out.append("  %-9s %-24s %d" % (prop, mon.PROPERTY_NAMES[prop], n))
    covert = [c for c in doc["cases"] if c["covert"]]
    if covert:
        out.append("")
        out.append("Covert channel probes")
        for c in covert:
            cv = c["covert"]
            out.append("  case %d: %d bits, accuracy %.4f, capacity %.4f bits/symbol"
                       % (c["id"], cv["bits"], cv["accuracy"], cv["capacity"]))
    out.append("")
    out.append("Isolation requirements in standards")
    for prop, refs in doc["citations"].items():
        out.append("  %s: %s" % (prop, "; ".join("%s %s" % (r["standard"], r["locator"])
                                                 for r in refs)))
    out.append("")
    out.append("Notes")
    for note in cov["footnotes"]:
        out.append("  * " + note)
    return "\n".join(out) + "\n"


def emit_evidence(results: CampaignResults, fmt: str = "machine") -> str:
    doc = evidence_document(results)
    if fmt == "machine":
        return _render_machine(doc)
    if fmt == "human":
        return _render_human(doc)
    raise ValueError("format must be human or machine")
