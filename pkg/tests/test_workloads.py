import pytest
from hypothesis import given, settings, strategies as st

from isoforge import hv_model as hv
from isoforge import monitor as mon
from isoforge import orchestrator as orch
from isoforge import runner
from isoforge import vm_interface as vi
from isoforge import workloads as wl

from helpers import events, small_spec
from oracles import queue_latency, scan_invariants


def catalog():
    return vi.full_catalog()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 63), st.sampled_from(wl.POLICIES), st.integers(1, 40))
def test_fuzz_is_reproducible(seed, policy, n):
    a = wl.gen_fuzz(seed, catalog(), policy, n)
    assert a == wl.gen_fuzz(seed, catalog(), policy, n)
    assert [c.id for c in a] == list(range(n))
    assert all(c.steps for c in a)


def test_sweep_covers_every_entry():
    cases = wl.gen_fuzz(3, catalog(), "sweep", 16)
    seen = set()
    for c in cases:
        for s in c.steps:
            if isinstance(s, wl.PVCall):
                seen.add((vi.PV, vi.hypercall(s.call).id))
            else:
                seen.add((vi.HWFV, vi.trap(s.reason).id))
    assert seen == {(s, e.id) for s, e in catalog()}


def test_sweep_args_stay_in_domain():
    for c in wl.gen_fuzz(1, catalog(), "sweep", 64):
        for s in c.steps:
            entry = vi.hypercall(s.call) if isinstance(s, wl.PVCall) else vi.trap(s.reason)
            args = s.args if isinstance(s, wl.PVCall) else s.payload
            assert all(a in d for a, d in zip(args, entry.arg_domains))


def test_arg_combinations_cover_each_value_early():
    entry = vi.hypercall("COPY")
    combos = wl.arg_combinations(entry, 0)
    width = max(len(d) for d in entry.arg_domains)
    head = combos[:width]
    for i, dom in enumerate(entry.arg_domains):
        assert {c[i] for c in head} == set(dom)
    assert len(combos) == len(set(combos)) == 6 * 6 * 5


def test_malformed_steps_never_succeed():
    spec = orch.default_spec()
    for case in wl.gen_fuzz(11, catalog(), "malformed", 150):
        state = hv.boot(spec)
        for step in case.steps:
            args = step.args if isinstance(step, wl.PVCall) else step.payload
            args = tuple(vi.resolve_selector(spec, case.target, a) for a in args)
            if isinstance(step, wl.PVCall):
                rec = vi.dispatch_pv(state, case.target, step.call, args)
            else:
                rec = vi.dispatch_hwfv(state, case.target, step.reason, args)
            assert rec.result == vi.EINVAL


def test_fuzz_rejects_bad_input():
    with pytest.raises(ValueError):
        wl.gen_fuzz(0, catalog(), "sweep", 0)
    with pytest.raises(ValueError):
        wl.gen_fuzz(0, catalog(), "nope", 1)


def test_fault_plan_shape():
    spec = orch.default_spec()
    cases = wl.gen_fault_plan(0, {"kinds": ["crash"], "targets": ["T1"], "frames": [3]}, spec)
    assert len(cases) == 1
    assert cases[0].steps == (wl.Wait(frames=3), wl.InjectFault("crash", ()))
    many = wl.gen_fault_plan(0, {"kinds": ["crash", "leak"], "targets": ["T1", "T3"],
                                 "frames": [0, 1, 2]}, spec)
    assert len(many) == 12


def test_fault_plan_refuses_regular_targets():
    with pytest.raises(wl.PlanTargetsRegularPartition):
        wl.gen_fault_plan(0, {"targets": ["R1"]}, orch.default_spec())


def test_crash_emits_fault():
    spec = orch.default_spec()
    case = wl.gen_fault_plan(0, {"kinds": ["crash"], "targets": ["T1"]}, spec)[0]
    res = runner.run(spec, {"T1": case}, 2)
    assert [e.actor for e in events(res.trace, hv.PART_FAULT)] == ["T1"]


def test_leak_exhausts_quota_by_frame_64():
    # 65536 / 1024 = 64 frames of leaking; the static RAM counts toward the quota
    spec = small_spec(slots=(("P1", 2), ("P2", 2)), quota=65536 + 4096)
    case = wl.TestCase(0, 0, wl.FAULT_INJECTION, (wl.InjectFault("leak", (1024,)),), "P1")
    res = runner.run(spec, {"P1": case}, 70)
    denied = events(res.trace, hv.ALLOC_DENIED)
    assert denied
    assert denied[0].tick // spec.schedule.major_frame == 64


def test_mem_corrupt_contained():
    spec = orch.default_spec()
    case = wl.TestCase(0, 0, wl.FAULT_INJECTION, (wl.InjectFault("mem_corrupt", ("@peer", 7)),), "T1")
    res = runner.run(spec, {"T1": case}, 1)
    denied = events(res.trace, hv.MEM_DENIED)
    assert denied and denied[0].actor == "T1"


def test_parse_script_examples():
    assert wl.parse_script("pv ALLOC 8192").steps == (wl.PVCall("ALLOC", (8192,)),)
    assert wl.parse_script("hwfv HALT").steps == (wl.HWFVTrap("HALT", ()),)
    with pytest.raises(wl.ParseError) as e:
        wl.parse_script("pv BOGUS 1")
    assert e.value.line == 1 and "unknown call" in str(e.value)


def test_parse_script_errors_have_positions():
    with pytest.raises(wl.ParseError) as e:
        wl.parse_script("# header\npv ALLOC 1\n  pv ALLOC\n")
    assert e.value.line == 3
    with pytest.raises(wl.ParseError) as e:
        wl.parse_script("wait x")
    assert e.value.column == 6
    for bad in ("dev maybe", "greedy 0", "inject boom", "inject reg_corrupt 9 1", "frob", "   # only"):
        with pytest.raises(wl.ParseError):
            wl.parse_script(bad)


def test_parse_script_full_grammar():
    text = ("pv COPY @own @peer+2 64  # trailing comment\n"
            "hwfv CONTROL_REG 3 0xDEAD\n"
            "inject reg_corrupt 2 5\n"
            "wait 3\nwait 2 frames\ngreedy 4\ndev busy\ndev idle\n")
    tc = wl.parse_script(text, target="T1")
    assert tc.technique == wl.SCRIPTED
    assert [wl.format_step(s) for s in tc.steps] == [
        "pv COPY @own @peer+2 64", "hwfv CONTROL_REG 3 57005", "inject reg_corrupt 2 5",
        "wait 3", "wait 2 frames", "greedy 4", "dev busy", "dev idle"]


step_strategy = st.one_of(
    st.builds(wl.PVCall, st.sampled_from([e.name for e in vi.PV_CATALOG]),
              st.lists(st.integers(0, 5000), max_size=3).map(tuple)),
    st.builds(wl.Wait, st.integers(1, 9)),
    st.builds(lambda n: wl.Wait(frames=n), st.integers(1, 9)),
    st.builds(wl.SetGreedy, st.integers(1, 9)),
    st.builds(wl.DevPulse, st.booleans()),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(step_strategy, min_size=1, max_size=6))
def test_format_then_parse_round_trip(steps):
    steps = [s for s in steps if not (isinstance(s, wl.PVCall)
                                      and len(s.args) != vi.hypercall(s.call).arg_arity)]
    if not steps:
        return
    text = "\n".join(wl.format_step(s) for s in steps)
    assert wl.parse_script(text).steps == tuple(steps)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 50))
def test_step_dict_round_trip(seed, n):
    for tc in wl.gen_fuzz(seed, catalog(), "random", 3, steps_per_case=n % 5 + 1):
        assert wl.TestCase.from_dict(tc.to_dict()) == tc


def test_covert_pair_shape():
    tx, rx, bits = wl.covert_pair(5, 1)
    assert len(bits) == 1
    assert tx.steps[0] == wl.DevPulse(bool(bits[0])) and len(tx.steps) == 2
    assert rx.steps[0] == wl.PVCall("DEV_ACCESS", (0,))
    assert wl.covert_pair(5, 40)[2] == wl.covert_pair(5, 40)[2]


def _probe_latencies(defects, n):
    spec = orch.default_spec(defects)
    tx, rx, bits = wl.covert_pair(9, n)
    res = runner.run(spec, {"T1": tx, "T3": rx}, n + 1)
    lat = [e.get("value") for e in res.trace
           if e.kind == hv.HYPERCALL and e.actor == "T3" and e.get("call") == 7]
    return spec, bits, lat


def test_covert_latency_follows_queue_model():
    spec, bits, lat = _probe_latencies(["D-T4"], 3)
    base, pulse = spec.device.base_latency, spec.device.pulse_ticks
    # frame order: T1 pulses first, T3 samples later, R3's own hold comes after T3
    want = [queue_latency(base, [("T1", pulse if b else 0), ("T3", 0)], "T3") for b in bits]
    assert lat == want
    assert set(want) <= {base, base + pulse}


def test_covert_latency_constant_when_normalized():
    spec, bits, lat = _probe_latencies([], 20)
    assert set(lat) == {spec.device.normalized_latency}


def test_representative_workloads():
    for name in ("periodic_compute", "memory_toucher", "device_client"):
        w = wl.representative(name)
        assert w.checksum(0) == w.checksum(0)
    with pytest.raises(wl.UnknownProfile):
        wl.representative("nope")


def test_regular_workloads_match_pure_checksums():
    spec = orch.default_spec()
    res = runner.run(spec, {}, 6)
    for q, w in runner.bind_workloads(spec).items():
        assert res.checksums[q] == [w.checksum(f) for f in range(6)]
    assert not events(res.trace, hv.MEM_DENIED)
    assert set(res.latencies["R3"]) == {spec.device.normalized_latency}
    assert scan_invariants(spec, res.trace) == []


def test_baseline_twin_capture():
    spec = orch.default_spec()
    a = mon.capture_baseline(spec, None, 5)
    assert a == mon.capture_baseline(spec, None, 5)
