"""End-to-end acceptance checks, one block per criterion.

Each check records a PASS/FAIL line through ``criteria.criterion``; the
summary is printed at the end of the pytest run.
"""
import json
import random
import time

import pytest

from isoforge import certmap as cm
from isoforge import hv_model as hv
from isoforge import monitor as mon
from isoforge import orchestrator as orch
from isoforge import runner
from isoforge import workloads as wl

from criteria import criterion
from helpers import small_spec
from oracles import bsc_capacity, scan_invariants, schedule_counts
from transcribed import SAR_ROWS, SFR_ROWS, STANDARD_CELLS, STANDARD_LABELS

SWEEP_DEFECTS = ("D-M1W", "D-M1R", "D-M2", "D-M4", "D-T3")
TIME_LIMIT_S = 10.0


def sweep(seed):
    return {"name": "fuzz", "seed": seed, "count": 64, "params": {"policy": "sweep"}}


def matched_technique(defect):
    if defect in SWEEP_DEFECTS:
        return sweep(100 + SWEEP_DEFECTS.index(defect))
    if defect == "D-T2":
        return {"name": "scripted", "seed": 1, "params": {"builtin": "greedy"}}
    if defect == "D-T1":
        return {"name": "scripted", "seed": 1, "params": {"builtin": "canary"}}
    return {"name": "covert_probe", "seed": 7, "params": {"n_bits": 1000}}


def campaign(techniques, defects=(), **extra):
    doc = {"techniques": list(techniques), **extra}
    if defects:
        doc["system"] = {"defects": list(defects)}
    return orch.load_campaign(doc)


_cache = {}


def matched_run(defect, clean=False):
    key = (defect, clean)
    if key not in _cache:
        c = campaign([matched_technique(defect)], () if clean else (defect,))
        t0 = time.perf_counter()
        res = orch.run_campaign(c)
        _cache[key] = (res, time.perf_counter() - t0)
    return _cache[key]


def tag_matches(violation, mechanism):
    return mechanism in violation.mechanisms


# -- 1 ---------------------------------------------------------------------

@pytest.mark.parametrize("defect", sorted(hv.DEFECTS))
def test_c1_defect_detected_by_matched_campaign(defect):
    with criterion(1, defect):
        res, elapsed = matched_run(defect)
        mech = hv.DEFECTS[defect][0]
        hits = [v for r in res.cases for v in r.report.violations if tag_matches(v, mech)]
        print("  %s: %d matching violation(s), %.2f s" % (defect, len(hits), elapsed))
        assert hits, "no violation tagged %s" % mech
        assert elapsed <= TIME_LIMIT_S


# -- 2 ---------------------------------------------------------------------

def test_c2_clean_campaigns_raise_nothing():
    with criterion(2, "matched campaigns and extra fuzz, no defects"):
        runs = [matched_run(d, clean=True)[0] for d in sorted(hv.DEFECTS)]
        extra = campaign([{"name": "fuzz", "seed": 900, "count": 340, "params": {"policy": "sweep"}},
                          {"name": "fuzz", "seed": 901, "count": 340, "params": {"policy": "random"}}])
        runs.append(orch.run_campaign(extra))
        fuzz_cases = sum(1 for r in runs for c in r.cases if c.technique == wl.FUZZ)
        violations = sum(r.violations for r in runs)
        print("  %d fuzz cases, %d cases total, %d violations"
              % (fuzz_cases, sum(len(r.cases) for r in runs), violations))
        assert fuzz_cases >= 1000
        assert violations == 0


# -- 3 ---------------------------------------------------------------------

def test_c3_covert_channel_open_with_defect():
    with criterion(3, "D-T4 channel decoded"):
        res, _ = matched_run("D-T4")
        cov = res.cases[0].covert
        print("  D-T4: accuracy %.4f, capacity %.4f over %d bits"
              % (cov["accuracy"], cov["capacity"], cov["samples"]))
        assert cov["samples"] == 1000
        assert cov["accuracy"] == 1.0
        assert cov["capacity"] >= 0.9


def test_c3_covert_channel_closed_when_normalized():
    with criterion(3, "normalized channel silent"):
        res, _ = matched_run("D-T4", clean=True)
        cov = res.cases[0].covert
        print("  clean: accuracy %.4f, capacity %.4f" % (cov["accuracy"], cov["capacity"]))
        assert cov["samples"] == 1000
        assert 0.45 <= cov["accuracy"] <= 0.55
        assert cov["capacity"] <= 0.02


def test_c3_estimator_on_synthetic_bsc():
    with criterion(3, "BSC p=0.11 estimate"):
        rng = random.Random(2024)
        bits = [rng.getrandbits(1) for _ in range(50000)]
        out = [b ^ (rng.random() < 0.11) for b in bits]
        est = mon.estimate_capacity(bits, out)
        print("  BSC: estimate %.4f, analytic %.4f" % (est, bsc_capacity(0.11)))
        assert abs(est - 0.50) <= 0.03
        assert abs(bsc_capacity(0.11) - 0.50) <= 0.03


# -- 4 ---------------------------------------------------------------------

DET_DOC = {
    "system": {"defects": ["D-M1W"]},
    "frames_per_case": 8,
    "techniques": [
        {"name": "fuzz", "seed": 41, "count": 135, "params": {"policy": "random"}},
        {"name": "fuzz", "seed": 42, "count": 40, "params": {"policy": "sweep"}},
        {"name": "fault_injection", "seed": 43,
         "params": {"kinds": ["crash", "leak", "reg_corrupt", "mem_corrupt"],
                    "targets": ["T1", "T2", "T3"], "frames": [0, 2]}},
        {"name": "covert_probe", "seed": 44, "params": {"n_bits": 64}},
    ],
}


@pytest.fixture(scope="module")
def det_results():
    return orch.run_campaign(orch.load_campaign(DET_DOC), parallelism=1)


def test_c4_identical_documents_identical_evidence(det_results):
    with criterion(4, "byte-identical evidence"):
        again = orch.run_campaign(orch.load_campaign(dict(DET_DOC)), parallelism=1)
        assert orch.emit_evidence(again, "machine") == orch.emit_evidence(det_results, "machine")


def test_c4_parallelism_does_not_change_results(det_results):
    with criterion(4, "parallelism 1 vs 4"):
        par = orch.run_campaign(orch.load_campaign(DET_DOC), parallelism=4)
        assert [r.digest for r in par.cases] == [r.digest for r in det_results.cases]
        assert orch.emit_evidence(par, "machine") == orch.emit_evidence(det_results, "machine")


def test_c4_every_case_replays(det_results, tmp_path):
    with criterion(4, "replay of a 200-case campaign"):
        assert len(det_results.cases) == 200
        path = tmp_path / "results.jsonl"
        orch.write_results_log(det_results, path, events=False)
        stored = orch.read_results_log(path)
        failed = [r.case.id for r in stored.cases if not orch.replay(stored, r.case.id)[0]]
        print("  %d/%d cases replayed" % (200 - len(failed), 200))
        assert failed == []


# -- 5 ---------------------------------------------------------------------

def test_c5_schedule_conservation():
    with criterion(5, "500/500/1000 over 100 frames"):
        spec = small_spec(slots=(("P1", 5), ("P2", 5), ("P3", 10)))
        res = runner.run(spec, {}, 100)
        counts = schedule_counts(spec, res.trace, res.state.tick)
        print("  active ticks: %s" % dict(sorted(counts.items())))
        assert res.state.tick == 100 * 20
        assert dict(counts) == {"P1": 500, "P2": 500, "P3": 1000}


# -- 6 ---------------------------------------------------------------------

def test_c6_fixture_round_trip_matches_transcription():
    with criterion(6, "tables round-trip"):
        sfrs = json.loads(cm.dump("sfrs"))["rows"]
        sars = json.loads(cm.dump("sars"))["rows"]
        cells = json.loads(cm.dump("standards"))["cells"]
        assert [(r["ref"], r["class"], tuple(r["mechanisms"])) for r in sfrs] == SFR_ROWS
        assert [(r["ref"], r["class"], r["techniques_text"], tuple(r["techniques"]))
                for r in sars] == SAR_ROWS
        assert [(c["standard"], c["property"], c["locator"]) for c in cells] == STANDARD_CELLS
        assert {(c["standard"], c["label"], c["scope"]) for c in cells} == set(STANDARD_LABELS)
        assert (len(sfrs), len(sars), len(cells)) == (8, 6, 15)
        for name in cm.FIXTURES:
            assert cm.dump(name) == cm.fixture_text(name)


def test_c6_resid_campaign_refutes_only_rip():
    with criterion(6, "D-T1 coverage"):
        res, _ = matched_run("D-T1")
        cov = res.coverage()
        with_t1 = [s.ref for s in cm.sfrs() if "T1" in s.mechanism_set]
        refuted = [ref for ref in with_t1 if cov.sfr_status[ref] == cm.REFUTED]
        print("  SFRs citing T1: %s; refuted: %s" % (with_t1, refuted))
        assert refuted == ["FDP_RIP.2.1"]
        assert cov.refuted() == ("FDP_RIP.2.1",)


# -- 7 ---------------------------------------------------------------------

def test_c7_crash_is_contained_for_50_frames():
    with criterion(7, "crash containment"):
        c = campaign([{"name": "fault_injection", "seed": 5,
                       "params": {"kinds": ["crash"], "targets": ["T1", "T2", "T3"], "frames": [0],
                                  "frames_per_case": 50}}])
        res = orch.run_campaign(c)
        assert [r.case.frames for r in res.cases] == [50, 50, 50]
        ft = [v for r in res.cases for v in r.report.violations if v.property == mon.FT_CONT]
        assert ft == [] and res.violations == 0
        # and independently of the monitor: raw checksums against the clean twin
        twin = runner.run(c.spec, {}, 50)
        for case in orch.expand_cases(c):
            faulty = runner.run(c.spec, dict(case.programs), case.frames)
            for q in ("R1", "R2", "R3"):
                assert faulty.checksums[q] == twin.checksums[q]
        print("  3 crash cases x 50 frames, regular checksums equal to baseline")


def test_c7_greedy_overrun_flagged_within_two_frames():
    with criterion(7, "greedy overrun"):
        res, _ = matched_run("D-T2")
        mf = res.campaign.spec.schedule.major_frame
        r = res.cases[0]
        slot = [v for v in r.report.violations if v.property == mon.TP_SLOT]
        assert slot
        rerun = runner.run(res.campaign.spec, dict(r.case.programs), r.case.frames)
        tick_of = {e.seq: e.tick for e in rerun.trace}
        # a violation is established once its last cited event has happened
        first = min(max(tick_of[s] for s in v.evidence) for v in slot)
        print("  first TP-SLOT established at tick %d (frame %d)" % (first, first // mf))
        assert first < 2 * mf


# -- 8 ---------------------------------------------------------------------

def test_c8_malformed_corpus():
    with criterion(8, "1000 malformed cases"):
        c = campaign([{"name": "fuzz", "seed": 8, "count": 1000, "params": {"policy": "malformed"}}])
        res = orch.run_campaign(c)
        assert len(res.cases) == 1000
        assert all(r.error is None for r in res.cases)
        problems = []
        for r in res.cases:
            assert len(r.trace) == r.events
            trace = [hv.TraceEvent.from_dict(d) for d in r.trace]
            problems += scan_invariants(c.spec, trace)
        print("  1000 cases, %d events, %d invariant breaches, %d violations"
              % (sum(r.events for r in res.cases), len(problems), res.violations))
        assert problems == []
        assert res.violations == 0
