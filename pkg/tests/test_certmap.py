import json

import pytest
from hypothesis import given, settings, strategies as st

from isoforge import certmap as cm
from isoforge import hv_model as hv
from isoforge import monitor as mon
from isoforge import workloads as wl

from transcribed import SAR_ROWS, SFR_ROWS, STANDARD_CELLS, STANDARD_LABELS


def test_sfr_table_matches_transcription():
    assert [(s.ref, s.class_name, s.mechanisms) for s in cm.sfrs()] == SFR_ROWS


def test_sar_table_matches_transcription():
    got = [(s.ref, s.class_name, s.techniques_text, tuple(t.tag for t in s.techniques))
           for s in cm.sars()]
    assert got == SAR_ROWS


def test_standards_table_matches_transcription():
    assert [(c.standard, c.property, c.locator) for c in cm.standards()] == STANDARD_CELLS
    assert {(c.standard, c.label, c.scope) for c in cm.standards()} == set(STANDARD_LABELS)
    assert [c.not_applicable for c in cm.standards()].count(True) == 2


@pytest.mark.parametrize("name", sorted(cm.FIXTURES))
def test_dump_is_byte_identical(name):
    assert cm.dump(name) == cm.fixture_text(name)
    assert json.loads(cm.dump(name))["version"] == cm.FIXTURE_VERSION


def test_query_examples():
    assert cm.mechanisms_for_sfr("FRU_PRU") == {"M4", "T3", "T4"}
    assert cm.sfrs_for_mechanism("T1") == ("FDP_RIP.2.1",)
    assert cm.sfrs_for_mechanism("M3") == ("FDP_IFC.2.1", "FDP_IFF.1.1", "FTP_SEP")
    assert cm.sars_for_technique("fuzz") == ("ATE_COV", "AVA_VAN")
    van = cm.techniques_for_sar("AVA_VAN")
    assert {str(t) for t in van} == {"penetration(not implemented)", "fuzz",
                                     "taint(not implemented)"}
    assert cm.standard_refs("DO-178C", "temporal").locator == "Section 2.4.1.b"
    assert len(cm.citations("fault")) == 5 and len(cm.citations()) == 15


def test_unknown_lookups():
    with pytest.raises(cm.UnknownSfr):
        cm.sfr("FOO_BAR")
    with pytest.raises(cm.UnknownSar):
        cm.techniques_for_sar("ATE_XYZ")
    with pytest.raises(cm.UnknownStandard):
        cm.standard_refs("ISO 9001", "spatial")
    with pytest.raises(KeyError):
        cm.sfrs_for_mechanism("M9")


def test_mapping_totality():
    cited = {m for s in cm.sfrs() for m in s.mechanisms}
    assert set(hv.MECHANISMS) - cited == {"T2"}
    assert cm.unmapped_mechanisms() == ("T2",)
    for s in cm.sars():
        assert {t.tag for t in s.techniques} <= set(cm.TECHNIQUE_TAGS)
        assert s.implemented == tuple(t.tag for t in s.techniques if t.implemented)


# -- coverage --------------------------------------------------------------

def rep(exercised=(), violations=(), interfaces=()):
    return mon.MonitorReport(mon.PROPERTIES, tuple(violations), tuple(sorted(exercised)),
                             tuple(interfaces), {})


def viol(prop, seq=1):
    return mon.Violation(prop, mon.mechanism_tag(prop), (seq,), "x")


def test_coverage_no_covert_probe():
    everything = set(hv.MECHANISMS)
    cov = cm.coverage([(0, wl.FUZZ, rep(everything))])
    assert "T4" not in cov.mechanisms_exercised
    assert cov.sfr_status["FMT_IFF.3.1"] == cm.UNTESTED
    assert cov.sfr_status["FDP_IFC.2.1"] == cm.SUPPORTED
    assert cov.sar_status["AVA_CCA"] == cm.NOT_EXERCISED
    assert cov.sar_status["AVA_SOF"] == cm.NOT_APPLICABLE
    assert cov.sar_status["AVA_VAN"] == cm.EXERCISED


def test_coverage_resid_refutes_only_rip():
    cov = cm.coverage([(3, wl.SCRIPTED, rep({"T1"}, [viol(mon.TP_RESID, 40)]))])
    assert cov.refuted() == ("FDP_RIP.2.1",)
    assert cov.sfr_evidence["FDP_RIP.2.1"] == ((3, mon.TP_RESID, (40,)),)


def test_covert_violation_refutes_m3_and_t4_rows():
    cov = cm.coverage([(0, wl.COVERT_PROBE, rep({"M3"}, [viol(mon.TP_COVERT)]))])
    want = {s.ref for s in cm.sfrs() if s.mechanism_set & {"M3", "T4"}}
    assert set(cov.refuted()) == want


def test_tsfi_fraction():
    cov = cm.coverage([(wl.FUZZ, rep(interfaces=[("PV", 0), ("HWFV", 2)]))])
    assert cov.tsfi_total == 16 and cov.tsfi_fraction == pytest.approx(2 / 16)
    assert cov.to_dict()["footnotes"]


violation_props = st.sampled_from(list(mon.PROPERTIES))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(wl.TECHNIQUES),
                          st.sets(st.sampled_from(hv.MECHANISMS)),
                          st.lists(violation_props, max_size=2)), max_size=6))
def test_coverage_consistency(items):
    results = [(i, t, rep(ex, [viol(p, i + 1) for p in vs])) for i, (t, ex, vs) in enumerate(items)]
    cov = cm.coverage(results)
    bad = {m for _, _, r in results for v in r.violations for m in v.mechanisms}
    for s in cm.sfrs():
        st_ = cov.sfr_status[s.ref]
        if st_ == cm.REFUTED:
            assert s.mechanism_set & bad and cov.sfr_evidence[s.ref]
        else:
            assert not s.mechanism_set & bad
        if st_ == cm.SUPPORTED:
            assert s.mechanism_set <= set(cov.mechanisms_exercised)
    ran = {t for t, _, _ in items}
    assert ("T4" in cov.mechanisms_exercised) == (wl.COVERT_PROBE in ran)
    for s in cm.sars():
        if s.ref not in cm.NOT_APPLICABLE_SARS:
            assert (cov.sar_status[s.ref] == cm.EXERCISED) == bool(set(s.implemented) & ran)
