"""Certification mappings: standards, mechanisms to SFRs, techniques to SARs.

The three data sets ship as JSON fixtures under ``isoforge/data``.  They load
into frozen records once per process and serialize back to the exact bytes
they were read from, which is what the fidelity tests compare against.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Dict, FrozenSet, List, Optional, Tuple

from . import hv_model as hv
from . import vm_interface as vi
from . import workloads as wl

FIXTURE_VERSION = 1
FIXTURES = {"standards": "standards.json", "sfrs": "sfrs.json", "sars": "sars.json"}

STANDARDS = ("DO-178C", "IEC 61508", "ISO 26262", "EN 50128", "ISO 15408")
ISOLATION_PROPERTIES = ("spatial", "temporal", "fault")

PENETRATION = "penetration"
SYMBOLIC_EXECUTION = "symbolic_execution"
TAINT = "taint"
TECHNIQUE_TAGS = wl.TECHNIQUES + (PENETRATION, SYMBOLIC_EXECUTION, TAINT)
IMPLEMENTED = frozenset(wl.TECHNIQUES)

SUPPORTED = "supported"
REFUTED = "refuted"
UNTESTED = "untested"
EXERCISED = "exercised"
NOT_EXERCISED = "not_exercised"
NOT_APPLICABLE = "not_applicable"

# SARs whose subject has no counterpart in a partitioning hypervisor model
NOT_APPLICABLE_SARS = {
    "AVA_SOF": "the modelled TOE realizes no security function through a "
               "probabilistic or permutational mechanism, so strength-of-function "
               "analysis has nothing to measure",
}

FOOTNOTES = (
    "FMT_IFF.3.1 lists M4 and T4 only, although the device timing channel also "
    "depends on M3; statuses follow the table as published.",
    "T2 (fixed cyclic scheduling) appears in no SFR row, so slot violations "
    "refute no SFR; they are still reported per property.",
    "FMT_MOF is evidenced through the CONTROL_REG trap and other kernel-space writes.",
)


class UnknownSfr(KeyError):
    pass


class UnknownSar(KeyError):
    pass


class UnknownStandard(KeyError):
    pass


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class StandardRef:
    standard: str
    label: str
    scope: str
    property: str
    detail: str
    locator: str

    @property
    def not_applicable(self) -> bool:
        return self.locator == "N/A"


@dataclass(frozen=True)
class SfrEntry:
    ref: str
    class_name: str
    text: str
    mechanisms: Tuple[str, ...]

    @property
    def mechanism_set(self) -> FrozenSet[str]:
        return frozenset(self.mechanisms)


@dataclass(frozen=True)
class Technique:
    tag: str
    implemented: bool

    def __str__(self):
        return self.tag if self.implemented else "%s(not implemented)" % self.tag


@dataclass(frozen=True)
class SarEntry:
    ref: str
    class_name: str
    text: str
    techniques_text: str
    techniques: Tuple[Technique, ...]

    @property
    def implemented(self) -> Tuple[str, ...]:
        return tuple(t.tag for t in self.techniques if t.implemented)


# -- loading ---------------------------------------------------------------

def _raw(name: str) -> str:
    return resources.files("isoforge").joinpath("data").joinpath(FIXTURES[name]).read_text(encoding="utf-8")


def _render(doc: dict) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def _check_version(doc: dict, name: str) -> None:
    if doc.get("version") != FIXTURE_VERSION:
        raise FixtureError("%s fixture has version %r, expected %d"
                           % (name, doc.get("version"), FIXTURE_VERSION))


@lru_cache(maxsize=None)
def _tables():
    std_doc = json.loads(_raw("standards"))
    sfr_doc = json.loads(_raw("sfrs"))
    sar_doc = json.loads(_raw("sars"))
    for name, doc in (("standards", std_doc), ("sfrs", sfr_doc), ("sars", sar_doc)):
        _check_version(doc, name)

    standards = tuple(StandardRef(c["standard"], c["label"], c["scope"], c["property"],
                                  c["detail"], c["locator"]) for c in std_doc["cells"])
    sfrs = tuple(SfrEntry(r["ref"], r["class"], r["text"], tuple(r["mechanisms"]))
                 for r in sfr_doc["rows"])
    sars = tuple(SarEntry(r["ref"], r["class"], r["text"], r["techniques_text"],
                          tuple(Technique(t, t in IMPLEMENTED) for t in r["techniques"]))
                 for r in sar_doc["rows"])

    for s in sfrs:
        if not s.mechanisms or not set(s.mechanisms) <= set(hv.MECHANISMS):
            raise FixtureError("SFR %s has an invalid mechanism set" % s.ref)
    for s in sars:
        if not s.techniques or any(t.tag not in TECHNIQUE_TAGS for t in s.techniques):
            raise FixtureError("SAR %s has an invalid technique set" % s.ref)
    for c in standards:
        if c.standard not in STANDARDS or c.property not in ISOLATION_PROPERTIES or not c.locator:
            raise FixtureError("bad standards cell %s/%s" % (c.standard, c.property))
    return {"standards": (std_doc, standards), "sfrs": (sfr_doc, sfrs), "sars": (sar_doc, sars)}


def standards() -> Tuple[StandardRef, ...]:
    return _tables()["standards"][1]


def sfrs() -> Tuple[SfrEntry, ...]:
    return _tables()["sfrs"][1]


def sars() -> Tuple[SarEntry, ...]:
    return _tables()["sars"][1]


def dump(name: str) -> str:
    """Serialize a loaded table back to fixture text."""
    doc, rows = _tables()[name]
    head = {k: v for k, v in doc.items() if k not in ("cells", "rows")}
    if name == "standards":
        body = {"cells": [{"standard": c.standard, "label": c.label, "scope": c.scope,
                           "property": c.property, "detail": c.detail, "locator": c.locator}
                          for c in rows]}
    elif name == "sfrs":
        body = {"rows": [{"ref": r.ref, "class": r.class_name, "text": r.text,
                          "mechanisms": list(r.mechanisms)} for r in rows]}
    else:
        body = {"rows": [{"ref": r.ref, "class": r.class_name, "text": r.text,
                          "techniques_text": r.techniques_text,
                          "techniques": [t.tag for t in r.techniques]} for r in rows]}
    return _render({**head, **body})


def fixture_text(name: str) -> str:
    return _raw(name)


# -- queries ---------------------------------------------------------------

def sfr(ref: str) -> SfrEntry:
    for s in sfrs():
        if s.ref == ref:
            return s
    raise UnknownSfr(ref)


def sar(ref: str) -> SarEntry:
    for s in sars():
        if s.ref == ref:
            return s
    raise UnknownSar(ref)


def mechanisms_for_sfr(ref: str) -> FrozenSet[str]:
    return sfr(ref).mechanism_set


def sfrs_for_mechanism(mech: str) -> Tuple[str, ...]:
    if mech not in hv.MECHANISMS:
        raise KeyError(mech)
    return tuple(s.ref for s in sfrs() if mech in s.mechanisms)


def techniques_for_sar(ref: str) -> FrozenSet[Technique]:
    return frozenset(sar(ref).techniques)


def sars_for_technique(tag: str) -> Tuple[str, ...]:
    if tag not in TECHNIQUE_TAGS:
        raise KeyError(tag)
    return tuple(s.ref for s in sars() if any(t.tag == tag for t in s.techniques))


def standard_refs(standard: str, prop: str) -> StandardRef:
    for c in standards():
        if c.standard == standard and c.property == prop:
            return c
    raise UnknownStandard("%s/%s" % (standard, prop))


def unmapped_mechanisms() -> Tuple[str, ...]:
    """Mechanisms that no SFR row cites."""
    cited = {m for s in sfrs() for m in s.mechanisms}
    return tuple(m for m in hv.MECHANISMS if m not in cited)


# -- coverage --------------------------------------------------------------

@dataclass(frozen=True)
class CoverageReport:
    sfr_status: Dict[str, str]
    sfr_evidence: Dict[str, Tuple[Tuple[int, str, Tuple[int, ...]], ...]]
    sar_status: Dict[str, str]
    mechanisms_exercised: Tuple[str, ...]
    mechanisms_refuted: Tuple[str, ...]
    techniques_run: Tuple[str, ...]
    tsfi_covered: Tuple[Tuple[str, int], ...]
    tsfi_total: int
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def tsfi_fraction(self) -> float:
        return len(self.tsfi_covered) / self.tsfi_total if self.tsfi_total else 0.0

    def refuted(self) -> Tuple[str, ...]:
        return tuple(r for r, s in self.sfr_status.items() if s == REFUTED)

    def to_dict(self) -> dict:
        return {
            "sfr_status": dict(self.sfr_status),
            "sfr_evidence": {r: [{"case": c, "property": p, "seq": list(q)} for c, p, q in ev]
                             for r, ev in self.sfr_evidence.items()},
            "sar_status": dict(self.sar_status),
            "mechanisms_exercised": list(self.mechanisms_exercised),
            "mechanisms_refuted": list(self.mechanisms_refuted),
            "techniques_run": list(self.techniques_run),
            "tsfi_covered": [list(i) for i in self.tsfi_covered],
            "tsfi_total": self.tsfi_total,
            "tsfi_fraction": round(self.tsfi_fraction, 6),
            "notes": dict(self.notes),
            "footnotes": list(FOOTNOTES),
        }


def _unpack(item, pos: int):
    if isinstance(item, tuple):
        if len(item) == 3:
            return item
        return (pos,) + tuple(item)
    return item.case.id if hasattr(item, "case") else item.case_id, item.technique, item.report


def coverage(results) -> CoverageReport:
    """Coverage of SFRs and SARs by a set of case outcomes.

    ``results`` is either an object with a ``cases`` attribute or an iterable
    whose items are ``(case_id, technique, report)`` / ``(technique, report)``
    tuples or objects exposing ``technique`` and ``report``.
    """
    items = results.cases if hasattr(results, "cases") else results
    exercised = set()
    ran = set()
    refuting: Dict[str, List[Tuple[int, str, Tuple[int, ...]]]] = {}
    tsfi = set()
    for pos, item in enumerate(items):
        case_id, technique, report = _unpack(item, pos)
        ran.add(technique)
        exercised.update(report.exercised)
        tsfi.update(tuple(i) for i in report.interfaces)
        for v in report.violations:
            for m in v.mechanisms:
                refuting.setdefault(m, []).append((case_id, v.property, tuple(v.evidence)))
    # temporal normalization only counts when a probe actually measured it
    if wl.COVERT_PROBE in ran:
        exercised.add("T4")
    else:
        exercised.discard("T4")

    status: Dict[str, str] = {}
    evidence: Dict[str, Tuple] = {}
    for s in sfrs():
        hits = [e for m in s.mechanisms for e in refuting.get(m, ())]
        if hits:
            status[s.ref] = REFUTED
            evidence[s.ref] = tuple(sorted(set(hits)))
        elif s.mechanism_set <= exercised:
            status[s.ref] = SUPPORTED
        else:
            status[s.ref] = UNTESTED

    sar_status: Dict[str, str] = {}
    for s in sars():
        if s.ref in NOT_APPLICABLE_SARS:
            sar_status[s.ref] = NOT_APPLICABLE
        elif any(t in ran for t in s.implemented):
            sar_status[s.ref] = EXERCISED
        else:
            sar_status[s.ref] = NOT_EXERCISED

    catalog = vi.full_catalog()
    return CoverageReport(
        status, evidence, sar_status,
        tuple(m for m in hv.MECHANISMS if m in exercised),
        tuple(m for m in hv.MECHANISMS if m in refuting),
        tuple(t for t in TECHNIQUE_TAGS if t in ran),
        tuple(sorted(tsfi, key=lambda i: (i[0] != vi.PV, i[1]))),
        len(catalog),
        dict(NOT_APPLICABLE_SARS),
    )


def citations(prop: Optional[str] = None) -> Tuple[StandardRef, ...]:
    """Table cells for one isolation property, or all of them."""
    return tuple(c for c in standards() if prop is None or c.property == prop)
