"""Command line front end.

Exit codes: 0 success with no violations, 1 violations found (or a replay
digest mismatch), 2 usage or configuration error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import certmap
from . import hv_model as hv
from . import orchestrator as orch
from . import vm_interface as vi
from . import workloads as wl

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LIST_TOPICS = ("mechanisms", "surface", "defects", "sfrs", "sars", "standards")

RESULTS_LOG = "results.jsonl"
EVIDENCE_MACHINE = "evidence.json"
EVIDENCE_HUMAN = "evidence.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("ISOFORGE_LOG", "quiet").lower(), logging.ERROR)
    root = logging.getLogger("isoforge")
    root.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)


# -- listings --------------------------------------------------------------

def render_list(what: str) -> str:
    """Stable text listing of one catalog."""
    rows = []
    if what == "mechanisms":
        for m in hv.MECHANISMS:
            rows.append("%s  %s" % (m, hv.MECHANISM_NAMES[m]))
    elif what == "surface":
        for e in vi.PV_CATALOG:
            rows.append("PV    %2d  %-13s (%s)  cost %s"
                        % (e.id, e.name, ", ".join(e.arg_names), e.cost))
        for e in vi.HWFV_CATALOG:
            rows.append("HWFV  %2d  %-13s (%s)  cost 1 tick"
                        % (e.id, e.reason, ", ".join(e.arg_names)))
    elif what == "defects":
        for d in sorted(hv.DEFECTS):
            mech, effect = hv.DEFECTS[d]
            rows.append("%-6s %s  %s" % (d, mech, effect))
    elif what == "sfrs":
        for s in certmap.sfrs():
            rows.append("%-12s %-40s %s" % (s.ref, s.class_name, ",".join(s.mechanisms)))
    elif what == "sars":
        for s in certmap.sars():
            rows.append("%-8s %-36s %s" % (s.ref, s.class_name,
                                           ", ".join(str(t) for t in s.techniques)))
    elif what == "standards":
        for c in certmap.standards():
            rows.append("%-9s %-8s %-8s %s" % (c.standard, c.scope, c.property, c.locator))
    else:
        raise UsageError("unknown listing %r (choose from %s)" % (what, ", ".join(LIST_TOPICS)))
    return "\n".join(rows) + "\n"


def render_map(query: str) -> str:
    key, sep, ref = query.partition("=")
    if not sep or not ref:
        raise UsageError("query must look like sfr=<ref>, mech=<id> or sar=<ref>")
    try:
        if key == "sfr":
            s = certmap.sfr(ref)
            return "%s  %s\n  %s\n" % (s.ref, s.class_name, ",".join(s.mechanisms))
        if key == "mech":
            if ref not in hv.MECHANISMS:
                raise UsageError("unknown mechanism %r" % ref)
            hits = certmap.sfrs_for_mechanism(ref)
            return "%s  %s\n  %s\n" % (ref, hv.MECHANISM_NAMES[ref], ",".join(hits) or "(no SFR)")
        if key == "sar":
            s = certmap.sar(ref)
            return "%s  %s\n  %s\n" % (s.ref, s.class_name,
                                        ", ".join(str(t) for t in s.techniques))
    except (certmap.UnknownSfr, certmap.UnknownSar):
        raise UsageError("unknown %s %r" % (key, ref)) from None
    raise UsageError("unknown query kind %r" % key)


# -- commands --------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        text = Path(args.campaign).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError("cannot read campaign: %s" % e) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError("campaign is not valid JSON: %s" % e) from None
    if args.seed_override is not None and isinstance(doc, dict):
        for t in doc.get("techniques") or []:
            if isinstance(t, dict):
                t["seed"] = args.seed_override
    campaign = orch.load_campaign(doc)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError("cannot create output directory: %s" % e) from None
    results = orch.run_campaign(campaign, parallelism=args.parallel)
    orch.write_results_log(results, out / RESULTS_LOG)
    _write_evidence(results, out, args.format)
    print("%d case(s), %d violation(s); results in %s"
          % (len(results.cases), results.violations, out))
    return EXIT_VIOLATIONS if results.violations else EXIT_OK


def _write_evidence(results, out: Path, fmt: str) -> None:
    if fmt in ("machine", "both"):
        (out / EVIDENCE_MACHINE).write_text(orch.emit_evidence(results, "machine"), encoding="utf-8")
    if fmt in ("human", "both"):
        (out / EVIDENCE_HUMAN).write_text(orch.emit_evidence(results, "human"), encoding="utf-8")


def _load_log(path):
    try:
        return orch.read_results_log(path)
    except OSError as e:
        raise UsageError("cannot read results log: %s" % e) from None


def cmd_list(args) -> int:
    sys.stdout.write(render_list(args.what))
    return EXIT_OK


def cmd_map(args) -> int:
    sys.stdout.write(render_map(args.query))
    return EXIT_OK


def cmd_replay(args) -> int:
    results = _load_log(args.results_log)
    try:
        ok, stored, fresh = orch.replay(results, args.case_id)
    except KeyError:
        raise UsageError("no case %d in %s" % (args.case_id, args.results_log)) from None
    print("case %d: %s (stored %s, replayed %s)"
          % (args.case_id, "match" if ok else "MISMATCH", stored[:16], fresh[:16]))
    return EXIT_OK if ok else EXIT_VIOLATIONS


def cmd_report(args) -> int:
    results = _load_log(args.results_log)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_evidence(results, out, args.format)
    else:
        fmts = ("human", "machine") if args.format == "both" else (args.format,)
        for f in fmts:
            sys.stdout.write(orch.emit_evidence(results, f))
    return EXIT_VIOLATIONS if results.violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="isoforge", description="Isolation testing campaigns on a simulated partitioning hypervisor.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a campaign and write results and evidence")
    r.add_argument("campaign")
    r.add_argument("out", nargs="?", default="isoforge-out")
    r.add_argument("--parallel", type=int, default=None, metavar="N")
    r.add_argument("--seed-override", type=int, default=None, metavar="S")
    r.add_argument("--format", choices=("human", "machine", "both"), default="both")
    r.set_defaults(func=cmd_run)

    ls = sub.add_parser("list", help="list a catalog: " + ", ".join(LIST_TOPICS))
    ls.add_argument("what")
    ls.set_defaults(func=cmd_list)

    m = sub.add_parser("map", help="look up sfr=<ref>, mech=<id> or sar=<ref>")
    m.add_argument("query")
    m.set_defaults(func=cmd_map)

    rp = sub.add_parser("replay", help="re-execute a stored case and compare digests")
    rp.add_argument("results_log")
    rp.add_argument("case_id", type=int)
    rp.set_defaults(func=cmd_replay)

    rep = sub.add_parser("report", help="re-render evidence from a results log")
    rep.add_argument("results_log")
    rep.add_argument("--out", default=None)
    rep.add_argument("--format", choices=("human", "machine", "both"), default="human")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "parallel", None) is not None and args.parallel < 1:
            raise UsageError("--parallel must be >= 1")
        return args.func(args)
    except UsageError as e:
        print("isoforge: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except (orch.SchemaError, hv.UnknownDefect, wl.UnknownProfile) as e:
        print("isoforge: configuration error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - last-resort contract
        logging.getLogger("isoforge").debug("internal error", exc_info=True)
        print("isoforge: internal error: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
