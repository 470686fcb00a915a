import json
import subprocess
import sys
from pathlib import Path

import pytest

from isoforge import cli

CAMPAIGNS = Path(__file__).resolve().parent.parent / "campaigns"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


SMALL = {"techniques": [{"name": "fuzz", "seed": 3, "count": 6, "params": {"policy": "sweep"}}]}


def test_list_mechanisms(capsys):
    code, out, _ = run(capsys, "list", "mechanisms")
    lines = out.splitlines()
    assert code == 0 and len(lines) == 8
    assert [l.split()[0] for l in lines] == ["M1", "M2", "M3", "M4", "T1", "T2", "T3", "T4"]


@pytest.mark.parametrize("what,rows", [("sfrs", 8), ("sars", 6), ("defects", 9),
                                       ("standards", 15), ("surface", 16)])
def test_list_row_counts(capsys, what, rows):
    code, out, _ = run(capsys, "list", what)
    assert code == 0 and len(out.splitlines()) == rows


def test_list_unknown(capsys):
    code, _, err = run(capsys, "list", "widgets")
    assert code == 2 and err


@pytest.mark.parametrize("query,want", [
    ("sfr=FRU_PRU", "M4,T3,T4"),
    ("mech=T1", "FDP_RIP.2.1"),
    ("sar=AVA_VAN", "penetration(not implemented), fuzz, taint(not implemented)"),
])
def test_map_examples(capsys, query, want):
    code, out, _ = run(capsys, "map", query)
    assert code == 0 and want in out


@pytest.mark.parametrize("query", ["sfr=NOPE", "mech=M9", "sar=AVA_XYZ", "colour=red", "junk"])
def test_map_unknown(capsys, query):
    assert run(capsys, "map", query)[0] == 2


def test_list_and_map_are_byte_stable():
    argvs = [["list", w] for w in cli.LIST_TOPICS] + [["map", "sfr=FDP_IFC.2.1"], ["map", "mech=M3"]]
    for argv in argvs:
        outs = {subprocess.run([sys.executable, "-m", "isoforge", *argv], capture_output=True).stdout
                for _ in range(2)}
        assert len(outs) == 1


def test_run_clean_then_replay_and_report(capsys, tmp_path):
    camp = write(tmp_path, "c.json", SMALL)
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "run", camp, str(out_dir))
    assert code == 0 and "0 violation" in out
    for name in ("results.jsonl", "evidence.json", "evidence.txt"):
        assert (out_dir / name).exists()
    log = str(out_dir / "results.jsonl")
    assert run(capsys, "replay", log, "5")[0] == 0
    assert run(capsys, "replay", log, "6")[0] == 2
    code, out, _ = run(capsys, "report", log)
    assert code == 0 and "FDP_IFC.2.1" in out
    code, _, _ = run(capsys, "report", log, "--format", "machine", "--out", str(tmp_path / "re"))
    assert (tmp_path / "re" / "evidence.json").read_text() == (out_dir / "evidence.json").read_text()


def test_run_with_defect_exits_one(capsys, tmp_path):
    code, out, _ = run(capsys, "run", str(CAMPAIGNS / "seeded_m1w.json"), str(tmp_path / "o"),
                       "--format", "machine")
    assert code == 1
    assert (tmp_path / "o" / "evidence.json").exists()
    assert not (tmp_path / "o" / "evidence.txt").exists()


def test_seed_override_changes_cases(capsys, tmp_path):
    camp = write(tmp_path, "c.json", {"techniques": [{"name": "fuzz", "count": 3,
                                                      "params": {"policy": "random"}}]})
    run(capsys, "run", camp, str(tmp_path / "a"), "--seed-override", "1")
    run(capsys, "run", camp, str(tmp_path / "b"), "--seed-override", "2")
    a = json.loads((tmp_path / "a" / "evidence.json").read_text())
    b = json.loads((tmp_path / "b" / "evidence.json").read_text())
    assert [c["seed"] for c in a["cases"]] != [c["seed"] for c in b["cases"]]


def test_tampered_digest_fails_replay(capsys, tmp_path):
    camp = write(tmp_path, "c.json", SMALL)
    run(capsys, "run", camp, str(tmp_path / "o"))
    log = tmp_path / "o" / "results.jsonl"
    lines = log.read_text().splitlines()
    for i, line in enumerate(lines):
        rec = json.loads(line)
        if rec["type"] == "case" and rec["case"]["id"] == 2:
            rec["digest"] = "0" * 64
            lines[i] = json.dumps(rec)
    log.write_text("\n".join(lines) + "\n")
    assert run(capsys, "replay", str(log), "2")[0] == 1
    assert run(capsys, "replay", str(log), "1")[0] == 0


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "run", str(tmp_path / "missing.json"))[0] == 2
    bad = write(tmp_path, "bad.json", {"techniques": [], "system": {"defects": ["D-T9"]}})
    assert run(capsys, "run", bad, str(tmp_path / "o"))[0] == 2
    junk = tmp_path / "junk.json"
    junk.write_text("{")
    assert run(capsys, "run", str(junk))[0] == 2
    assert run(capsys, "replay", str(tmp_path / "nolog.jsonl"), "0")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys)[0] == 2


def test_internal_error_exit_three(capsys, monkeypatch):
    def boom(_):
        raise RuntimeError("kaboom")
    monkeypatch.setattr(cli, "render_list", boom)
    code, _, err = run(capsys, "list", "sfrs")
    assert code == 3 and "kaboom" in err


def test_log_level_env(capsys, tmp_path, monkeypatch):
    camp = write(tmp_path, "c.json", SMALL)
    monkeypatch.setenv("ISOFORGE_LOG", "info")
    code, out, err = run(capsys, "run", camp, str(tmp_path / "o"))
    assert code == 0 and "campaign" in err and "campaign:" not in out
