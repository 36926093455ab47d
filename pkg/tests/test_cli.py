import json
import subprocess
import sys

import pytest

from korora.cli import main

from conftest import SCENARIOS, small_doc


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run_report(tmp_path, *args):
    out = tmp_path / "r.json"
    code = main(["run", *args, "-o", str(out), "--quiet"])
    return code, json.loads(out.read_text())


def test_run_basic_commits(tmp_path):
    code, rep = run_report(tmp_path, str(SCENARIOS / "basic.json"))
    assert code == 0 and rep["verdict"] == "committed"
    assert rep["timestamp"]


def test_run_tamper_aborts(tmp_path):
    code, rep = run_report(tmp_path, str(SCENARIOS / "tamper_precopy.json"))
    assert code == 3 and rep["reason"] == "tamper-detected"


def test_run_corrupt_rolls_back(tmp_path):
    code, rep = run_report(tmp_path, str(SCENARIOS / "corrupt_data.json"))
    assert code == 2 and len(rep["flags"]) == 1


def test_run_report_to_stdout(capsys):
    assert main(["run", str(SCENARIOS / "basic.json"), "--quiet"]) == 0
    assert json.loads(capsys.readouterr().out)["format"] == "korora_report_v1"


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d["vm"].pop("chunk_count"), "chunk_count"),
        (lambda d: d["vm"].update(chunk_count="many"), "vm/chunk_count"),
        (lambda d: d["transfer"].update(stop_threshold=2), "transfer/stop_threshold"),
        (lambda d: d.update(surprise=1), "surprise"),
    ],
)
def test_malformed_scenario_names_field(tmp_path, capsys, mutate, field):
    doc = small_doc()
    mutate(doc)
    assert main(["run", write(tmp_path, doc)]) == 1
    assert field in capsys.readouterr().err


def test_unparseable_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["run", str(p)]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_file_and_bad_args(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 1
    assert main(["bogus"]) == 1
    assert main([]) == 1


def test_seed_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, small_doc())
    _, base = run_report(tmp_path, path)
    monkeypatch.setenv("KORORA_SEED", "99")
    _, env = run_report(tmp_path, path)
    _, flag = run_report(tmp_path, path, "--seed", "99")
    _, other = run_report(tmp_path, path, "--seed", "7")
    strip = lambda r: {k: v for k, v in r.items() if k != "timestamp"}
    assert strip(env) == strip(flag)
    assert env["session_log_digest"] != base["session_log_digest"]
    assert strip(other) == strip(base)


def test_bad_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("KORORA_SEED", "abc")
    assert main(["run", write(tmp_path, small_doc()), "--quiet"]) == 1


def test_attack_matrix_outputs(tmp_path, capsys):
    out = tmp_path / "m"
    code = main(["attack-matrix", write(tmp_path, small_doc()), "-o", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary) == 8
    verdicts = {r["preset"]: r["verdict"] for r in summary}
    assert verdicts["none"] == verdicts["eavesdrop"] == "committed"
    assert all(v == "aborted" for k, v in verdicts.items() if k not in ("none", "eavesdrop"))
    assert not any(r["silent_corruption"] for r in summary)
    assert (out / "tamper-vtpm.json").exists()
    table = capsys.readouterr().out
    assert "preset" in table and "replay-handshake" in table
    assert (out / "summary.txt").read_text().strip() == table.strip()


def test_policy_audit_secure(capsys):
    assert main(["policy-audit", str(SCENARIOS / "policy_secure.json")]) == 0
    assert capsys.readouterr().out.strip() == "GRID cases=6400 mismatches=0"


def test_policy_audit_read_down(capsys):
    assert main(["policy-audit", str(SCENARIOS / "policy_read_down.json")]) == 2
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "VIOLATION subject=admin object=scratch attr=r reason=read-down"
    assert len([l for l in lines if l.startswith("VIOLATION")]) == 1


def test_policy_audit_bad_fixture(tmp_path):
    assert main(["policy-audit", write(tmp_path, {"format": "korora_policy_v1"})]) == 1


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "korora", "run", str(SCENARIOS / "basic.json"), "--quiet"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["verdict"] == "committed"
