import csv
import io
import json
import shutil
import subprocess
import sys

import pytest

from conftest import GOLDEN, LIC, gate_run, tree_bytes

from evgate.cli import CliError, EXIT_CONFIG, EXIT_FAIL, EXIT_OK, build_report, main
from evgate.manifest import DocumentEntry


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert gate_run(out) == EXIT_OK
    return out


def test_golden_outcomes(run_dir):
    traces = {p.name.split(".")[0]: json.loads(p.read_text()) for p in (run_dir / "traces").glob("*.json")}
    states = {rid[:3]: (t["return_state"], t["reasons"][-1]) for rid, t in traces.items()}
    assert states == {
        "q01": ("ABSTAIN", "independence_or_cap"),
        "q02": ("PROMOTE_FULL", "all_gates_passed"),
        "q03": ("PROMOTE_LITE", "proof_timeout_or_size"),
        "q04": ("ABSTAIN", "proof_timeout_or_size"),
        "q05": ("ABSTAIN", "scope"),
        "q06": ("PROMOTE_FULL", "all_gates_passed"),
    }
    q06 = next(t for rid, t in traces.items() if rid.startswith("q06"))
    assert q06["incident_ticket"] == "INC-001" and q06["heavy_calls"] == 1
    q02 = next(p for p in (run_dir / "receipts").glob("q02*"))
    assert "[REDACTED:email]" in q02.read_text()


def test_rerun_is_byte_identical(run_dir, tmp_path):
    assert gate_run(tmp_path / "again") == EXIT_OK
    assert tree_bytes(tmp_path / "again") == tree_bytes(run_dir)


def test_tampered_fixture_refuses(tmp_path):
    fx = tmp_path / "fx"
    shutil.copytree(GOLDEN, fx)
    pol = fx / "policy.json"
    pol.write_bytes(pol.read_bytes().replace(b'"tau":0.8', b'"tau":0.5'))
    assert gate_run(tmp_path / "out", fx) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def verify_args(run_dir, receipt, now):
    k = run_dir / "krn"
    return ["verify", str(receipt), "--trust", str(run_dir / "trust.json"), "--krn", str(k / "local.jsonl"),
            "--substrate", str(k / "substrate.jsonl"), "--mirror", str(k / "mirror.json"), "--now", str(now)]


def test_verify_command(run_dir, capsys):
    end = json.loads((run_dir / "summary.json").read_text())["clock_end_ms"]
    for p in sorted((run_dir / "receipts").glob("*.json")):
        assert main(verify_args(run_dir, p, end)) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    lite = next((run_dir / "receipts").glob("q03*"))
    assert main(verify_args(run_dir, lite, end + 400_000)) == EXIT_FAIL
    assert "stale_mirror" in capsys.readouterr().out


def test_krn_commands(tmp_path, capsys):
    krn, mirror, sub = tmp_path / "local.jsonl", tmp_path / "mirror.json", tmp_path / "sub.jsonl"
    sub.write_text(json.dumps({"kid": "k", "recorded_at": 1, "seq": 1, "t0": 0, "t1": None}) + "\n")
    base = ["--krn", str(krn), "--mirror", str(mirror), "--now", "1000"]
    assert main(["krn", "mirror", *base, "--substrate", str(sub)]) == EXIT_OK
    capsys.readouterr()
    assert main(["krn", "status", *base]) == EXIT_OK
    st = json.loads(capsys.readouterr().out)
    assert st["cursor"] == 1 and st["fresh"] is True
    assert main(["krn", "reconcile", *base, "--substrate", str(sub)]) == EXIT_OK


def test_manifest_commands(tmp_path, capsys):
    entries = tmp_path / "entries.jsonl"
    rows = [DocumentEntry(f"d{i}", bytes([i]) * 32, LIC, (f"d{i}#p1",), 2, "iss").to_dict() for i in range(5)]
    entries.write_text("\n".join(json.dumps(r) for r in rows))
    shard = tmp_path / "shard.json"
    shard.write_text(json.dumps({"issuer": "iss", "corpus": "c", "jurisdiction": "EU"}))
    m = tmp_path / "m.json"
    assert main(["manifest", "build", "--entries", str(entries), "--shard", str(shard), "--out", str(m)]) == EXIT_OK
    root = json.loads(capsys.readouterr().out)["root"]
    proof = tmp_path / "p.bin"
    assert main(["manifest", "prove", "--manifest", str(m), "--doc", "d1", "--doc", "d3", "--out", str(proof)]) == EXIT_OK
    assert main(["manifest", "verify", "--proof", str(proof), "--root", root]) == EXIT_OK
    assert main(["manifest", "verify", "--proof", str(proof), "--root", "00" * 32]) == EXIT_FAIL
    assert main(["manifest", "verify", "--proof", str(proof), "--root", "zz"]) == EXIT_CONFIG


def test_simulate_and_power(tmp_path, capsys):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n_draws": 5000, "seed": 1}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["baseline_check"]["within_3se"] is True
    assert (tmp_path / "r.csv").read_text().startswith("metric,value,se")
    cfg.write_text(json.dumps({"rho": 2}))
    assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["power", "--p0", "0.15", "--p0", "0.30"]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["n_per_arm"]) for r in rows] == [2395, 1015]
    assert [int(r["n_with_margin"]) for r in rows] == [2635, 1117]


def test_report(run_dir, tmp_path, capsys):
    assert main(["report", str(run_dir), "--out", str(tmp_path / "rep.json")]) == EXIT_OK
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["receipt_verification_pass_rate"] == 1.0
    assert rep["return_states"]["PROMOTE_FULL"] == 2
    assert rep["incident_intervals"][0]["ticket_id"] == "INC-001"
    with pytest.raises(CliError):
        build_report([])


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "evgate.cli", "power", "--p0", "0.1"], capture_output=True, text=True)
    assert res.returncode == 0 and "3775" in res.stdout
