import csv
import io
import json
import subprocess
import sys

import pytest

from cloudq.cli import main, write_records

SMALL = """\
name = small
regime = des
lambda = 3
theta = 0.5
C = 0.3
truncation = 10
node.m = 1
node.mu = 2
node.m = 2
node.mu = 0.8
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def _csv_rows(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze(capsys, small):
    code, out, _ = _run(capsys, "analyze", "--instance", small)
    assert code == 0
    assert out.startswith("# cloudq-csv v1 analyze")
    rows = _csv_rows(out)
    assert len(rows) == 2 and float(rows[0]["loss_rate"]) > 0


def test_split_jsonl(capsys):
    code, out, _ = _run(capsys, "split", "--base", "1", "--format", "jsonl")
    assert code == 0
    recs = [json.loads(line) for line in out.splitlines()]
    assert recs and all(isinstance(r, dict) for r in recs)


def test_indices(capsys, small):
    code, out, _ = _run(capsys, "indices", "--instance", small, "--family", "rb", "--states", "5")
    assert code == 0
    rows = _csv_rows(out)
    assert rows and {"state", "node"} <= set(rows[0])


@pytest.mark.parametrize("method", ["rvi", "policy_iteration"])
def test_solve(capsys, small, method):
    code, out, _ = _run(capsys, "solve", "--instance", small, "--method", method)
    assert code == 0
    rows = _csv_rows(out)
    assert 0 < float(rows[0]["profit"]) < 1


def test_evaluate_with_gaps(capsys, small, tmp_path):
    dest = tmp_path / "eval.jsonl"
    code, _, _ = _run(capsys, "evaluate", "--instance", small, "--policy", "bs,pi", "--format", "jsonl", "--out", str(dest))
    assert code == 0
    recs = [json.loads(line) for line in dest.read_text().splitlines()]
    assert [r["policy"] for r in recs] == ["bs", "pi"]
    assert all(r["gap"] >= -1e-6 for r in recs)


def test_simulate(capsys, small):
    code, out, _ = _run(capsys, "simulate", "--instance", small, "--policy", "rb", "--jobs", "2000", "--replications", "3")
    assert code == 0
    row = _csv_rows(out)[0]
    assert float(row["cost_halfwidth"]) > 0


def test_bench_limit(capsys, tmp_path):
    summary = tmp_path / "summary.csv"
    code, out, _ = _run(capsys, "bench", "--limit", "2", "--truncation", "40", "--summary-out", str(summary))
    assert code == 0
    assert len(_csv_rows(out)) == 2
    assert "pi_improvement" in summary.read_text()


def test_sweep_with_checks(capsys):
    code, out, _ = _run(capsys, "sweep", "--base", "1", "--param", "lambda", "--grid", "20:100:20")
    assert code == 0
    assert len(_csv_rows(out)) == 5
    assert "# check lambda_0 nondecreasing: ok" in out


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["split"],
        ["split", "--base", "7"],
        ["split", "--instance", "/no/such/file.cfg"],
        ["sweep", "--base", "1", "--param", "lambda", "--grid", "1:x:2"],
        ["evaluate", "--base", "1", "--policy", "best"],
        ["split", "--base", "1", "--format", "xml"],
        ["bench", "--limit", "1", "--truncation", "20"],
    ],
)
def test_usage_errors_exit_one(capsys, argv):
    code, _, err = _run(capsys, *argv)
    assert code == 1
    assert err


def test_malformed_file_reports_line(capsys, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("regime = dbs\nlambda = 5\ntheta == 2\n")
    code, _, err = _run(capsys, "split", "--instance", str(path))
    assert code == 1
    assert "line 3" in err


def test_numerical_failure_exit_two(capsys, small):
    code, _, err = _run(capsys, "solve", "--instance", small, "--max-iter", "2")
    assert code == 2
    assert "NoConvergence" in err


def test_write_records_csv_round_trip():
    buf = io.StringIO()
    write_records([{"a": 1, "b": float("nan")}, {"a": 2, "c": "x"}], "csv", buf, "demo", {"ok-check": True})
    text = buf.getvalue()
    assert text.splitlines()[0] == "# cloudq-csv v1 demo"
    rows = _csv_rows(text)
    assert rows[1]["c"] == "x" and rows[0]["b"] == ""


def test_module_entry_point(small):
    out = subprocess.run([sys.executable, "-m", "cloudq", "split", "--instance", small, "--format", "jsonl"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout.splitlines()[0])
