import json
import math
import subprocess
import sys

import pytest

from glmmr2.cli import main
from glmmr2.inference import chisq_sf


def run(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse usage errors
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def table(tmp_path):
    def write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return write


@pytest.fixture(scope="module")
def example_report(tmp_path_factory):
    path = tmp_path_factory.mktemp("fit") / "report.json"
    code = main(["fit", "--example", "--out", str(path)])
    return code, json.loads(path.read_text())


ROWS = "id,y,x\n" + "".join(f"s{i // 3},{(i * 7) % 3 % 2},{(i % 5) / 2 - 1}\n" for i in range(60))


class TestFit:
    def test_example_runs(self, example_report):
        code, report = example_report
        assert code == 0
        assert report["models"]["full"]["converged"] and report["models"]["null"]["converged"]
        assert report["nonfinite_fields"] == []

    def test_report_is_self_consistent(self, example_report):
        _, report = example_report
        full, null = report["models"]["full"]["loglik"], report["models"]["null"]["loglik"]
        stat = max(0.0, -2.0 * (null - full))
        assert report["lrt"]["statistic"] == pytest.approx(stat, abs=1e-10)
        assert report["lrt"]["p_value"] == pytest.approx(chisq_sf(stat, report["lrt"]["df"]), abs=1e-10)
        n, N = report["input"]["rows"], report["input"]["units"]
        r2 = report["r2"]
        assert r2["observations"]["denominator"] == n and r2["units"]["denominator"] == N
        assert r2["observations"]["value"] == pytest.approx(1 - math.exp(-stat / n), abs=1e-12)
        assert r2["units"]["value"] == pytest.approx(1 - math.exp(-stat / N), abs=1e-12)
        assert r2["headline"] == "observations"

    def test_report_contents(self, example_report):
        _, report = example_report
        assert report["tool"]["name"] == "glmmr2"
        assert len(report["input"]["sha256"]) == 64
        assert report["lrt"]["df"] == 4
        assert report["models"]["null"]["fixed_effects"] == ["(Intercept)"]
        assert report["models"]["null"]["random_effects"] == report["models"]["full"]["random_effects"]
        assert report["quadrature"]["nodes_per_dim"] == 15
        assert report["options"]["freeze_null_variance"] is False

    def test_json_to_stdout(self, table, capsys):
        code, out, err = run(["fit", "--data", table(ROWS), "--subject", "id", "--outcome", "y",
                              "--fixed", "x", "--out", "-"], capsys)
        assert code in (0, 2)
        report = json.loads(out)
        assert report["input"]["rows"] == 60 and report["input"]["units"] == 20
        assert "LRT" in err

    def test_poisson_accepts_binary(self, table, capsys):
        code, out, _ = run(["fit", "--data", table(ROWS), "--subject", "id", "--outcome", "y",
                            "--fixed", "x", "--family", "poisson"], capsys)
        assert code in (0, 2)
        assert "poisson/log" in out

    def test_bernoulli_rejects_count(self, table, capsys):
        bad = ROWS + "s99,2,0.5\n"
        code, _, err = run(["fit", "--data", table(bad), "--subject", "id", "--outcome", "y",
                            "--fixed", "x"], capsys)
        assert code == 65
        assert "data error" in err

    def test_freeze_flag_recorded(self, table, capsys, tmp_path):
        out_path = tmp_path / "r.json"
        run(["fit", "--data", table(ROWS), "--subject", "id", "--outcome", "y", "--fixed", "x",
             "--freeze-null-variance", "--out", str(out_path)], capsys)
        report = json.loads(out_path.read_text())
        assert report["options"]["freeze_null_variance"] is True
        assert report["models"]["null"]["variance_fixed"] is True
        assert report["models"]["null"]["sigma"] == report["models"]["full"]["sigma"]

    def test_missing_column(self, table, capsys):
        code, _, err = run(["fit", "--data", table(ROWS), "--subject", "id", "--outcome", "y",
                            "--fixed", "nope"], capsys)
        assert code == 65 and "nope" in err

    def test_missing_file(self, tmp_path, capsys):
        code, *_ = run(["fit", "--data", str(tmp_path / "none.csv"), "--subject", "id", "--outcome", "y"], capsys)
        assert code == 65

    @pytest.mark.parametrize(
        "argv",
        [
            ["fit", "--family", "gamma", "--example"],
            ["fit", "--data", "x.csv"],
            ["fit", "--example", "--family", "bernoulli", "--link", "log"],
            ["fit", "--example", "--quad-nodes", "many"],
            ["frobnicate"],
            [],
        ],
    )
    def test_usage_errors(self, argv, capsys):
        code, *_ = run(argv, capsys)
        assert code == 64


class TestCheckOracle:
    def test_default_passes(self, capsys):
        code, out, _ = run(["check-oracle"], capsys)
        assert code == 0
        assert "PASS" in out

    def test_laplace_is_informative(self, capsys):
        code, out, _ = run(["check-oracle", "--quad-nodes", "1", "--sigma", "2"], capsys)
        assert code == 1
        worst = float(out.split("max_abs_discrepancy=")[1].split()[0])
        assert worst > 1e-6

    def test_degenerate_variance(self, capsys):
        code, out, _ = run(["check-oracle", "--sigma", "1e-8", "--tolerance", "1e-8"], capsys)
        assert code == 0
        assert float(out.split("max_abs_discrepancy=")[1].split()[0]) < 1e-8

    def test_random_slope_rejected(self, capsys):
        code, *_ = run(["check-oracle", "--random-slope", "x1"], capsys)
        assert code == 64

    def test_per_subject_table(self, tmp_path, capsys):
        path = tmp_path / "oracle.csv"
        run(["check-oracle", "--units", "4", "--out", str(path)], capsys)
        lines = path.read_text().splitlines()
        assert lines[0] == "subject,agq,oracle,abs_diff" and len(lines) == 5


class TestSimulate:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            assert run(["simulate", "--seed", "42", "--out", str(p)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 1 + 100 * 4

    def test_stdout(self, capsys):
        code, out, _ = run(["simulate", "--units", "3", "--per-unit", "2"], capsys)
        assert code == 0
        assert out.splitlines()[0] == "subject,y,x1,weight"
        assert len(out.splitlines()) == 7

    @pytest.mark.parametrize(
        "argv",
        [
            ["simulate", "--beta", "0.1"],
            ["simulate", "--sigma", "-1"],
            ["simulate", "--units", "0"],
            ["simulate", "--beta", "a,b"],
            ["simulate", "--random-slope", "z"],
        ],
    )
    def test_invalid_config(self, argv, capsys):
        assert run(argv, capsys)[0] == 64

    @pytest.mark.slow
    def test_experiment_table(self, tmp_path, capsys):
        path = tmp_path / "exp.csv"
        code, *_ = run(["simulate", "--experiment", "added-predictor", "--replicates", "100",
                        "--seed", "3", "--out", str(path)], capsys)
        assert code == 0
        lines = path.read_text().splitlines()
        body = [l for l in lines[1:] if not l.startswith("#")]
        assert len(body) == 100
        summary = dict(l[2:].split(": ", 1) for l in lines if l.startswith("# ") and ": " in l)
        assert 0.0 <= float(summary["decrease_frequency"]) <= 1.0
        assert summary["replicates"] == "100"
        assert "PCG64" in summary["generator"]


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "glmmr2.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "glmmr2" in out.stdout
