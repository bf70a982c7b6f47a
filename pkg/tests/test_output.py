import csv
import json
import math

import pytest

from specdraft.bench.grid import BenchResult, BenchRow, Trend
from specdraft.bench.output import CSV_COLUMNS, bench_report, write_bench_csv, write_bench_json, write_bench_report, write_loss_curve_csv


def sample_result() -> BenchResult:
    rows = [
        BenchRow(kind="vanilla", temperature=0.0, ell=1.0, speedup=1.0, status="baseline"),
        BenchRow(kind="medusa", K=1, AL=True, temperature=0.0, ell=1.75, alpha_1=0.5, speedup=1.2, head_params=1024),
        BenchRow(kind="medusa", K=2, AL=False, temperature=0.0, status="missing"),
    ]
    trend = Trend(
        name="adversarial_ell",
        kind="medusa",
        temperature=0.0,
        values={"better": 1.75, "baseline": None},
        margin=None,
        noise=None,
        replicated=False,
        message="not measured: a required cell is missing",
    )
    return BenchResult(rows, [rows[1].model_copy(update={"status": "best_k"})], [trend], {})


def test_bench_csv_columns_and_values(tmp_path):
    path = tmp_path / "bench.csv"
    write_bench_csv(sample_result().rows, path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames == CSV_COLUMNS
        vanilla, medusa, missing = list(reader)
    assert vanilla["K"] == "" and vanilla["AL"] == "" and vanilla["status"] == "baseline"
    assert medusa["AL"] == "on"
    assert float(medusa["ell"]) == 1.75
    assert medusa["alpha_2"] == ""
    assert medusa["head_params"] == "1024"
    assert missing["AL"] == "off" and missing["speedup"] == ""


def test_bench_json_summary(tmp_path):
    path = tmp_path / "bench.json"
    write_bench_json(sample_result(), {"seed": 1}, path)
    summary = json.loads(path.read_text(encoding="utf-8"))
    assert set(summary) == {"rows", "best_k", "trends", "config"}
    assert len(summary["rows"]) == 3
    assert summary["best_k"][0]["status"] == "best_k"
    assert summary["trends"][0]["values"]["baseline"] is None
    assert summary["config"] == {"seed": 1}


def test_bench_json_refuses_non_finite_numbers(tmp_path):
    with pytest.raises(ValueError):
        write_bench_json(sample_result(), {"lr": math.nan}, tmp_path / "bench.json")


def test_loss_curve(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_curve_csv([5.5451774, 5.1, 4.75], path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["step,loss", "0,5.545177", "1,5.100000", "2,4.750000"]


def test_bench_report_says_when_a_trend_did_not_replicate(tmp_path):
    path = tmp_path / "bench_report.md"
    write_bench_report(sample_result(), path)
    report = path.read_text(encoding="utf-8")
    assert "1 of 1 trend checks did NOT replicate" in report
    assert "### Adversarial learning raises ell (K=1, AL on over off)" in report
    assert "- medusa, T=0: not measured: a required cell is missing" in report
    assert "| medusa | 1 | on | 0 | 1.7500 |" in report


def test_bench_report_of_replicated_trends():
    result = sample_result()
    trend = result.trends[0].model_copy(
        update={"margin": 0.3, "noise": 0.05, "replicated": True, "message": "replicated: ell gap 0.3000"}
    )
    report = bench_report(result._replace(trends=[trend], seed_ell={("medusa", 1, True, 0.0): [1.7, 1.8, 1.75]}))
    assert "All 1 trend checks replicated." in report
    assert "pool 3 seed repetition(s)" in report
    assert "NOT" not in report
