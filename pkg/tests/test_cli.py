import csv
import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

from specdraft.checkpoint import load_target
from specdraft.cli.commands.bench import BENCH_CSV, BENCH_JSON, BENCH_REPORT, bench_prompts
from specdraft.cli.commands.train_target import TARGET_CHECKPOINT, TARGET_LOSS_CURVE
from specdraft.cli.main import app
from specdraft.config import parse_run_config
from specdraft.corpus import encode, load_corpus, select_prompts
from specdraft.log import read_jsonl

from .conftest import tiny_run_config

runner = CliRunner()


def invoke(*args: str):
    return runner.invoke(app, [str(a) for a in args])


@pytest.fixture
def dirs(tmp_path: Path):
    return tmp_path / "checkpoints", tmp_path / "output"


@pytest.fixture
def trained_target(run_config_file: Path, dirs):
    result = invoke("train-target", "--config", run_config_file)
    assert result.exit_code == 0, result.output
    return dirs[0] / TARGET_CHECKPOINT


def write_config(tmp_path: Path, raw: dict) -> Path:
    path = tmp_path / "edited.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_train_target_writes_a_frozen_checkpoint_and_loss_curve(trained_target, dirs):
    assert load_target(trained_target).frozen
    with open(dirs[1] / TARGET_LOSS_CURVE, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert [int(r["step"]) for r in rows] == [0, 1, 2]


def test_train_target_is_deterministic(trained_target, run_config_file):
    first = trained_target.read_bytes()
    assert invoke("train-target", "--config", run_config_file).exit_code == 0
    assert trained_target.read_bytes() == first


def test_steps_override(run_config_file, dirs):
    assert invoke("train-target", "--config", run_config_file, "--steps", 2).exit_code == 0
    assert len((dirs[1] / TARGET_LOSS_CURVE).read_text(encoding="utf-8").splitlines()) == 3


def test_train_head_without_adversarial_learning(trained_target, run_config_file, dirs):
    result = invoke("train-head", "--config", run_config_file, "--adversarial", "off")
    assert result.exit_code == 0, result.output
    assert (dirs[0] / "head_eagle_k1_al-off.ckpt").is_file()
    assert not (dirs[0] / "disc_head_eagle_k1_al-off.ckpt").exists()
    records = read_jsonl(dirs[1] / "head_eagle_k1_al-off_report.jsonl")
    assert records[-1]["summary"] is True
    assert records[-1]["lam"] == 0.0


def test_train_head_with_adversarial_learning(trained_target, run_config_file, dirs):
    result = invoke("train-head", "--config", run_config_file, "--kind", "medusa", "--k", 2)
    assert result.exit_code == 0, result.output
    assert (dirs[0] / "head_medusa_k2_al-on.ckpt").is_file()
    assert (dirs[0] / "disc_head_medusa_k2_al-on.ckpt").is_file()
    summary = read_jsonl(dirs[1] / "head_medusa_k2_al-on_report.jsonl")[-1]
    assert summary["stop_criterion"] in ("nash", "max_epochs", "divergence")


def test_k_outside_the_grid_needs_the_override(trained_target, run_config_file, dirs):
    assert invoke("train-head", "--config", run_config_file, "--k", 4).exit_code == 2
    result = invoke("train-head", "--config", run_config_file, "--allow-any-k", "--k", 4, "--adversarial", "off")
    assert result.exit_code == 0, result.output
    assert (dirs[0] / "head_eagle_k4_al-off.ckpt").is_file()


def test_train_head_needs_the_target(run_config_file):
    assert invoke("train-head", "--config", run_config_file).exit_code == 2


def test_bench_writes_its_tables(trained_target, run_config_file, dirs):
    assert invoke("train-head", "--config", run_config_file, "--adversarial", "off").exit_code == 0
    result = invoke("bench", "--config", run_config_file, "--grid")
    assert result.exit_code == 0, result.output
    with open(dirs[1] / BENCH_CSV, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["status"] for r in rows] == ["baseline", "ok", "best_k"]
    assert rows[0]["speedup"] == "1.0"
    summary = json.loads((dirs[1] / BENCH_JSON).read_text(encoding="utf-8"))
    assert len(summary["rows"]) == 2
    assert summary["config"]["seed"] == 7
    report = (dirs[1] / BENCH_REPORT).read_text(encoding="utf-8")
    assert "NOT replicate" in report
    assert "eagle" in report


def test_bench_single_cell_with_a_missing_neighbour(trained_target, run_config_file, dirs):
    assert invoke("train-head", "--config", run_config_file, "--adversarial", "off").exit_code == 0
    result = invoke("bench", "--config", run_config_file, "--cell", "eagle:1:off", "--cell", "medusa:1:on")
    assert result.exit_code == 0, result.output
    with open(dirs[1] / BENCH_CSV, encoding="utf-8", newline="") as f:
        statuses = [r["status"] for r in csv.DictReader(f)]
    assert statuses == ["baseline", "ok", "missing", "best_k"]


def test_bench_with_every_cell_missing(trained_target, run_config_file):
    assert invoke("bench", "--config", run_config_file).exit_code == 2


def test_bench_rejects_malformed_cells(run_config_file):
    assert invoke("bench", "--config", run_config_file, "--cell", "medusa:1").exit_code == 2
    assert invoke("bench", "--config", run_config_file, "--cell", "tree:1:off").exit_code == 2


def test_bench_prompt_precedence(corpus_dir, tmp_path):
    raw = tiny_run_config(corpus_dir, tmp_path)
    prompts_file = tmp_path / "prompts.json"
    prompts_file.write_text(json.dumps(["from the file"]), encoding="utf-8")
    raw["paths"]["prompts_file"] = str(prompts_file)
    assert bench_prompts(parse_run_config(raw)) == [encode("The river came down")]
    del raw["bench"]["prompts"]
    assert bench_prompts(parse_run_config(raw)) == [encode("from the file")]
    del raw["paths"]["prompts_file"]
    raw["bench"]["prompt_count"] = 4
    raw["bench"]["prompt_bytes"] = 10
    expected = select_prompts(load_corpus(corpus_dir).held_out, 4, 10)
    assert bench_prompts(parse_run_config(raw)) == [list(p) for p in expected]


def test_missing_corpus_is_a_usage_error(corpus_dir, tmp_path):
    raw = tiny_run_config(corpus_dir, tmp_path)
    raw["paths"]["corpus_dir"] = str(tmp_path / "nowhere")
    log_file = tmp_path / "run.log"
    result = invoke("train-target", "--config", write_config(tmp_path, raw), "--log-file", log_file)
    assert result.exit_code == 2
    assert "nowhere" in log_file.read_text(encoding="utf-8")


def test_unknown_config_key_is_a_usage_error(corpus_dir, tmp_path):
    raw = tiny_run_config(corpus_dir, tmp_path)
    raw["train"]["lamda"] = 0.3
    log_file = tmp_path / "run.log"
    result = invoke("train-head", "--config", write_config(tmp_path, raw), "--log-file", log_file)
    assert result.exit_code == 2
    assert "$.train.lamda" in log_file.read_text(encoding="utf-8")


def test_config_must_be_json(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1", encoding="utf-8")
    assert invoke("train-target", "--config", path).exit_code == 2
    assert invoke("train-target", "--config", tmp_path / "absent.json").exit_code == 2


def test_verify_oracles_single_suite(tmp_path):
    report = tmp_path / "oracles.jsonl"
    result = invoke("verify-oracles", "--suite", "loss_anchors", "--report", report)
    assert result.exit_code == 0, result.output
    assert "loss_anchors" in result.output and "PASS" in result.output
    assert read_jsonl(report)[0]["passed"] is True


def test_verify_oracles_unknown_suite():
    assert invoke("verify-oracles", "--suite", "bogus").exit_code == 2


def test_verify_oracles_passes_the_sample_count_through(monkeypatch):
    seen = {}

    def fake_run_oracles(names, seed, options):
        seen.update(options)
        return []

    monkeypatch.setattr("specdraft.cli.commands.verify_oracles.run_oracles", fake_run_oracles)
    assert invoke("verify-oracles", "--suite", "statistical_losslessness", "--samples", 2500).exit_code == 0
    assert seen == {"statistical_losslessness": {"samples": 2500}}


def test_verify_oracles_checks_trained_heads_for_greedy_equivalence(trained_target, run_config_file, tmp_path):
    for kind in ("medusa", "eagle"):
        for k in (1, 2, 3):
            trained = invoke("train-head", "--config", run_config_file, "--kind", kind, "--k", k, "--adversarial", "off")
            assert trained.exit_code == 0, trained.output
    report = tmp_path / "greedy.jsonl"
    result = invoke("verify-oracles", "--suite", "greedy_equivalence", "--config", run_config_file, "--report", report)
    assert result.exit_code == 0, result.output
    assert read_jsonl(report)[0]["cases"] == 2 * 3 * 1


def test_verify_oracles_fails_when_trained_heads_are_missing(trained_target, run_config_file):
    result = invoke("verify-oracles", "--suite", "greedy_equivalence", "--config", run_config_file)
    assert result.exit_code == 1
    assert "no head checkpoint" in result.output


def test_train_head_is_deterministic(trained_target, run_config_file, dirs):
    checkpoint = dirs[0] / "head_eagle_k1_al-on.ckpt"
    assert invoke("train-head", "--config", run_config_file).exit_code == 0
    first = checkpoint.read_bytes()
    assert invoke("train-head", "--config", run_config_file).exit_code == 0
    assert checkpoint.read_bytes() == first
