import json
from pathlib import Path

import numpy as np
import pytest

from specdraft.config import PATH_ENV_OVERRIDES
from specdraft.decoding.verify import verify_stochastic
from specdraft.models.heads import HeadKind
from specdraft.models.target import TargetModel
from specdraft.oracles import tiny_head, tiny_target

FIXTURES = Path(__file__).parent / "fixtures"
REPO_ROOT = Path(__file__).parent.parent

CORPUS_TEXT = (
    "The river came down out of the hills in the early spring, brown and loud. "
    "The miller stood on the footbridge and said what the water would do by noon. "
    "A guess is a promise you make to yourself about the future. "
)


def bonus_from_the_first_position(q_dists, d_dists, drafts, draws, accept_rule, residual_rule):
    """A broken verifier: after full acceptance the bonus is drawn from the first target distribution."""
    outcome = verify_stochastic(q_dists, d_dists, drafts, draws, accept_rule, residual_rule)
    if not outcome.bonus:
        return outcome
    wrong_bonus = draws.categorical(np.asarray(q_dists[0], dtype=np.float64))
    return outcome._replace(emitted_tokens=outcome.emitted_tokens[:-1] + [wrong_bonus])


@pytest.fixture(autouse=True)
def no_path_overrides(monkeypatch):
    for env_var in PATH_ENV_OVERRIDES.values():
        monkeypatch.delenv(env_var, raising=False)


@pytest.fixture(scope="session")
def target() -> TargetModel:
    return tiny_target(seed=0)


@pytest.fixture
def eagle_head(target):
    return tiny_head(target, HeadKind.eagle, 1, draft_len=3)


@pytest.fixture
def medusa_head(target):
    return tiny_head(target, HeadKind.medusa, 1, draft_len=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def corpus_dir(tmp_path: Path) -> Path:
    folder = tmp_path / "corpus"
    folder.mkdir()
    (folder / "a.txt").write_text(CORPUS_TEXT * 8, encoding="utf-8")
    (folder / "b.txt").write_text(CORPUS_TEXT[::-1] * 4, encoding="utf-8")
    return folder


def tiny_run_config(corpus_dir: Path, tmp_path: Path) -> dict:
    """A run config small enough for every command to finish in seconds."""
    return {
        "seed": 7,
        "target": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 48, "ff_mult": 2},
        "target_train": {"steps": 3, "batch_size": 2, "seq_len": 16},
        "head": {"kind": "eagle", "k": 1, "d_model": 16, "n_heads": 2, "ff_mult": 2, "draft_len": 2},
        "train": {
            "lambda": 0.1,
            "max_epochs": 1,
            "batches_per_epoch": 1,
            "batch_size": 2,
            "seq_len": 16,
            "starts_per_window": 2,
        },
        "bench": {
            "prompts": ["The river came down"],
            "max_new": 6,
            "repetitions": 1,
            "warmup": False,
            "temperatures": [0.0],
            "kinds": ["eagle"],
            "ks": [1],
            "adversarial": [False],
        },
        "paths": {
            "corpus_dir": str(corpus_dir),
            "checkpoint_dir": str(tmp_path / "checkpoints"),
            "output_dir": str(tmp_path / "output"),
        },
    }


@pytest.fixture
def run_config_file(corpus_dir: Path, tmp_path: Path) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_run_config(corpus_dir, tmp_path)), encoding="utf-8")
    return path
