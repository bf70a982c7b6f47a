"""
Run configuration: one JSON document with ``target``, ``target_train``, ``head``, ``train``, ``bench``
and ``paths`` sections plus a root ``seed``. Parsing is strict; unknown keys fail with their JSON path.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from specdraft.autodiff.optim import OptimizerKind
from specdraft.bench.grid import BenchConfig
from specdraft.errors import ConfigError, FatalError
from specdraft.log import get_logger
from specdraft.models.heads import HeadConfig
from specdraft.models.target import TargetConfig
from specdraft.training.adversarial import TrainConfig

logger = get_logger()

PATH_ENV_OVERRIDES = {
    "corpus_dir": "SPECDRAFT_CORPUS_DIR",
    "checkpoint_dir": "SPECDRAFT_CHECKPOINT_DIR",
    "output_dir": "SPECDRAFT_OUTPUT_DIR",
}


class TargetTrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: PositiveInt = 2000
    batch_size: PositiveInt = 16
    seq_len: PositiveInt = 128
    lr: PositiveFloat = 1e-3
    optimizer: OptimizerKind = OptimizerKind.adam
    clip_norm: Optional[PositiveFloat] = 1.0


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus_dir: Path
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("output")
    prompts_file: Optional[Path] = None

    @model_validator(mode="after")
    def _check_paths(self) -> "PathsConfig":
        if not self.corpus_dir.is_dir():
            raise ValueError(f"corpus directory '{self.corpus_dir}' does not exist")
        if self.prompts_file is not None and not self.prompts_file.is_file():
            raise ValueError(f"prompts file '{self.prompts_file}' does not exist")
        for name in ("checkpoint_dir", "output_dir"):
            parent = getattr(self, name).resolve().parent
            if not parent.is_dir():
                raise ValueError(f"{name} '{getattr(self, name)}' must sit in an existing folder")
        return self

    def make_dirs(self) -> None:
        for folder in (self.checkpoint_dir, self.output_dir):
            try:
                folder.mkdir(parents=True, exist_ok=True)
            except OSError as err:
                raise FatalError(f"cannot create folder '{folder}': {err}") from None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target: TargetConfig = Field(default_factory=TargetConfig)
    target_train: TargetTrainConfig = Field(default_factory=TargetTrainConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    paths: PathsConfig
    seed: int = 0

    @model_validator(mode="after")
    def _align_sections(self) -> "RunConfig":
        if self.head.d_model != self.target.d_model:
            raise ValueError(f"head.d_model ({self.head.d_model}) must equal target.d_model ({self.target.d_model})")
        if self.head.vocab_size != self.target.vocab_size:
            raise ValueError("head.vocab_size must equal target.vocab_size")
        # Sections without an explicit seed follow the root seed.
        if "seed" not in self.train.model_fields_set:
            self.train = self.train.model_copy(update={"seed": self.seed})
        if self.bench.seed is None:
            self.bench = self.bench.model_copy(update={"seed": self.seed})
        return self


def _json_path(loc: tuple) -> str:
    path = "$"
    for part in loc:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def parse_run_config(raw: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    """
    Validates a raw config document. Path environment overrides are applied first; relative paths
    resolve against ``base_dir``.
    """
    raw = json.loads(json.dumps(raw))
    paths = raw.setdefault("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("must be an object", "$.paths")
    for key, env_var in PATH_ENV_OVERRIDES.items():
        if value := os.environ.get(env_var):
            logger.debug(f"{env_var} overrides paths.{key}")
            paths[key] = value
    if base_dir is not None:
        for key, value in paths.items():
            if isinstance(value, str) and not Path(value).is_absolute():
                paths[key] = str(base_dir / value)
    try:
        return RunConfig(**raw)
    except ValidationError as err:
        first = err.errors()[0]
        raise ConfigError(first["msg"], _json_path(first["loc"])) from None
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Relative paths inside the file resolve against the working directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file '{path}' does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in '{path}': {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"'{path}' must contain a JSON object")
    config = parse_run_config(raw)
    logger.debug(f"Loaded run config from {path}")
    return config
