from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError

from specdraft.bench.grid import GridCell, head_checkpoint_name
from specdraft.checkpoint import load_target, save_discriminator, save_head
from specdraft.cli.commands.train_target import TARGET_CHECKPOINT
from specdraft.cli.timer import end_timer, start_timer
from specdraft.cli.validations import EXIT_FAILURE, Switch, exit_on_error, validate_config_file, validate_k
from specdraft.config import load_run_config
from specdraft.corpus import load_corpus
from specdraft.errors import ConfigError
from specdraft.log import configure_logging
from specdraft.models.heads import HeadConfig, HeadKind, build_head
from specdraft.training.adversarial import StopCriterion, build_discriminator, train_until_equilibrium
from specdraft.util import component_rng


def report_file_name(cell: GridCell) -> str:
    return head_checkpoint_name(cell).replace(".ckpt", "_report.jsonl")


def train_head(
    config_file: Path = typer.Option(
        ...,
        "--config",
        "-c",
        exists=True,
        file_okay=True,
        dir_okay=False,
        readable=True,
        resolve_path=True,
        callback=validate_config_file,
        help="Path to the run config JSON.",
    ),
    kind: Optional[HeadKind] = typer.Option(None, "--kind", help="Draft head architecture; defaults to head.kind."),
    allow_any_k: bool = typer.Option(
        False, "--allow-any-k", is_eager=True, help="Allow K outside the shipped grid of 1, 2 and 3."
    ),
    k: Optional[int] = typer.Option(None, "--k", callback=validate_k, help="Layers per draft head; defaults to head.k."),
    adversarial: Switch = typer.Option(
        Switch.on, "--adversarial", help="'off' trains by pure distillation with no discriminator."
    ),
    verbose: bool = False,
    log_file: Optional[Path] = typer.Option(
        default=None,
    ),
) -> None:
    """
    Trains one draft head against the frozen target checkpoint and writes the head (and discriminator)
    checkpoints plus a JSON-lines training report.
    """
    logger = configure_logging(verbose, log_file)
    start_time = start_timer()
    with exit_on_error():
        cfg = load_run_config(config_file)
        cfg.paths.make_dirs()
        overrides = {"allow_any_k": allow_any_k or cfg.head.allow_any_k}
        if kind is not None:
            overrides["kind"] = kind
        if k is not None:
            overrides["k"] = k
        try:
            head_cfg = HeadConfig(**{**cfg.head.model_dump(), **overrides})
        except ValidationError as err:
            raise ConfigError(err.errors()[0]["msg"], "$.head") from None
        train_cfg = cfg.train.model_copy(update={"adversarial": adversarial == Switch.on})
        cell = GridCell(head_cfg.kind, head_cfg.k, train_cfg.adversarial)

        target = load_target(cfg.paths.checkpoint_dir / TARGET_CHECKPOINT)
        corpus = load_corpus(cfg.paths.corpus_dir)
        head = build_head(head_cfg, target, component_rng(cfg.seed, "head-init"))
        disc = build_discriminator(head, train_cfg)
        logger.info(f"Training {cell.label} ({head.param_count()} trainable parameters)")
        report = train_until_equilibrium(
            head,
            disc,
            target,
            corpus.train,
            train_cfg,
            held_out_corpus=corpus.held_out,
            report_file=cfg.paths.output_dir / report_file_name(cell),
        )
        if report.summary.stop_criterion == StopCriterion.nonfinite:
            logger.error(f"{cell.label}: training hit a non-finite loss, no checkpoint written")
            raise typer.Exit(code=EXIT_FAILURE)
        extra = {"stop_criterion": report.summary.stop_criterion.value, "epochs": report.summary.epochs, "seed": cfg.seed}
        save_head(cfg.paths.checkpoint_dir / head_checkpoint_name(cell), head, extra)
        if disc is not None:
            save_discriminator(cfg.paths.checkpoint_dir / f"disc_{head_checkpoint_name(cell)}", disc, extra)
    end_timer(start_time)
