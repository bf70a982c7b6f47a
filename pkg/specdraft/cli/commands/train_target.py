from pathlib import Path
from typing import Optional

import typer

from specdraft.autodiff.optim import make_optimizer
from specdraft.bench.output import write_loss_curve_csv
from specdraft.checkpoint import save_target
from specdraft.cli.timer import end_timer, start_timer
from specdraft.cli.validations import exit_on_error, validate_config_file
from specdraft.config import load_run_config
from specdraft.corpus import load_corpus
from specdraft.log import configure_logging
from specdraft.models import target as target_model
from specdraft.util import component_rng

TARGET_CHECKPOINT = "target.ckpt"
TARGET_LOSS_CURVE = "target_loss.csv"


def train_target(
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
    steps: Optional[int] = typer.Option(None, "--steps", min=1, help="Override target_train.steps from the config."),
    verbose: bool = False,
    log_file: Optional[Path] = typer.Option(
        default=None,
    ),
) -> None:
    """
    Trains the byte-level target model on the corpus, freezes it and writes its checkpoint and loss curve.
    """
    logger = configure_logging(verbose, log_file)
    start_time = start_timer()
    with exit_on_error():
        cfg = load_run_config(config_file)
        cfg.paths.make_dirs()
        corpus = load_corpus(cfg.paths.corpus_dir)
        recipe = cfg.target_train
        model = target_model.TargetModel(cfg.target, component_rng(cfg.seed, "target-init"))
        optimizer = make_optimizer(recipe.optimizer, model.trainable_parameters(), recipe.lr, recipe.clip_norm)
        logger.info(f"Training a {cfg.target.n_layers}-layer target for {steps or recipe.steps} steps")
        losses = target_model.train_target(
            model,
            corpus.train,
            steps or recipe.steps,
            recipe.batch_size,
            recipe.seq_len,
            optimizer,
            component_rng(cfg.seed, "target-batches"),
        )
        checkpoint = cfg.paths.checkpoint_dir / TARGET_CHECKPOINT
        save_target(checkpoint, model, extra={"seed": cfg.seed, "steps": len(losses)})
        write_loss_curve_csv(losses, cfg.paths.output_dir / TARGET_LOSS_CURVE)
        if losses:
            logger.info(f"Final training loss {losses[-1]:.4f}; target written to {checkpoint}")
    end_timer(start_time)
