from pathlib import Path
from typing import List, Optional

import typer

from specdraft.bench.grid import GridCell, find_head_checkpoint, run_grid
from specdraft.bench.output import write_bench_csv, write_bench_json, write_bench_report
from specdraft.checkpoint import load_head, load_target
from specdraft.cli.commands.train_target import TARGET_CHECKPOINT
from specdraft.cli.timer import end_timer, start_timer
from specdraft.cli.validations import EXIT_USAGE, exit_on_error, validate_cells, validate_config_file
from specdraft.config import RunConfig, load_run_config
from specdraft.corpus import encode, load_corpus, load_prompt_file, select_prompts
from specdraft.errors import CheckpointError
from specdraft.log import configure_logging, get_logger
from specdraft.models.heads import DraftHead
from specdraft.models.target import TargetModel

logger = get_logger()

BENCH_CSV = "bench.csv"
BENCH_JSON = "bench.json"
BENCH_REPORT = "bench_report.md"


def head_loader(checkpoint_dir: Path, target: TargetModel):
    """Returns a loader that maps a grid cell to its head, or ``None`` when the checkpoint is absent or unreadable."""

    def load(cell: GridCell) -> Optional[DraftHead]:
        path = find_head_checkpoint(checkpoint_dir, cell)
        if path is None:
            return None
        try:
            return load_head(path, target)
        except CheckpointError as err:
            logger.error(f"{cell.label}: {err}")
            return None

    return load


def bench_prompts(cfg: RunConfig) -> List[List[int]]:
    """
    Prompts in order of precedence: ``bench.prompts``, then ``paths.prompts_file``, then
    ``bench.prompt_count`` excerpts of the held-out corpus.
    """
    if cfg.bench.prompts:
        return [encode(p) for p in cfg.bench.prompts]
    if cfg.paths.prompts_file is not None:
        return [list(p) for p in load_prompt_file(cfg.paths.prompts_file)]
    held_out = load_corpus(cfg.paths.corpus_dir).held_out
    return [list(p) for p in select_prompts(held_out, cfg.bench.prompt_count, cfg.bench.prompt_bytes)]


def bench(
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
    grid: bool = typer.Option(False, "--grid", help="Benchmark every cell of the configured grid (the default)."),
    cells: Optional[List[str]] = typer.Option(
        None,
        "--cell",
        callback=validate_cells,
        help="Benchmark one cell, written KIND:K:AL, e.g. medusa:1:off. Can pass multiple times.",
    ),
    temperature: Optional[List[float]] = typer.Option(
        None, "--temperature", "-t", min=0.0, help="Override bench.temperatures. Can pass multiple times."
    ),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Processes for the untimed metric runs."),
    verbose: bool = False,
    log_file: Optional[Path] = typer.Option(
        default=None,
    ),
) -> None:
    """
    Times speculative decoding against vanilla decoding for trained heads and writes the CSV table and
    JSON summary (best-K rows and trend checks included). Missing cells are marked, not fatal.
    """
    configure_logging(verbose, log_file)
    if grid and cells:
        raise typer.BadParameter("--grid and --cell are mutually exclusive")
    start_time = start_timer()
    with exit_on_error():
        cfg = load_run_config(config_file)
        cfg.paths.make_dirs()
        updates = {}
        if temperature:
            updates["temperatures"] = temperature
        if workers is not None:
            updates["workers"] = workers
        bench_cfg = cfg.bench.model_copy(update=updates)
        target = load_target(cfg.paths.checkpoint_dir / TARGET_CHECKPOINT)
        prompts = bench_prompts(cfg)
        result = run_grid(
            bench_cfg,
            target,
            head_loader(cfg.paths.checkpoint_dir, target),
            prompts,
            bench_cfg.seed if bench_cfg.seed is not None else cfg.seed,
            cells or None,
            error_dir=cfg.paths.output_dir,
        )
        write_bench_csv(result.rows + result.best_k, cfg.paths.output_dir / BENCH_CSV)
        write_bench_json(result, cfg.model_dump(mode="json"), cfg.paths.output_dir / BENCH_JSON)
        write_bench_report(result, cfg.paths.output_dir / BENCH_REPORT)
        if result.all_missing:
            logger.error("Every requested cell is missing a head checkpoint")
            raise typer.Exit(code=EXIT_USAGE)
    end_timer(start_time)
