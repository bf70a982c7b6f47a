import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import typer

from specdraft.bench.grid import GridCell
from specdraft.checkpoint import load_target
from specdraft.cli.commands.bench import bench_prompts, head_loader
from specdraft.cli.commands.train_target import TARGET_CHECKPOINT
from specdraft.cli.timer import end_timer, start_timer
from specdraft.cli.validations import EXIT_FAILURE, exit_on_error, validate_config_file, validate_file_parent
from specdraft.config import RunConfig, load_run_config
from specdraft.log import configure_logging, get_logger, write_jsonl
from specdraft.models.heads import DraftHead, HeadKind
from specdraft.oracles import SUITES, run_oracles

logger = get_logger()


def validate_suites(values: Optional[List[str]]) -> Optional[List[str]]:
    unknown = [v for v in values or [] if v not in SUITES]
    if unknown:
        raise typer.BadParameter(f"Unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    return values


def trained_greedy_options(cfg: RunConfig) -> Dict[str, Any]:
    """
    Greedy-equivalence arguments for the trained target, the committed prompts and the trained heads.
    Each (kind, K) uses its AL=off head, or its AL=on head when only that one exists.
    """
    target = load_target(cfg.paths.checkpoint_dir / TARGET_CHECKPOINT)
    load_cell = head_loader(cfg.paths.checkpoint_dir, target)

    def load_head(kind: HeadKind, k: int) -> Optional[DraftHead]:
        head = load_cell(GridCell(kind, k, False)) or load_cell(GridCell(kind, k, True))
        if head is None:
            logger.error(f"No trained {kind.value} K={k} head in {cfg.paths.checkpoint_dir}")
        return head

    prompts = bench_prompts(cfg)
    logger.info(f"Checking greedy equivalence of trained heads on {len(prompts)} prompts")
    return {"target": target, "load_head": load_head, "prompt_list": prompts, "max_new": cfg.bench.max_new}


def verify_oracles(
    suite: Optional[List[str]] = typer.Option(
        None, "--suite", "-s", callback=validate_suites, help="Run only this suite. Can pass multiple times."
    ),
    seed: int = typer.Option(0, "--seed", help="Root seed for the suites' fixtures."),
    samples: Optional[int] = typer.Option(
        None, "--samples", min=1, help="Samples per seed for statistical_losslessness (default 100000)."
    ),
    config_file: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        exists=True,
        file_okay=True,
        dir_okay=False,
        readable=True,
        resolve_path=True,
        callback=validate_config_file,
        help="Run config whose trained target, heads and prompts greedy_equivalence checks instead of tiny fixtures.",
    ),
    report: Optional[Path] = typer.Option(
        None,
        "--report",
        resolve_path=True,
        callback=validate_file_parent,
        help="Optional JSON-lines file with one result per suite.",
    ),
    verbose: bool = False,
    log_file: Optional[Path] = typer.Option(
        default=None,
    ),
) -> None:
    """
    Runs the correctness suites (losslessness enumeration, gradient checks, greedy equivalence, loss
    anchors, accounting, chi-square). Without --config every suite uses tiny self-built fixtures.
    Exits 1 on the first failing suite's counterexample.
    """
    configure_logging(verbose, log_file)
    start_time = start_timer()
    options: Dict[str, Dict[str, Any]] = {}
    if samples is not None:
        options["statistical_losslessness"] = {"samples": samples}
    with exit_on_error():
        if config_file is not None and (not suite or "greedy_equivalence" in suite):
            options["greedy_equivalence"] = trained_greedy_options(load_run_config(config_file))
        results = run_oracles(suite, seed=seed, options=options)
    for result in results:
        typer.echo(f"{result.name:<26} {'PASS' if result.passed else 'FAIL'} {result.cases:>5} case(s) {result.seconds:8.2f}s")
    if report is not None:
        write_jsonl((result._asdict() for result in results), report)
    failed = [result for result in results if not result.passed]
    end_timer(start_time)
    if failed:
        typer.echo(json.dumps({"suite": failed[0].name, "counterexample": failed[0].counterexample}, indent=2))
        raise typer.Exit(code=EXIT_FAILURE)
