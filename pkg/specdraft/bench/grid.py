"""
The ablation grid: head kind x K x adversarial learning on/off, at each configured temperature,
against a shared vanilla baseline.
"""
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveInt
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from specdraft.bench.metrics import RunTiming, avg_acceptance_length, summarize
from specdraft.decoding.engine import DecodeTrace, spec_decode, vanilla_decode_bench
from specdraft.errors import ContractViolation, SpecDraftError
from specdraft.log import get_logger
from specdraft.models.heads import DraftHead, HeadKind
from specdraft.models.target import TargetModel
from specdraft.parallel import reraise_with_stack, run_in_parallel, write_errors_csv
from specdraft.util import component_rng, derive_seed

logger = get_logger()

MAX_ALPHA = 3


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prompts: Optional[List[str]] = None
    prompt_count: PositiveInt = 20
    prompt_bytes: PositiveInt = 64
    max_new: PositiveInt = 64
    temperatures: List[NonNegativeFloat] = Field(default_factory=lambda: [0.0, 1.0])
    repetitions: PositiveInt = 3
    seeds: PositiveInt = 3
    warmup: bool = True
    kinds: List[HeadKind] = Field(default_factory=lambda: [HeadKind.medusa, HeadKind.eagle])
    ks: List[PositiveInt] = Field(default_factory=lambda: [1, 2, 3])
    adversarial: List[bool] = Field(default_factory=lambda: [False, True])
    workers: PositiveInt = 1
    seed: Optional[int] = None


class GridCell(NamedTuple):
    kind: HeadKind
    k: int
    adversarial: bool

    @property
    def label(self) -> str:
        return f"{self.kind.value} K={self.k} AL={'on' if self.adversarial else 'off'}"


def grid_cells(cfg: BenchConfig) -> List[GridCell]:
    return [GridCell(kind, k, al) for kind in cfg.kinds for k in cfg.ks for al in cfg.adversarial]


def head_checkpoint_name(cell: GridCell) -> str:
    return f"head_{cell.kind.value}_k{cell.k}_al-{'on' if cell.adversarial else 'off'}.ckpt"


def errors_file_name(cell: GridCell, temperature: float) -> str:
    return head_checkpoint_name(cell).replace("head_", "errors_").replace(".ckpt", f"_t{temperature:g}.csv")


class BenchRow(BaseModel):
    kind: str
    K: Optional[int] = None
    AL: Optional[bool] = None
    temperature: float
    ell: Optional[float] = None
    ell_std: Optional[float] = None
    alpha_1: Optional[float] = None
    alpha_2: Optional[float] = None
    alpha_3: Optional[float] = None
    speedup: Optional[float] = None
    speedup_std: Optional[float] = None
    draft_overhead_fraction: Optional[float] = None
    tokens_per_s_spec: Optional[float] = None
    tokens_per_s_vanilla: Optional[float] = None
    head_params: Optional[int] = None
    status: str = "ok"


class Trend(BaseModel):
    name: str
    kind: str
    temperature: float
    values: Dict[str, Optional[float]]
    margin: Optional[float]
    noise: Optional[float]
    replicated: bool
    message: str


class BenchResult(NamedTuple):
    rows: List[BenchRow]
    best_k: List[BenchRow]
    trends: List[Trend]
    seed_ell: Dict[Tuple[str, int, bool, float], List[float]]

    @property
    def all_missing(self) -> bool:
        return all(r.status == "missing" for r in self.rows if r.kind != "vanilla")


class TimedRuns(NamedTuple):
    traces: List[DecodeTrace]
    repetitions: List[List[RunTiming]]


def repetition_seed(seed: int, repetition: int) -> int:
    """Seed of one bench seed repetition; the first repetition uses the root seed itself."""
    return seed if repetition == 0 else derive_seed(seed, f"bench-seed/{repetition}")


def _prompt_rng(seed: int, prompt_id: int, temperature: float) -> np.random.Generator:
    return component_rng(seed, f"bench/{prompt_id}/t{temperature:g}")


@reraise_with_stack
def decode_prompt(
    prompt_id: int,
    target: TargetModel,
    head: Optional[DraftHead],
    prompts: Sequence[Sequence[int]],
    max_new: int,
    temperature: float,
    seed: int,
) -> DecodeTrace:
    """One untimed decode of one prompt; ``head=None`` decodes without drafting."""
    rng = _prompt_rng(seed, prompt_id, temperature)
    prompt = prompts[prompt_id]
    if head is None:
        output, trace = vanilla_decode_bench(target, prompt, max_new, temperature, rng)
    else:
        output, trace = spec_decode(target, head, prompt, max_new, temperature, rng)
    trace.check_accounting(len(output), head.config.draft_len if head is not None else 0)
    return trace


def timed_runs(
    target: TargetModel,
    head: Optional[DraftHead],
    prompts: Sequence[Sequence[int]],
    cfg: BenchConfig,
    temperature: float,
    seed: int,
) -> TimedRuns:
    """
    Serial timed decodes: an optional discarded warmup pass, then ``repetitions`` passes over all
    prompts. Every pass reuses the same per-prompt seeds, so traces are identical across passes.
    """
    passes = cfg.repetitions + (1 if cfg.warmup else 0)
    repetitions: List[List[RunTiming]] = []
    traces: List[DecodeTrace] = []
    for rep in range(passes):
        timings = []
        for prompt_id, prompt in enumerate(prompts):
            rng = _prompt_rng(seed, prompt_id, temperature)
            if head is None:
                output, trace = vanilla_decode_bench(target, prompt, cfg.max_new, temperature, rng)
            else:
                output, trace = spec_decode(target, head, prompt, cfg.max_new, temperature, rng)
            trace.check_accounting(len(output), head.config.draft_len if head is not None else 0)
            timings.append(RunTiming(prompt_id, len(output) - len(prompt), trace.wall_seconds))
            if rep == passes - 1:
                traces.append(trace)
        if cfg.warmup and rep == 0:
            continue
        repetitions.append(timings)
    return TimedRuns(traces, repetitions)


def metric_traces(
    target: TargetModel,
    head: Optional[DraftHead],
    prompts: Sequence[Sequence[int]],
    cfg: BenchConfig,
    temperature: float,
    seed: int,
    error_file: Optional[Path] = None,
) -> List[DecodeTrace]:
    """Untimed decodes spread across worker processes; results come back in prompt order."""
    traces, errors = run_in_parallel(
        func=decode_prompt,
        items=range(len(prompts)),
        extra_kwargs={
            "target": target,
            "head": head,
            "prompts": prompts,
            "max_new": cfg.max_new,
            "temperature": temperature,
            "seed": seed,
        },
        start_message=f"Decoding {len(prompts)} prompts at temperature {temperature:g}...",
        pbar_unit="prompt",
        max_workers=cfg.workers,
    )
    if errors:
        if error_file is not None:
            write_errors_csv(errors, error_file)
            logger.error(f"Wrote {len(errors)} decode error(s) to {error_file}")
        raise ContractViolation(f"{len(errors)} prompt(s) failed to decode; first error: {errors[0].error}")
    return traces


def _seed_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _row(
    cell: GridCell,
    head: DraftHead,
    temperature: float,
    runs: TimedRuns,
    seed_traces: List[List[DecodeTrace]],
    vanilla: TimedRuns,
) -> BenchRow:
    t = head.config.draft_len
    pooled = [trace for traces in seed_traces for trace in traces]
    report = summarize(pooled, runs.repetitions, vanilla.repetitions, t)
    alpha = {n: report.alpha.get(n) for n in range(1, MAX_ALPHA + 1)}
    return BenchRow(
        kind=cell.kind.value,
        K=cell.k,
        AL=cell.adversarial,
        temperature=temperature,
        ell=report.ell,
        ell_std=_seed_std([avg_acceptance_length(traces) for traces in seed_traces]),
        alpha_1=alpha[1],
        alpha_2=alpha[2],
        alpha_3=alpha[3],
        speedup=report.speedup,
        speedup_std=report.speedup_std,
        draft_overhead_fraction=report.draft_overhead_fraction,
        tokens_per_s_spec=report.tokens_per_s_spec,
        tokens_per_s_vanilla=report.tokens_per_s_vanilla,
        head_params=head.param_count(),
    )


def _empty_row(cell: GridCell, temperature: float, status: str) -> BenchRow:
    return BenchRow(kind=cell.kind.value, K=cell.k, AL=cell.adversarial, temperature=temperature, status=status)


def run_grid(
    cfg: BenchConfig,
    target: TargetModel,
    load_head: Callable[[GridCell], Optional[DraftHead]],
    prompts: Sequence[Sequence[int]],
    seed: int,
    cells: Optional[Sequence[GridCell]] = None,
    error_dir: Optional[Path] = None,
) -> BenchResult:
    """
    Loads each cell's head (``None`` marks the cell missing), benchmarks it against the vanilla
    baseline at every temperature, and derives best-K rows and trend checks. Trains nothing.

    Timing uses the root seed. Acceptance metrics pool ``cfg.seeds`` seed repetitions, and the
    per-seed ``ell`` values give the trend noise. Failed untimed decodes are listed in
    ``error_dir`` when given.
    """
    if not prompts:
        raise ContractViolation("the benchmark needs at least one prompt")
    cells = list(cells) if cells is not None else grid_cells(cfg)
    rows: List[BenchRow] = []
    seed_ell: Dict[Tuple[str, int, bool, float], List[float]] = {}
    heads = {cell: load_head(cell) for cell in cells}
    with logging_redirect_tqdm(loggers=[logger]):
        for temperature in cfg.temperatures:
            logger.info(f"Timing vanilla decoding at temperature {temperature:g}")
            vanilla = timed_runs(target, None, prompts, cfg, temperature, seed)
            baseline = summarize(vanilla.traces, vanilla.repetitions, vanilla.repetitions, 1)
            rows.append(
                BenchRow(
                    kind="vanilla",
                    temperature=temperature,
                    ell=baseline.ell,
                    speedup=1.0,
                    speedup_std=0.0,
                    draft_overhead_fraction=0.0,
                    tokens_per_s_spec=baseline.tokens_per_s_vanilla,
                    tokens_per_s_vanilla=baseline.tokens_per_s_vanilla,
                    status="baseline",
                )
            )
            for cell in tqdm(cells, unit="cell"):
                head = heads[cell]
                if head is None:
                    logger.warning(f"{cell.label}: checkpoint missing, cell skipped")
                    rows.append(_empty_row(cell, temperature, "missing"))
                    continue
                error_file = error_dir / errors_file_name(cell, temperature) if error_dir is not None else None
                try:
                    runs = timed_runs(target, head, prompts, cfg, temperature, seed)
                    seed_traces = []
                    for repetition in range(cfg.seeds):
                        if repetition == 0 and cfg.workers == 1:
                            seed_traces.append(runs.traces)
                            continue
                        rep_seed = repetition_seed(seed, repetition)
                        seed_traces.append(metric_traces(target, head, prompts, cfg, temperature, rep_seed, error_file))
                    row = _row(cell, head, temperature, runs, seed_traces, vanilla)
                except SpecDraftError as err:
                    logger.error(f"{cell.label} at temperature {temperature:g} failed: {err}")
                    rows.append(_empty_row(cell, temperature, "error"))
                    continue
                seed_ell[(cell.kind.value, cell.k, cell.adversarial, temperature)] = [
                    avg_acceptance_length(traces) for traces in seed_traces
                ]
                logger.info(
                    f"{cell.label} T={temperature:g}: ell {row.ell:.3f} (std {row.ell_std:.3f} over {cfg.seeds} seeds), "
                    f"speedup {row.speedup:.3f}"
                )
                rows.append(row)
    best = best_k_rows(rows)
    return BenchResult(rows, best, trends(rows, seed_ell), seed_ell)


def best_k_rows(rows: Sequence[BenchRow]) -> List[BenchRow]:
    """Per (kind, AL, temperature): the K with the highest speedup."""
    groups: Dict[Tuple[str, bool, float], List[BenchRow]] = {}
    for row in rows:
        if row.status == "ok":
            groups.setdefault((row.kind, row.AL, row.temperature), []).append(row)
    best = []
    for _, members in sorted(groups.items(), key=lambda item: (item[0][0], item[0][1], item[0][2])):
        winner = max(members, key=lambda r: (r.speedup, -r.K))
        best.append(winner.model_copy(update={"status": "best_k"}))
    return best


def _seed_gap(
    seed_ell: Dict[Tuple[str, int, bool, float], List[float]],
    better: Tuple[str, int, bool, float],
    worse: Tuple[str, int, bool, float],
) -> Tuple[Optional[float], Optional[float]]:
    """Mean and standard deviation over seed repetitions of the ``ell`` difference, paired by seed."""
    if better not in seed_ell or worse not in seed_ell:
        return None, None
    if len(seed_ell[better]) != len(seed_ell[worse]):
        raise ContractViolation(f"{better} and {worse} were measured over different seed counts")
    gaps = np.asarray(seed_ell[better]) - np.asarray(seed_ell[worse])
    return float(gaps.mean()), _seed_std(gaps)


def _ell(rows: Sequence[BenchRow], kind: str, k: int, al: bool, temperature: float) -> Optional[float]:
    for row in rows:
        if row.status == "ok" and (row.kind, row.K, row.AL, row.temperature) == (kind, k, al, temperature):
            return row.ell
    return None


def trends(
    rows: Sequence[BenchRow], seed_ell: Dict[Tuple[str, int, bool, float], List[float]]
) -> List[Trend]:
    """
    Checks three trends per head kind and temperature: a second layer raises ``ell``; adversarial
    learning raises ``ell`` at K=1; drafting overhead grows with K. An ``ell`` gap counts as
    replicated when it exceeds twice its standard deviation over seed repetitions.
    """
    result: List[Trend] = []
    kinds = sorted({r.kind for r in rows if r.kind != "vanilla"})
    temperatures = sorted({r.temperature for r in rows})
    for kind in kinds:
        for temperature in temperatures:
            for name, better, worse in (
                ("multi_layer_ell", (kind, 2, False, temperature), (kind, 1, False, temperature)),
                ("adversarial_ell", (kind, 1, True, temperature), (kind, 1, False, temperature)),
            ):
                margin, noise = _seed_gap(seed_ell, better, worse)
                values = {"better": _ell(rows, *better), "baseline": _ell(rows, *worse)}
                if margin is None:
                    replicated, message = False, "not measured: a required cell is missing"
                else:
                    replicated = margin > 2 * noise
                    message = (
                        f"replicated: ell gap {margin:.4f} exceeds twice its std over seeds {noise:.4f}"
                        if replicated
                        else f"NOT replicated at this scale: ell gap {margin:.4f} vs std over seeds {noise:.4f}"
                    )
                result.append(
                    Trend(
                        name=name,
                        kind=kind,
                        temperature=temperature,
                        values=values,
                        margin=margin,
                        noise=noise,
                        replicated=replicated,
                        message=message,
                    )
                )
            for al in sorted({r.AL for r in rows if r.kind == kind and r.AL is not None}):
                overhead = sorted(
                    (r.K, r.draft_overhead_fraction)
                    for r in rows
                    if r.status == "ok" and r.kind == kind and r.AL == al and r.temperature == temperature
                )
                values = {f"K={k}": v for k, v in overhead}
                fractions = [v for _, v in overhead]
                measured = len(fractions) >= 2
                replicated = measured and all(b > a for a, b in zip(fractions[:-1], fractions[1:]))
                if not measured:
                    message = "not measured: fewer than two K values"
                elif replicated:
                    message = "replicated: drafting overhead strictly increases with K"
                else:
                    message = "NOT replicated: drafting overhead does not strictly increase with K"
                result.append(
                    Trend(
                        name=f"overhead_vs_k_al_{'on' if al else 'off'}",
                        kind=kind,
                        temperature=temperature,
                        values=values,
                        margin=None,
                        noise=None,
                        replicated=replicated,
                        message=message,
                    )
                )
    for trend in result:
        if not trend.replicated:
            logger.warning(f"Trend {trend.name} ({trend.kind}, T={trend.temperature:g}): {trend.message}")
    return result


def find_head_checkpoint(checkpoint_dir: Path, cell: GridCell) -> Optional[Path]:
    path = checkpoint_dir / head_checkpoint_name(cell)
    return path if path.is_file() else None
