from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from specdraft.decoding.engine import DecodeTrace
from specdraft.errors import ContractViolation, DomainError


class RunTiming(NamedTuple):
    prompt_id: int
    tokens: int
    seconds: float


def avg_acceptance_length(traces: Sequence[DecodeTrace]) -> float:
    """Emitted tokens per target forward pass, pooled over ``traces``."""
    if not traces:
        raise DomainError("no traces to compute an acceptance length from")
    forwards = sum(t.target_forwards for t in traces)
    if forwards == 0:
        raise DomainError("traces contain zero target forward passes")
    return sum(t.emitted_tokens for t in traces) / forwards


def acceptance_rate(traces: Sequence[DecodeTrace], n: int) -> Optional[float]:
    """
    Fraction of iterations accepting chain position ``n`` among those that evaluated it. Position
    ``n`` is only evaluated when positions ``1..n-1`` were accepted. ``None`` when never evaluated.
    """
    if n < 1:
        raise DomainError(f"acceptance rate position must be >= 1, got {n}")
    evaluated = accepted = 0
    for trace in traces:
        for record in trace.iterations:
            mask = record.outcome.accepted_mask
            if len(mask) >= n:
                evaluated += 1
                accepted += int(mask[n - 1])
    return accepted / evaluated if evaluated else None


def acceptance_rates(traces: Sequence[DecodeTrace], t: int) -> Dict[int, Optional[float]]:
    return {n: acceptance_rate(traces, n) for n in range(1, t + 1)}


class Speedup(NamedTuple):
    pooled: float
    per_prompt: Dict[int, float]


def speedup_ratio(spec: Sequence[RunTiming], vanilla: Sequence[RunTiming]) -> Speedup:
    """
    Vanilla walltime over speculative walltime for the same prompts and token budgets.
    Prompts are matched by id, so ordering does not matter.
    """
    spec_by_id = {r.prompt_id: r for r in spec}
    vanilla_by_id = {r.prompt_id: r for r in vanilla}
    if set(spec_by_id) != set(vanilla_by_id) or not spec_by_id:
        raise ContractViolation("speculative and vanilla timings cover different prompt sets")
    for prompt_id, run in spec_by_id.items():
        if run.tokens != vanilla_by_id[prompt_id].tokens:
            raise ContractViolation(
                f"prompt {prompt_id}: token budgets differ ({run.tokens} speculative vs {vanilla_by_id[prompt_id].tokens} vanilla)"
            )
    spec_total = sum(r.seconds for r in spec_by_id.values())
    vanilla_total = sum(r.seconds for r in vanilla_by_id.values())
    if spec_total <= 0:
        raise DomainError("speculative walltime must be positive")
    per_prompt = {
        prompt_id: vanilla_by_id[prompt_id].seconds / run.seconds
        for prompt_id, run in sorted(spec_by_id.items())
        if run.seconds > 0
    }
    return Speedup(vanilla_total / spec_total, per_prompt)


def draft_overhead_fraction(traces: Sequence[DecodeTrace]) -> float:
    draft = sum(t.draft_seconds for t in traces)
    total = draft + sum(t.verify_seconds for t in traces)
    return draft / total if total > 0 else 0.0


def tokens_per_second(timings: Sequence[RunTiming]) -> float:
    seconds = sum(r.seconds for r in timings)
    return sum(r.tokens for r in timings) / seconds if seconds > 0 else 0.0


class MetricsReport(BaseModel):
    ell: float
    alpha: Dict[int, Optional[float]]
    speedup: float
    speedup_std: float
    tokens_per_s_spec: float
    tokens_per_s_vanilla: float
    draft_overhead_fraction: float


def summarize(
    traces: Sequence[DecodeTrace],
    spec_reps: Sequence[Sequence[RunTiming]],
    vanilla_reps: Sequence[Sequence[RunTiming]],
    t: int,
) -> MetricsReport:
    """
    ``ell`` and ``alpha`` come from ``traces``; speedup is the median over repetitions, with the
    standard deviation across them.
    """
    if len(spec_reps) != len(vanilla_reps) or not spec_reps:
        raise ContractViolation("need the same, non-zero number of speculative and vanilla repetitions")
    speedups = [speedup_ratio(s, v).pooled for s, v in zip(spec_reps, vanilla_reps)]
    return MetricsReport(
        ell=avg_acceptance_length(traces),
        alpha=acceptance_rates(traces, t),
        speedup=float(np.median(speedups)),
        speedup_std=float(np.std(speedups)),
        tokens_per_s_spec=float(np.median([tokens_per_second(s) for s in spec_reps])),
        tokens_per_s_vanilla=float(np.median([tokens_per_second(v) for v in vanilla_reps])),
        draft_overhead_fraction=draft_overhead_fraction(traces),
    )
