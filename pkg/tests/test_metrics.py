from typing import List, Sequence

import numpy as np
import pytest

from specdraft.bench.metrics import (
    RunTiming,
    acceptance_rate,
    acceptance_rates,
    avg_acceptance_length,
    draft_overhead_fraction,
    speedup_ratio,
    summarize,
    tokens_per_second,
)
from specdraft.decoding.engine import DecodeTrace, IterationRecord
from specdraft.decoding.verify import VerifyOutcome
from specdraft.errors import ContractViolation, DomainError


def trace_from_masks(masks: Sequence[List[bool]], drafted: int = 3, draft_seconds: float = 0.0) -> DecodeTrace:
    trace = DecodeTrace(prompt_len=1)
    for i, mask in enumerate(masks):
        accepted = sum(mask)
        bonus = all(mask) and len(mask) == drafted
        rejection = None if bonus else len(mask)
        outcome = VerifyOutcome(accepted, list(range(accepted + 1)), rejection, bonus, list(mask))
        trace.add(IterationRecord(i, drafted, outcome, draft_seconds, 0.01))
    return trace


def timings(*seconds: float, tokens: int = 10) -> List[RunTiming]:
    return [RunTiming(i, tokens, s) for i, s in enumerate(seconds)]


def test_conditional_acceptance_rates_by_hand():
    trace = trace_from_masks([[True, True, False], [True, False], [False]])
    assert acceptance_rate([trace], 1) == pytest.approx(2 / 3)
    assert acceptance_rate([trace], 2) == pytest.approx(1 / 2)
    assert acceptance_rate([trace], 3) == 0.0


def test_full_acceptance_gives_rate_one():
    trace = trace_from_masks([[True, True, True]] * 4)
    assert acceptance_rates([trace], 3) == {1: 1.0, 2: 1.0, 3: 1.0}
    assert avg_acceptance_length([trace]) == 4.0


def test_never_evaluated_position_is_absent():
    trace = trace_from_masks([[False], [False]])
    assert acceptance_rate([trace], 2) is None
    with pytest.raises(DomainError):
        acceptance_rate([trace], 0)


def test_acceptance_length_arithmetic():
    # 10 iterations emitting 29 tokens: 9 of them accept 2 drafts, one accepts 1
    masks = [[True, True, False]] * 9 + [[True, False]]
    trace = trace_from_masks(masks)
    assert trace.emitted_tokens == 29
    assert avg_acceptance_length([trace]) == pytest.approx(2.9)


def test_vanilla_trace_has_unit_acceptance_length():
    trace = trace_from_masks([[]] * 7, drafted=0)
    assert avg_acceptance_length([trace]) == 1.0
    assert acceptance_rate([trace], 1) is None


def test_acceptance_length_needs_forward_passes():
    with pytest.raises(DomainError):
        avg_acceptance_length([])
    with pytest.raises(DomainError):
        avg_acceptance_length([DecodeTrace(prompt_len=3)])


def test_pooled_acceptance_length_lies_within_the_per_trace_envelope():
    traces = [trace_from_masks([[True, True, True]] * 2), trace_from_masks([[False]] * 5)]
    per_trace = [avg_acceptance_length([t]) for t in traces]
    assert per_trace == [4.0, 1.0]
    assert min(per_trace) <= avg_acceptance_length(traces) <= max(per_trace)


def test_speedup_examples():
    assert speedup_ratio(timings(1.0, 2.0), timings(1.0, 2.0)).pooled == 1.0
    result = speedup_ratio(timings(4.0), timings(10.0))
    assert result.pooled == pytest.approx(2.5)
    assert result.per_prompt == {0: pytest.approx(2.5)}


def test_speedup_ignores_prompt_order():
    spec, vanilla = timings(1.0, 2.0, 3.0), timings(2.0, 3.0, 9.0)
    shuffled = [spec[2], spec[0], spec[1]]
    assert speedup_ratio(shuffled, vanilla) == speedup_ratio(spec, vanilla)


def test_speedup_needs_matching_budgets_and_prompts():
    with pytest.raises(ContractViolation):
        speedup_ratio(timings(1.0, tokens=10), timings(1.0, tokens=12))
    with pytest.raises(ContractViolation):
        speedup_ratio(timings(1.0, 1.0), timings(1.0))


def test_overhead_and_throughput():
    trace = trace_from_masks([[True, False]] * 3, draft_seconds=0.03)
    assert draft_overhead_fraction([trace]) == pytest.approx(0.75)
    assert draft_overhead_fraction([DecodeTrace(prompt_len=1)]) == 0.0
    assert tokens_per_second(timings(1.0, 1.0, tokens=5)) == pytest.approx(5.0)


def test_summary_reports_the_median_speedup():
    trace = trace_from_masks([[True, True, False], [True, False]])
    spec_reps = [timings(4.0), timings(5.0), timings(2.0)]
    vanilla_reps = [timings(10.0)] * 3
    report = summarize([trace], spec_reps, vanilla_reps, 3)
    assert report.speedup == pytest.approx(2.5)
    assert report.speedup_std == pytest.approx(float(np.std([2.5, 2.0, 5.0])))
    assert report.ell == pytest.approx(2.5)
    assert report.alpha == {1: 1.0, 2: 0.5, 3: 0.0}
    with pytest.raises(ContractViolation):
        summarize([trace], spec_reps, vanilla_reps[:2], 3)
