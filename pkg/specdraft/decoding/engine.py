import time
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from specdraft.decoding.verify import VerifyOutcome, verify_greedy, verify_stochastic
from specdraft.errors import ContractViolation, DomainError, GraphError, ShapeError
from specdraft.log import get_logger, write_jsonl
from specdraft.models.heads import DraftHead
from specdraft.models.sampling import apply_temperature, draw
from specdraft.models.target import TargetModel, TargetSession, generate_autoregressive, probs_from_logits

logger = get_logger()


class IterationRecord(NamedTuple):
    iteration: int
    drafted: int
    outcome: VerifyOutcome
    draft_seconds: float
    verify_seconds: float

    def record(self) -> dict:
        return {
            "iteration": self.iteration,
            "drafted": self.drafted,
            "accepted_count": self.outcome.accepted_count,
            "bonus": self.outcome.bonus,
            "rejection_index": self.outcome.rejection_index,
            "accepted_mask": list(self.outcome.accepted_mask),
            "emitted_tokens": list(self.outcome.emitted_tokens),
            "draft_ms": self.draft_seconds * 1000.0,
            "verify_ms": self.verify_seconds * 1000.0,
        }


class DecodeTrace:
    """
    Everything one decode produced: per-iteration outcomes, forward-pass counts and phase timings.
    Iteration 0 is the prompt prefill, which drafts nothing and emits one token.
    """

    def __init__(self, prompt_len: int) -> None:
        self.prompt_len = prompt_len
        self.iterations: List[IterationRecord] = []
        self.target_forwards = 0
        self.draft_forwards = 0
        self.context_overflow = False
        self.wall_seconds = 0.0

    def add(self, record: IterationRecord) -> None:
        self.iterations.append(record)
        self.target_forwards += 1

    @property
    def emitted_tokens(self) -> int:
        return sum(r.outcome.accepted_count + 1 for r in self.iterations)

    @property
    def draft_seconds(self) -> float:
        return sum(r.draft_seconds for r in self.iterations)

    @property
    def verify_seconds(self) -> float:
        return sum(r.verify_seconds for r in self.iterations)

    def check_accounting(self, output_len: Optional[int] = None, draft_len: Optional[int] = None) -> None:
        """Raises ``ContractViolation`` when the trace's bookkeeping is inconsistent."""
        if self.target_forwards != len(self.iterations):
            raise ContractViolation(f"{self.target_forwards} target forwards over {len(self.iterations)} iterations")
        for r in self.iterations:
            if len(r.outcome.emitted_tokens) != r.outcome.accepted_count + 1:
                raise ContractViolation(f"iteration {r.iteration}: emitted tokens != accepted + 1")
            if r.outcome.bonus and r.outcome.accepted_count != r.drafted:
                raise ContractViolation(f"iteration {r.iteration}: bonus token without full acceptance")
        if output_len is not None and self.emitted_tokens != output_len - self.prompt_len:
            raise ContractViolation(
                f"{self.emitted_tokens} emitted tokens but output grew by {output_len - self.prompt_len}"
            )
        if self.iterations and draft_len is not None:
            ell = self.emitted_tokens / self.target_forwards
            if not 1.0 <= ell <= draft_len + 1:
                raise ContractViolation(f"acceptance length {ell} outside [1, {draft_len + 1}]")

    def records(self) -> List[dict]:
        return [r.record() for r in self.iterations]

    def write(self, output_file: Path, append: bool = False) -> None:
        write_jsonl(self.records(), output_file, append=append)


def _target_dists(logits: np.ndarray, temperature: float) -> List[np.ndarray]:
    probs = probs_from_logits(logits)
    if temperature == 0:
        return list(probs)
    return [apply_temperature(row, temperature) for row in probs]


class DecodeState(NamedTuple):
    """Committed rows live in the session cache; ``pending`` is emitted but not yet forwarded."""

    pending: int
    hidden: np.ndarray


def prefill(
    session: TargetSession, prompt: Sequence[int], temperature: float, rng: np.random.Generator
) -> Tuple[DecodeState, IterationRecord]:
    started = time.perf_counter()
    logits, hidden = session.extend(prompt)
    token, _ = draw(_target_dists(logits[-1:], 0)[0], temperature, rng)
    elapsed = time.perf_counter() - started
    outcome = VerifyOutcome(0, [token], None, True, [])
    return DecodeState(token, hidden[-1]), IterationRecord(0, 0, outcome, 0.0, elapsed)


def speculative_step(
    session: TargetSession,
    head: DraftHead,
    state: DecodeState,
    t: int,
    temperature: float,
    rng: np.random.Generator,
    iteration: int = 1,
) -> Tuple[DecodeState, IterationRecord, int]:
    """
    Drafts ``t`` tokens after the pending token, verifies them with one target forward over
    ``[pending, drafts...]`` and rolls the cache back to the accepted prefix.
    Returns the new state, the iteration record and the number of draft forward passes.
    """
    started = time.perf_counter()
    draft_tokens: List[int] = []
    draft_dists: List[np.ndarray] = []
    draft_forwards = 0
    if t > 0:
        draft = head.draft_chain(state.hidden, state.pending, t, temperature, rng)
        draft_tokens, draft_dists, draft_forwards = draft.tokens, draft.dists, draft.forward_passes
    drafted_at = time.perf_counter()
    committed = session.length
    logits, hidden = session.extend([state.pending] + draft_tokens)
    q_dists = _target_dists(logits, temperature)
    if temperature == 0:
        outcome = verify_greedy(q_dists, draft_tokens)
    else:
        outcome = verify_stochastic(q_dists, draft_dists, draft_tokens, rng)
    session.truncate(committed + 1 + outcome.accepted_count)
    verified_at = time.perf_counter()
    new_state = DecodeState(outcome.emitted_tokens[-1], hidden[outcome.accepted_count])
    record = IterationRecord(iteration, t, outcome, drafted_at - started, verified_at - drafted_at)
    return new_state, record, draft_forwards


def spec_decode(
    target: TargetModel,
    head: DraftHead,
    prompt: Sequence[int],
    max_new: int,
    temperature: float,
    rng: np.random.Generator,
    draft_len: Optional[int] = None,
) -> Tuple[List[int], DecodeTrace]:
    """
    Draft-then-verify decoding of exactly ``max_new`` tokens (fewer on context overflow). The last
    iteration drafts fewer tokens when the budget would otherwise be exceeded.
    """
    if not target.frozen:
        raise GraphError("spec_decode needs a frozen target model")
    if head.config.d_model != target.config.d_model:
        raise ShapeError("spec_decode", (head.config.d_model,), (target.config.d_model,), detail="d_model mismatch")
    if len(prompt) < 1:
        raise DomainError("prompt must contain at least one token")
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    t = draft_len or head.config.draft_len
    limit = target.config.max_seq_len
    tokens = list(prompt)
    trace = DecodeTrace(len(prompt))
    started = time.perf_counter()
    if max_new <= 0:
        return tokens, trace
    if len(prompt) > limit:
        trace.context_overflow = True
        logger.warning(f"Prompt of {len(prompt)} tokens exceeds the context limit of {limit}")
        return tokens, trace
    session = target.session()
    state, record = prefill(session, prompt, temperature, rng)
    trace.add(record)
    tokens.append(state.pending)
    generated = 1
    while generated < max_new:
        step_len = min(t, max_new - generated - 1)
        if session.length + step_len + 1 > limit:
            trace.context_overflow = True
            logger.warning(f"Context limit of {limit} reached after {generated} new tokens; stopping early")
            break
        state, record, draft_forwards = speculative_step(
            session, head, state, step_len, temperature, rng, iteration=len(trace.iterations)
        )
        trace.add(record)
        trace.draft_forwards += draft_forwards
        tokens.extend(record.outcome.emitted_tokens)
        generated += len(record.outcome.emitted_tokens)
    trace.wall_seconds = time.perf_counter() - started
    return tokens, trace


def vanilla_decode_bench(
    target: TargetModel, prompt: Sequence[int], max_new: int, temperature: float, rng: np.random.Generator
) -> Tuple[List[int], DecodeTrace]:
    """
    Vanilla decoding recorded in the same trace shape: every step is one iteration that drafts
    nothing, so ``ell`` is exactly 1.
    """
    started = time.perf_counter()
    generation = generate_autoregressive(target, prompt, max_new, temperature, rng)
    trace = DecodeTrace(len(prompt))
    trace.context_overflow = generation.truncated
    new_tokens = generation.tokens[len(prompt) :]
    for i, (token, seconds) in enumerate(zip(new_tokens, generation.step_seconds)):
        trace.add(IterationRecord(i, 0, VerifyOutcome(0, [token], None, True, []), 0.0, seconds))
    trace.wall_seconds = time.perf_counter() - started
    return generation.tokens, trace
