"""
Correctness suites run by ``specdraft verify-oracles``. Each builds its own tiny
fixtures by default; greedy equivalence can also check trained checkpoints.
"""
import math
import time
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from specdraft.autodiff import ops
from specdraft.autodiff.gradcheck import check_gradients
from specdraft.autodiff.tensor import Tensor
from specdraft.decoding.engine import DecodeState, spec_decode, speculative_step
from specdraft.decoding.verify import (
    AcceptRule,
    ResidualRule,
    Verifier,
    acceptance_probability,
    enumerate_emitted_marginals,
    residual_distribution,
)
from specdraft.errors import ContractViolation, SpecDraftError
from specdraft.log import get_logger
from specdraft.models.heads import DraftHead, HeadConfig, HeadKind, build_head
from specdraft.models.target import TargetConfig, TargetModel, generate_autoregressive, probs_from_logits
from specdraft.training.losses import discriminator_loss, distill_loss, generator_loss
from specdraft.util import component_rng

logger = get_logger()

LOSSLESS_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-4
ANCHOR_TOLERANCE = 1e-9
CHI_SQUARE_P = 0.01
MIN_EXPECTED_COUNT = 5.0


class OracleResult(NamedTuple):
    name: str
    passed: bool
    cases: int
    seconds: float
    counterexample: Optional[Dict[str, Any]] = None


def _timed(name: str, run: Callable[[], Tuple[int, Optional[Dict[str, Any]]]]) -> OracleResult:
    started = time.perf_counter()
    try:
        cases, counterexample = run()
    except SpecDraftError as err:
        cases, counterexample = 0, {"error": f"{err.__class__.__name__}: {err}"}
    seconds = time.perf_counter() - started
    result = OracleResult(name, counterexample is None, cases, seconds, counterexample)
    if result.passed:
        logger.info(f"{name}: passed {cases} case(s) in {seconds:.2f}s")
    else:
        logger.error(f"{name}: FAILED after {cases} case(s) in {seconds:.2f}s")
    return result


def tiny_target(seed: int = 0, logit_scale: float = 1.0) -> TargetModel:
    """An untrained 2-layer target, frozen. ``logit_scale`` sharpens its next-token distributions."""
    config = TargetConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=64, ff_mult=2)
    model = TargetModel(config, component_rng(seed, "oracle-target"))
    model.lm_head.weight.data *= np.float32(logit_scale)
    return model.freeze()


def tiny_head(target: TargetModel, kind: HeadKind, k: int, seed: int = 0, draft_len: int = 3) -> DraftHead:
    """A head built from ``target`` with its trainable weights perturbed away from the initial copy."""
    config = HeadConfig(kind=kind, k=k, d_model=target.config.d_model, n_heads=2, ff_mult=2, draft_len=draft_len)
    rng = component_rng(seed, f"oracle-head/{kind.value}/{k}")
    head = build_head(config, target, rng)
    for _, p in head.trainable_parameters():
        p.data += rng.normal(0.0, 0.05, size=p.shape).astype(p.dtype)
    return head


def _random_dist(rng: np.random.Generator, vocab: int) -> np.ndarray:
    dist = rng.dirichlet(np.full(vocab, 0.7))
    return dist / dist.sum()


def losslessness(
    cases: int = 100,
    seed: int = 0,
    max_vocab: int = 8,
    max_t: int = 3,
    accept_rule: AcceptRule = acceptance_probability,
    residual_rule: ResidualRule = residual_distribution,
    verifier: Optional[Verifier] = None,
) -> OracleResult:
    """
    Runs the stochastic verifier along every path of its random choices over random (q, d) chains:
    the emitted token at every position must be distributed as q at that position.
    """

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        rng = component_rng(seed, "oracle/losslessness")
        for case in range(cases):
            vocab = int(rng.integers(2, max_vocab + 1))
            t = int(rng.integers(1, max_t + 1))
            q_dists = [_random_dist(rng, vocab) for _ in range(t + 1)]
            d_dists = [_random_dist(rng, vocab) for _ in range(t)]
            result = enumerate_emitted_marginals(q_dists, d_dists, accept_rule, residual_rule, verifier)
            errors = [
                float(np.max(np.abs(marginal - q))) for marginal, q, reach in zip(result.marginals, q_dists, result.reach) if reach > 0
            ]
            worst = max(errors + [abs(result.total - 1.0)])
            if worst > LOSSLESS_TOLERANCE:
                return case + 1, {
                    "vocab": vocab,
                    "t": t,
                    "q": [q.tolist() for q in q_dists],
                    "d": [d.tolist() for d in d_dists],
                    "marginals": [m.tolist() for m in result.marginals],
                    "max_abs_error": worst,
                }
        return cases, None

    return _timed("losslessness", run)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def _f64(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)


GradCase = Tuple[Callable[[], Tensor], List[Tensor]]

# Reduction weights are drawn once per shape so every finite-difference evaluation of a case
# reduces through the same weights.
_WEIGHT_RNG = np.random.default_rng(20240601)
_WEIGHTS: Dict[Tuple[int, ...], np.ndarray] = {}


def _weights(*shape: int) -> np.ndarray:
    if shape not in _WEIGHTS:
        _WEIGHTS[shape] = _WEIGHT_RNG.normal(size=shape)
    return _WEIGHTS[shape]


def _gradient_cases(rng: np.random.Generator) -> Dict[str, GradCase]:
    m, n = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    w = rng.normal(size=(m, n))

    def unary(op: Callable[[Tensor], Tensor], low: float = -1.0) -> GradCase:
        x = _f64(rng, m, n, low=low)
        return (lambda: _weighted(op(x), w)), [x]

    a, b, bias = _f64(rng, m, n), _f64(rng, m, n), _f64(rng, n)
    left, right = _f64(rng, 2, m, 3), _f64(rng, 3, n)
    x_ln, gamma, beta = _f64(rng, m, n), _f64(rng, n, low=0.5, high=1.5), _f64(rng, n)
    table = _f64(rng, 5, n)
    ids = rng.integers(0, 5, size=(m, 2))
    cube = _f64(rng, 2, m, n)
    clipped = _f64(rng, m, n)
    near_edge = np.abs(np.abs(clipped.data) - 0.5) < 1e-3
    clipped.data[near_edge] += 0.01
    attn_x = _f64(rng, 1, 3, 4)
    w_qkv, b_qkv, w_out, b_out = _f64(rng, 4, 12), _f64(rng, 12), _f64(rng, 4, 4), _f64(rng, 4)
    rows = rng.integers(0, m, size=4)
    cube_w = rng.normal(size=(2, n, m))
    return {
        "add": ((lambda: _weighted(ops.add(a, bias), w)), [a, bias]),
        "mul": ((lambda: _weighted(ops.mul(a, b), w)), [a, b]),
        "scale": unary(lambda x: ops.scale(x, 1.7)),
        "matmul": ((lambda: _weighted(ops.matmul(left, right), _weights(2, m, n))), [left, right]),
        "sigmoid": unary(ops.sigmoid),
        "silu": unary(ops.silu),
        "softmax": unary(ops.softmax),
        "log_softmax": unary(ops.log_softmax),
        "layer_norm": ((lambda: _weighted(ops.layer_norm(x_ln, gamma, beta), w)), [x_ln, gamma, beta]),
        "embedding": ((lambda: ops.sum(ops.mul(ops.embedding(table, ids), ops.embedding(table, ids)))), [table]),
        "concat": ((lambda: _weighted(ops.concat([a, b], axis=0), np.vstack([w, w[::-1]]))), [a, b]),
        "log": unary(ops.log, low=0.5),
        "sum": ((lambda: _weighted(ops.sum(cube, axis=1), _weights(2, n))), [cube]),
        "mean": ((lambda: _weighted(ops.mean(cube, axis=2), _weights(2, m))), [cube]),
        "reshape": ((lambda: _weighted(ops.reshape(a, (n, m)), w.reshape(n, m))), [a]),
        "transpose": ((lambda: _weighted(ops.transpose(cube, 1, 2), cube_w)), [cube]),
        "take_rows": ((lambda: _weighted(ops.take_rows(a, rows), _weights(4, n))), [a]),
        "clip": ((lambda: _weighted(ops.clip(clipped, -0.5, 0.5), w)), [clipped]),
        "causal_self_attention": (
            (lambda: _weighted(ops.causal_self_attention(attn_x, w_qkv, b_qkv, w_out, b_out, 2)[0], _weights(1, 3, 4))),
            [attn_x, w_qkv, b_qkv, w_out, b_out],
        ),
    }


def gradients(cases: int = 20, seed: int = 0, primitives: Optional[Sequence[str]] = None) -> OracleResult:
    """Tape gradients of every primitive against central finite differences in float64."""

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        rng = component_rng(seed, "oracle/gradients")
        checked = 0
        for case in range(cases):
            for name, (fn, inputs) in _gradient_cases(rng).items():
                if primitives is not None and name not in primitives:
                    continue
                result = check_gradients(fn, inputs)
                checked += 1
                if not result.passed(GRADIENT_TOLERANCE):
                    return checked, {
                        "primitive": name,
                        "case": case,
                        "max_rel_error": result.max_rel_error,
                        "shapes": [list(t.shape) for t in inputs],
                    }
        return checked, None

    return _timed("gradients", run)


HeadLoader = Callable[[HeadKind, int], Optional[DraftHead]]


def greedy_equivalence(
    prompts: int = 3,
    max_new: int = 12,
    seed: int = 0,
    ks: Sequence[int] = (1, 2, 3),
    target: Optional[TargetModel] = None,
    load_head: Optional[HeadLoader] = None,
    prompt_list: Optional[Sequence[Sequence[int]]] = None,
) -> OracleResult:
    """
    At temperature 0 speculative decoding must emit exactly the vanilla greedy tokens, for both
    head kinds at every K in ``ks``.

    By default the suite builds a tiny target, perturbed heads and ``prompts`` random prompts.
    Trained models are checked by passing ``target``, ``load_head`` and ``prompt_list``; a head
    the loader cannot supply fails the suite.
    """

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        model = target if target is not None else tiny_target(seed)
        if prompt_list is not None:
            prompt_set = [list(p) for p in prompt_list]
        else:
            rng = component_rng(seed, "oracle/greedy-prompts")
            prompt_set = [rng.integers(0, model.config.vocab_size, size=int(rng.integers(1, 8))).tolist() for _ in range(prompts)]
        checked = 0
        for kind in HeadKind:
            for k in ks:
                head = load_head(kind, k) if load_head is not None else tiny_head(model, kind, k, seed)
                if head is None:
                    return checked, {"kind": kind.value, "k": k, "error": "no head checkpoint for this kind and K"}
                for prompt in prompt_set:
                    reference = generate_autoregressive(model, prompt, max_new, 0.0, np.random.default_rng(0)).tokens
                    output, _ = spec_decode(model, head, prompt, max_new, 0.0, np.random.default_rng(0))
                    checked += 1
                    if output != reference:
                        return checked, {"kind": kind.value, "k": k, "prompt": prompt, "vanilla": reference, "speculative": output}
        return checked, None

    return _timed("greedy_equivalence", run)


def loss_anchors(seed: int = 0) -> OracleResult:
    """Closed-form values of the training objectives."""

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        rng = component_rng(seed, "oracle/anchors")
        half = Tensor(np.full((6, 1), 0.5), dtype=np.float64)
        l_d = discriminator_loss(half, half).item()
        if abs(l_d - 2 * math.log(2)) > ANCHOR_TOLERANCE:
            return 1, {"anchor": "discriminator_loss(D=0.5)", "value": l_d, "expected": 2 * math.log(2)}
        d_logits = Tensor(rng.normal(size=(4, 3, 8)), dtype=np.float64)
        q_logits = Tensor(rng.normal(size=(4, 3, 8)), dtype=np.float64)
        d_fake = Tensor(rng.uniform(0.1, 0.9, size=(12, 1)), dtype=np.float64)
        with_zero_lambda = generator_loss(d_fake, d_logits, q_logits, 0.0).data
        distill = distill_loss(d_logits, q_logits).data
        if with_zero_lambda.tobytes() != distill.tobytes():
            return 2, {"anchor": "generator_loss(lambda=0)", "value": float(with_zero_lambda), "expected": float(distill)}
        self_distill = distill_loss(q_logits, q_logits).item()
        if abs(self_distill) > LOSSLESS_TOLERANCE:
            return 3, {"anchor": "distill_loss(d=q)", "value": self_distill, "expected": 0.0}
        return 3, None

    return _timed("loss_anchors", run)


def accounting(prompts: int = 4, max_new: int = 20, seed: int = 0, temperatures: Sequence[float] = (0.0, 1.0)) -> OracleResult:
    """Trace bookkeeping of real decodes: emitted = sum(accepted + 1), iterations = forwards, 1 <= ell <= t + 1."""

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        target = tiny_target(seed, logit_scale=20.0)
        checked = 0
        for kind in HeadKind:
            head = tiny_head(target, kind, 1, seed)
            for temperature in temperatures:
                for prompt_id in range(prompts):
                    rng = component_rng(seed, f"oracle/accounting/{kind.value}/{prompt_id}/t{temperature:g}")
                    prompt = rng.integers(0, target.config.vocab_size, size=4).tolist()
                    output, trace = spec_decode(target, head, prompt, max_new, temperature, rng)
                    checked += 1
                    try:
                        trace.check_accounting(len(output), head.config.draft_len)
                    except ContractViolation as err:
                        return checked, {"kind": kind.value, "temperature": temperature, "prompt": prompt, "error": str(err)}
        return checked, None

    return _timed("accounting", run)


class ChiSquareOutcome(NamedTuple):
    statistic: float
    p_value: float
    bins: int


def chi_square_against(counts: np.ndarray, expected_probs: np.ndarray) -> ChiSquareOutcome:
    """
    Pearson chi-square of observed ``counts`` against ``expected_probs``; categories with an expected
    count under 5 are pooled into one bin.
    """
    counts = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(expected_probs, dtype=np.float64)
    expected = expected / expected.sum() * counts.sum()
    small = expected < MIN_EXPECTED_COUNT
    observed_bins = counts[~small]
    expected_bins = expected[~small]
    if small.any():
        observed_bins = np.append(observed_bins, counts[small].sum())
        expected_bins = np.append(expected_bins, expected[small].sum())
    if observed_bins.size < 2:
        return ChiSquareOutcome(0.0, 1.0, int(observed_bins.size))
    statistic, p_value = stats.chisquare(observed_bins, expected_bins)
    return ChiSquareOutcome(float(statistic), float(p_value), int(observed_bins.size))


def first_token_counts(
    target: TargetModel, head: DraftHead, prompt: Sequence[int], samples: int, t: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Repeats one temperature-1 speculative iteration from the same state and counts its first emitted
    token. Returns the counts and the exact target distribution of that token.
    """
    session = target.session()
    logits, hidden = session.extend(prompt)
    pending = int(np.argmax(logits[-1]))
    committed = session.length
    exact_logits, _ = session.extend([pending])
    exact = probs_from_logits(exact_logits)[0]
    session.truncate(committed)
    state = DecodeState(pending, hidden[-1])
    counts = np.zeros(target.config.vocab_size, dtype=np.int64)
    for _ in range(samples):
        _, record, _ = speculative_step(session, head, state, t, 1.0, rng)
        counts[record.outcome.emitted_tokens[0]] += 1
        session.truncate(committed)
    return counts, exact


def statistical_losslessness(
    samples: int = 100_000, seeds: int = 5, min_passing: int = 4, seed: int = 0, kind: HeadKind = HeadKind.eagle
) -> OracleResult:
    """
    End to end at temperature 1: the first token emitted by a speculative iteration must pass a
    chi-square test against the target's exact next-token distribution on most seeds.
    """

    def run() -> Tuple[int, Optional[Dict[str, Any]]]:
        target = tiny_target(seed, logit_scale=20.0)
        head = tiny_head(target, kind, 1, seed, draft_len=2)
        prompt = component_rng(seed, "oracle/statistical-prompt").integers(0, target.config.vocab_size, size=6).tolist()
        p_values = []
        for trial in range(seeds):
            rng = component_rng(seed, f"oracle/statistical/{trial}")
            counts, exact = first_token_counts(target, head, prompt, samples, head.config.draft_len, rng)
            p_values.append(chi_square_against(counts, exact).p_value)
        passing = sum(p > CHI_SQUARE_P for p in p_values)
        if passing < min_passing:
            return seeds, {"kind": kind.value, "samples": samples, "p_values": p_values, "passing": passing}
        return seeds, None

    return _timed("statistical_losslessness", run)


SUITES: Dict[str, Callable[..., OracleResult]] = {
    "losslessness": losslessness,
    "gradients": gradients,
    "greedy_equivalence": greedy_equivalence,
    "loss_anchors": loss_anchors,
    "accounting": accounting,
    "statistical_losslessness": statistical_losslessness,
}


def run_oracles(
    names: Optional[Sequence[str]] = None, seed: int = 0, options: Optional[Mapping[str, Mapping[str, Any]]] = None
) -> List[OracleResult]:
    """Runs the named suites, or all of them, passing each its entry of ``options`` as keyword arguments."""
    options = options or {}
    selected = list(names) if names else list(SUITES)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise ContractViolation(f"unknown oracle suite(s): {', '.join(unknown)}")
    return [SUITES[name](seed=seed, **options.get(name, {})) for name in selected]
