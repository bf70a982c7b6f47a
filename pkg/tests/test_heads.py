import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from specdraft.autodiff import ops
from specdraft.autodiff.tensor import Tensor, no_grad
from specdraft.errors import ContractViolation, ShapeError
from specdraft.models.heads import (
    EagleHead,
    HeadConfig,
    HeadKind,
    MedusaHead,
    build_head,
    eagle_draft_chain,
    medusa_draft_chain,
    medusa_forward,
    param_count,
)
from specdraft.models.sampling import softmax_rows
from specdraft.models.target import target_forward
from specdraft.oracles import tiny_head


def head_config(target, kind: HeadKind, k: int = 1, **overrides) -> HeadConfig:
    return HeadConfig(kind=kind, k=k, d_model=target.config.d_model, n_heads=2, ff_mult=2, **overrides)


def last_row(target, tokens):
    logits, hidden = target_forward(target, tokens)
    return softmax_rows(logits[-1].astype(np.float64)), hidden[-1]


def test_medusa_param_count_example():
    config = HeadConfig(kind=HeadKind.medusa, k=1, d_model=128, medusa_num_heads=3)
    assert param_count(config) == 148608


@pytest.mark.parametrize("kind", list(HeadKind))
@pytest.mark.parametrize("k", [1, 2, 3])
def test_param_count_matches_the_built_head(target, kind, k):
    config = head_config(target, kind, k)
    assert build_head(config, target, np.random.default_rng(0)).param_count() == param_count(config)


@pytest.mark.parametrize("kind", list(HeadKind))
def test_each_extra_layer_adds_the_same_parameter_count(target, kind):
    counts = [param_count(head_config(target, kind, k, allow_any_k=True)) for k in range(1, 5)]
    steps = np.diff(counts)
    assert len(set(steps.tolist())) == 1
    if kind == HeadKind.medusa:
        d = target.config.d_model
        assert steps[0] == 3 * (d * d + d)


def test_eagle_trains_nothing_of_the_target(target):
    head = build_head(head_config(target, HeadKind.eagle), target, np.random.default_rng(0))
    names = [name for name, _ in head.trainable_parameters()]
    assert not any("lm_head" in name for name in names)
    assert head.lm_head is target.lm_head


def test_k_outside_the_shipped_grid_needs_an_override(target):
    with pytest.raises(ValidationError):
        head_config(target, HeadKind.eagle, 4)
    assert head_config(target, HeadKind.eagle, 4, allow_any_k=True).k == 4


def test_medusa_draft_len_cannot_exceed_its_heads(target):
    with pytest.raises(ValidationError):
        head_config(target, HeadKind.medusa, draft_len=4, medusa_num_heads=3)
    head = build_head(head_config(target, HeadKind.medusa), target)
    hidden = np.zeros(target.config.d_model, dtype=np.float32)
    with pytest.raises(ContractViolation):
        medusa_draft_chain(head, hidden, 4, 0.0, np.random.default_rng(0))


def test_d_model_mismatch(target):
    config = HeadConfig(kind=HeadKind.eagle, d_model=32, n_heads=2)
    with pytest.raises(ShapeError):
        build_head(config, target)
    medusa = build_head(head_config(target, HeadKind.medusa), target)
    with pytest.raises(ShapeError):
        medusa_forward(medusa, np.zeros(8))


@pytest.mark.parametrize("k", [1, 3])
def test_fresh_medusa_heads_reproduce_the_target_next_token(target, k):
    q, hidden = last_row(target, [3, 1, 4, 1, 5])
    head = build_head(head_config(target, HeadKind.medusa, k), target)
    for dist in medusa_forward(head, hidden):
        assert_allclose(dist, q, atol=1e-5)


def test_fresh_eagle_first_step_is_the_target_distribution(target):
    tokens = [3, 1, 4, 1, 5]
    logits, hidden = target_forward(target, tokens)
    head = build_head(head_config(target, HeadKind.eagle, 2), target, np.random.default_rng(0))
    draft = eagle_draft_chain(head, hidden, tokens, 1, 0.0, np.random.default_rng(0))
    # The first step fuses the last token with the last hidden row; at init the fusion passes the
    # hidden row through, so the draft equals the target's prediction at that row.
    assert_allclose(draft.dists[0], softmax_rows(logits[-1].astype(np.float64)), atol=1e-5)


def test_medusa_stack_composes_its_blocks(target, rng):
    head = tiny_head(target, HeadKind.medusa, 2)
    logical = head.heads[0]
    x = Tensor(rng.normal(size=(1, target.config.d_model)).astype(np.float32))
    with no_grad():
        manual = logical.proj(logical.blocks[1](logical.blocks[0](x)))
        assert_allclose(logical(x).data, manual.data)
        single = logical.blocks[0]
        residual = ops.add(x, ops.silu(single.linear(x)))
    assert_allclose(single(x).data, residual.data)


def test_medusa_chain_ignores_earlier_tokens(medusa_head, target):
    _, hidden = last_row(target, [9, 8, 7])
    first = medusa_draft_chain(medusa_head, hidden, 3, 1.0, np.random.default_rng(0), forced=[1, 2, 3])
    second = medusa_draft_chain(medusa_head, hidden, 3, 1.0, np.random.default_rng(0), forced=[200, 2, 3])
    for a, b in zip(first.dists, second.dists):
        assert_array_equal(a, b)
    assert first.forward_passes == 1


def test_eagle_chain_depends_on_earlier_tokens(eagle_head, target):
    tokens = [9, 8, 7]
    _, hidden = target_forward(target, tokens)
    first = eagle_draft_chain(eagle_head, hidden, tokens, 2, 1.0, np.random.default_rng(0), forced=[1, 2])
    second = eagle_draft_chain(eagle_head, hidden, tokens, 2, 1.0, np.random.default_rng(0), forced=[200, 2])
    assert_array_equal(first.dists[0], second.dists[0])
    assert not np.allclose(first.dists[1], second.dists[1])
    assert first.forward_passes == 2
    assert first.tokens == [1, 2]


@pytest.mark.parametrize("kind", list(HeadKind))
def test_draft_chains_emit_valid_distributions(target, kind):
    head = tiny_head(target, kind, 2)
    _, hidden = last_row(target, [1, 2, 3])
    draft = head.draft_chain(hidden, 3, 3, 1.0, np.random.default_rng(0))
    assert len(draft.tokens) == len(draft.dists) == 3
    for dist in draft.dists:
        assert abs(dist.sum() - 1.0) < 1e-6
    greedy = head.draft_chain(hidden, 3, 3, 0.0, np.random.default_rng(1))
    assert greedy.tokens == head.draft_chain(hidden, 3, 3, 0.0, np.random.default_rng(2)).tokens


@pytest.mark.parametrize("kind", list(HeadKind))
def test_chain_must_draft_something(target, kind):
    head = tiny_head(target, kind, 1)
    with pytest.raises(ContractViolation):
        head.draft_chain(np.zeros(target.config.d_model), 1, 0, 0.0, np.random.default_rng(0))


@pytest.mark.parametrize("head_type", [MedusaHead, EagleHead])
def test_chain_logits_shape(target, rng, head_type):
    kind = HeadKind.medusa if head_type is MedusaHead else HeadKind.eagle
    head = tiny_head(target, kind, 1)
    hidden = Tensor(rng.normal(size=(4, target.config.d_model)).astype(np.float32))
    tokens = rng.integers(0, 256, size=(4, 3))
    with no_grad():
        logits = head.chain_logits(hidden, tokens)
    assert logits.shape == (4, 3, 256)
