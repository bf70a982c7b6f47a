import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from specdraft.autodiff import ops
from specdraft.autodiff.gradcheck import check_gradients, relative_error
from specdraft.autodiff.nn import DecoderBlock, Linear, ResBlock
from specdraft.autodiff.optim import SGD, Adam, OptimizerKind, clip_grad_norm, make_optimizer
from specdraft.autodiff.tensor import Tensor, backward, no_grad, reset_tape
from specdraft.errors import DomainError, GraphError, MissingGradientError, ShapeError
from specdraft.oracles import gradients

PRIMITIVES = [
    "add",
    "mul",
    "scale",
    "matmul",
    "sigmoid",
    "silu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "concat",
    "log",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take_rows",
    "clip",
    "causal_self_attention",
]


def leaf(values, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def test_forward_values():
    assert_allclose(ops.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    assert ops.sigmoid(Tensor(np.zeros(1))).item() == 0.5
    assert_array_equal(ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))).data, np.full((2, 2), 3.0))


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as err:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert err.value.primitive == "matmul"
    assert err.value.shapes == [(2, 3), (4, 2)]


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(DomainError):
        ops.log(Tensor(np.array([1.0, 0.0])))


def test_square_gradient():
    reset_tape()
    x = leaf([3.0])
    backward(ops.sum(ops.mul(x, x)))
    assert_allclose(x.grad, [6.0])


def test_softmax_sum_has_zero_gradient():
    reset_tape()
    x = leaf([[0.3, -1.2, 2.0]])
    backward(ops.sum(ops.softmax(x)))
    assert_allclose(x.grad, np.zeros((1, 3)), atol=1e-12)


def test_leaf_off_the_loss_path_gets_zero_gradient():
    reset_tape()
    x = leaf([1.0, 2.0])
    unused = leaf([5.0])
    ops.scale(unused, 2.0)
    backward(ops.sum(ops.mul(x, x)))
    assert_array_equal(unused.grad, [0.0])


def test_second_backward_needs_a_new_forward():
    reset_tape()
    x = leaf([1.0, 2.0])
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_needs_a_scalar():
    reset_tape()
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        backward(ops.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = ops.mul(x, x)
    assert not y.requires_grad
    assert y.is_leaf


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(2, 5)))
    w = rng.normal(size=(2, 5))

    def grads(a: float, b: float) -> np.ndarray:
        x.grad = None
        reset_tape()
        first = ops.sum(ops.mul(ops.softmax(x), Tensor(w)))
        second = ops.sum(ops.silu(x))
        backward(ops.add(ops.scale(first, a), ops.scale(second, b)))
        return x.grad.copy()

    assert_allclose(grads(2.0, -3.0), 2.0 * grads(1.0, 0.0) - 3.0 * grads(0.0, 1.0), atol=1e-9)


@pytest.mark.parametrize("primitive", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(primitive):
    result = gradients(cases=3, seed=11, primitives=[primitive])
    assert result.passed, result.counterexample


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    layers = [Linear(4, 6, rng, std=0.5, dtype=np.float64), Linear(6, 6, rng, std=0.5, dtype=np.float64)]
    head = Linear(6, 1, rng, std=0.5, dtype=np.float64)
    x = Tensor(rng.normal(size=(3, 4)))

    def loss() -> Tensor:
        h = x
        for layer in layers:
            h = ops.silu(layer(h))
        return ops.sum(head(h))

    params = [p for layer in [*layers, head] for _, p in layer.named_parameters()]
    assert check_gradients(loss, params).passed()


def test_resblock_and_identity_decoder_block_start_as_identity(rng):
    x = Tensor(rng.normal(size=(1, 3, 8)).astype(np.float32))
    assert_array_equal(ResBlock(8)(x).data, x.data)
    out, _ = DecoderBlock(8, 2, 2, rng, identity_init=True)(x)
    assert_array_equal(out.data, x.data)


def test_frozen_module_refuses_training():
    layer = Linear(2, 2).freeze()
    with pytest.raises(GraphError):
        layer.requires_grad_(True)
    with pytest.raises(GraphError):
        layer.load_state_dict(layer.state_dict())
    with pytest.raises(GraphError):
        SGD(layer.named_parameters(), lr=0.1)


def test_sgd_step():
    p = leaf([1.0])
    p.grad = np.array([2.0])
    SGD([("p", p)], lr=0.1).step()
    assert_allclose(p.data, [0.8])
    assert_array_equal(p.grad, [0.0])


def test_zero_gradient_leaves_parameters_unchanged():
    p = leaf([1.0, -1.0])
    p.grad = np.zeros(2)
    Adam([("p", p)], lr=0.1).step()
    assert_array_equal(p.data, [1.0, -1.0])


def test_adam_first_step_moves_by_learning_rate():
    p = leaf([0.0])
    p.grad = np.array([1.0])
    Adam([("p", p)], lr=1e-3).step()
    assert_allclose(p.data, [-1e-3], rtol=1e-4)


def test_missing_gradient_names_the_parameter():
    p = leaf([1.0])
    with pytest.raises(MissingGradientError) as err:
        make_optimizer(OptimizerKind.sgd, [("layer.weight", p)], lr=0.1).step()
    assert err.value.names == ["layer.weight"]


def test_clip_grad_norm():
    p = leaf([0.0, 0.0])
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([("p", p)], 1.0) == pytest.approx(5.0)
    assert_allclose(np.linalg.norm(p.grad), 1.0, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(min_value=1, max_value=4),
    cols=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_softmax_rows_are_distributions(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=10.0, size=(rows, cols))
    y = ops.softmax(Tensor(x)).data
    assert np.all((y >= 0) & (y <= 1))
    assert_allclose(y.sum(axis=-1), np.ones(rows), atol=1e-6)


def test_relative_error_scales_with_small_gradients():
    assert relative_error(np.array([1e-3]), np.array([1.1e-3])) == pytest.approx(0.1 / 1.1)
    assert relative_error(np.array([2.0, -4.0]), np.array([2.0, -4.4])) == pytest.approx(0.4 / 4.4)


def test_relative_error_compares_vanishing_gradients_absolutely():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-6)
    assert relative_error(np.array([]), np.array([])) == 0.0


def test_wrong_gradient_of_a_small_function_is_caught():
    x = Tensor(np.array([[0.3, -0.2]]), requires_grad=True, dtype=np.float64)
    result = check_gradients(lambda: ops.sum(ops.scale(x, 1e-5)), [x])
    assert result.passed()
    result.analytic[0][...] *= 1.5
    assert relative_error(result.analytic[0], result.numeric[0]) > 1e-4
