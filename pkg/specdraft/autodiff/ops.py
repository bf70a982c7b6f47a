"""
Differentiable primitives. Each primitive validates shapes, computes its forward result with numpy
and registers a backward rule on the current tape.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from specdraft.autodiff.tensor import Tensor, record
from specdraft.errors import DomainError, ShapeError

MASK_VALUE = -1e9


def _is_suffix(short: Tuple[int, ...], long: Tuple[int, ...]) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short) :]) == tuple(short)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    # Only trailing-suffix broadcasting (bias vectors, masks) is supported.
    if a.shape == b.shape or _is_suffix(b.shape, a.shape):
        return a.shape
    if _is_suffix(a.shape, b.shape):
        return b.shape
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor_ = a.dtype.type(factor)
    return record("scale", a.data * factor_, (a,), lambda g: (g * factor_,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    ``a`` is (..., n, k); ``b`` is either (k, m) or has the same leading batch dims as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return record("matmul", out, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def softmax(x: Tensor) -> Tensor:
    """Row-wise over the last axis."""
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError("softmax", x.shape)
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)
    return record("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError("log_softmax", x.shape)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return record("log_softmax", y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mean
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    x_hat = centred * inv_std
    out = x_hat * gamma.data + beta.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_hat = g * gamma.data
        grad_x = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        grad_gamma = (g * x_hat).reshape(-1, d).sum(axis=0)
        grad_beta = g.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    return record("layer_norm", out, (x, gamma, beta), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if weight.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", weight.shape, ids.shape, detail="needs a 2-D table and integer ids")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail="id out of range")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return record("embedding", weight.data[ids], (weight,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    ndim = tensors[0].ndim
    axis_ = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis_):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis_] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list:
        return list(np.split(g, splits, axis=axis_))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis_), tuple(tensors), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {float(x.data.min())})")
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2))
    return record("transpose", out, (x,), lambda g: (np.swapaxes(g, axis1, axis2),))


def take_rows(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    indices = np.asarray(indices)
    axis_ = axis % x.ndim
    if indices.size and (indices.min() < -x.shape[axis_] or indices.max() >= x.shape[axis_]):
        raise ShapeError("take_rows", x.shape, indices.shape, detail="index out of range")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis_, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis_, 0))
        return (grad,)

    return record("take_rows", np.take(x.data, indices, axis=axis_), (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def causal_mask(queries: int, keys: int, dtype: np.dtype) -> Tensor:
    """
    Additive mask for ``queries`` new positions appended after ``keys - queries`` cached ones.
    """
    offset = keys - queries
    allowed = np.arange(keys)[None, :] <= (np.arange(queries)[:, None] + offset)
    return Tensor(np.where(allowed, 0.0, MASK_VALUE).astype(dtype))


def causal_self_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    n_heads: int,
    past: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """
    Multi-head causal self-attention over ``x`` of shape (B, T, d), composed from the primitives above.
    ``past`` holds cached keys and values of shape (B, H, T_past, d/H). Returns the output and the
    extended key/value cache.
    """
    if x.ndim != 3:
        raise ShapeError("causal_self_attention", x.shape, detail="expects (batch, time, d_model)")
    batch, steps, d_model = x.shape
    if d_model % n_heads:
        raise ShapeError("causal_self_attention", x.shape, detail=f"d_model not divisible by {n_heads} heads")
    head_dim = d_model // n_heads
    qkv = add(matmul(x, w_qkv), b_qkv)

    def split(offset: int) -> Tensor:
        part = take_rows(qkv, np.arange(offset, offset + d_model), axis=2)
        return transpose(reshape(part, (batch, steps, n_heads, head_dim)), 1, 2)

    q, k, v = split(0), split(d_model), split(2 * d_model)
    if past is not None:
        k = concat([past[0], k], axis=2)
        v = concat([past[1], v], axis=2)
    total = k.shape[2]
    scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / np.sqrt(head_dim))
    weights = softmax(add(scores, causal_mask(steps, total, x.dtype)))
    context = reshape(transpose(matmul(weights, v), 1, 2), (batch, steps, d_model))
    return add(matmul(context, w_out), b_out), (k, v)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where the input was inside the range."""
    inside = (x.data >= low) & (x.data <= high)
    return record("clip", np.clip(x.data, low, high), (x,), lambda g: (g * inside,))
