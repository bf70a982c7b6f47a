from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from specdraft.autodiff import ops
from specdraft.autodiff.tensor import DEFAULT_DTYPE, Tensor
from specdraft.errors import GraphError, ShapeError
from specdraft.util import arrays_digest

KVCache = Tuple[Tensor, Tensor]


class Module:
    """
    Minimal container: attributes that are ``Tensor`` parameters or sub-``Module``s
    (directly or inside lists) are discovered in attribute definition order.
    """

    def __init__(self) -> None:
        self._frozen = False

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]

    def requires_grad_(self, enabled: bool) -> "Module":
        if enabled and self._frozen:
            raise GraphError(f"{type(self).__name__} is frozen")
        for _, p in self.named_parameters():
            p.requires_grad = enabled
        return self

    def freeze(self) -> "Module":
        self.requires_grad_(False)
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if self._frozen:
            raise GraphError(f"{type(self).__name__} is frozen; its weights cannot be replaced")
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError("load_state_dict", detail=f"missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise ShapeError("load_state_dict", p.shape, state[name].shape, detail=name)
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)

    def weights_digest(self) -> str:
        return arrays_digest((name, p.data) for name, p in self.named_parameters())

    def astype(self, dtype: np.dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(data: np.ndarray, dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ weight (+ bias)`` with ``weight`` stored as (in, out)."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
        std: Optional[float] = 0.02,
        dtype: np.dtype = DEFAULT_DTYPE,
    ) -> None:
        super().__init__()
        if std is None or rng is None:
            weight = np.zeros((d_in, d_out))
        else:
            weight = rng.normal(0.0, std, size=(d_in, d_out))
        self.weight = _param(weight, dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        return ops.add(out, self.bias) if self.bias is not None else out

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class LayerNorm(Module):
    def __init__(self, d_model: int, eps: float = 1e-5, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.weight = _param(np.ones(d_model), dtype)
        self.bias = _param(np.zeros(d_model), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(
        self, num: int, d_model: int, rng: Optional[np.random.Generator] = None, std: float = 0.02, dtype=DEFAULT_DTYPE
    ) -> None:
        super().__init__()
        table = rng.normal(0.0, std, size=(num, d_model)) if rng is not None else np.zeros((num, d_model))
        self.weight = _param(table, dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.weight, ids)


class ResBlock(Module):
    """
    ``x <- x + SiLU(W x + b)``. Zero-initialised, so a freshly built stack is the identity.
    """

    def __init__(self, d_model: int, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.linear = Linear(d_model, d_model, std=None, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, ops.silu(self.linear(x)))


class DecoderBlock(Module):
    """
    Pre-norm transformer block: ``x + attn(ln1(x))`` then ``x + ff(ln2(x))`` with a SiLU feedforward.
    ``identity_init`` zeroes both residual output projections so the block starts as the identity.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        ff_mult: int,
        rng: Optional[np.random.Generator] = None,
        identity_init: bool = False,
        dtype: np.dtype = DEFAULT_DTYPE,
    ) -> None:
        super().__init__()
        if d_model % n_heads:
            raise ShapeError("DecoderBlock", (d_model,), (n_heads,), detail="d_model must be divisible by n_heads")
        out_std = None if identity_init else 0.02
        self.n_heads = n_heads
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.qkv = Linear(d_model, 3 * d_model, rng, dtype=dtype)
        self.attn_out = Linear(d_model, d_model, rng, std=out_std, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.ff_up = Linear(d_model, ff_mult * d_model, rng, dtype=dtype)
        self.ff_down = Linear(ff_mult * d_model, d_model, rng, std=out_std, dtype=dtype)

    def __call__(self, x: Tensor, past: Optional[KVCache] = None) -> Tuple[Tensor, KVCache]:
        attended, cache = ops.causal_self_attention(
            self.ln1(x),
            self.qkv.weight,
            self.qkv.bias,
            self.attn_out.weight,
            self.attn_out.bias,
            self.n_heads,
            past,
        )
        x = ops.add(x, attended)
        x = ops.add(x, self.ff_down(ops.silu(self.ff_up(self.ln2(x)))))
        return x, cache
