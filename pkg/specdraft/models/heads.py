"""
Draft heads: multi-layer Medusa-style (non-autoregressive) and EAGLE-style (feature-level
autoregressive) models that read the target's last hidden state and propose a chain of tokens.
"""
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

from specdraft.autodiff import ops
from specdraft.autodiff.nn import DecoderBlock, Embedding, KVCache, Linear, Module, ResBlock
from specdraft.autodiff.tensor import DEFAULT_DTYPE, Tensor, no_grad
from specdraft.errors import ContractViolation, ShapeError
from specdraft.log import get_logger
from specdraft.models.sampling import draw, softmax_rows
from specdraft.models.target import BYTE_VOCAB, TargetModel

logger = get_logger()

SHIPPED_K = (1, 2, 3)


class HeadKind(str, Enum):
    medusa = "medusa"
    eagle = "eagle"


class HeadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: HeadKind = HeadKind.eagle
    k: PositiveInt = 1
    medusa_num_heads: PositiveInt = 3
    d_model: PositiveInt = 128
    vocab_size: PositiveInt = BYTE_VOCAB
    draft_len: PositiveInt = 3
    n_heads: PositiveInt = 4
    ff_mult: PositiveInt = 4
    allow_any_k: bool = False

    @model_validator(mode="after")
    def _check_head(self) -> "HeadConfig":
        if self.k not in SHIPPED_K and not self.allow_any_k:
            raise ValueError(f"k must be one of {list(SHIPPED_K)} (got {self.k}); set allow_any_k to override")
        if self.kind == HeadKind.medusa and self.draft_len > self.medusa_num_heads:
            raise ValueError(
                f"medusa draft_len ({self.draft_len}) cannot exceed medusa_num_heads ({self.medusa_num_heads})"
            )
        if self.kind == HeadKind.eagle and self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self


class DraftResult(NamedTuple):
    tokens: List[int]
    dists: List[np.ndarray]
    features: Optional[List[np.ndarray]]
    forward_passes: int


def _check_chain(t: int, forced: Optional[Sequence[int]]) -> None:
    if t < 1:
        raise ContractViolation(f"draft length must be at least 1, got {t}")
    if forced is not None and len(forced) < t:
        raise ContractViolation(f"{len(forced)} forced token(s) supplied for a chain of {t}")


def _pick(
    logits: np.ndarray, step: int, temperature: float, rng: np.random.Generator, forced: Optional[Sequence[int]]
) -> tuple[int, np.ndarray]:
    dist = softmax_rows(np.asarray(logits, dtype=np.float64))
    token, used = draw(dist, temperature, rng)
    if forced is not None:
        token = int(forced[step])
    return token, used


class DraftHead(Module):
    config: HeadConfig

    @property
    def train_positions(self) -> int:
        """Number of chain positions distilled per training row."""
        raise NotImplementedError

    def chain_logits(self, hidden: Tensor, tokens: np.ndarray) -> Tensor:
        """
        Differentiable chain forward for training. ``hidden`` holds context hidden states (R, d_model);
        ``tokens`` (R, P) holds the token consumed at each chain step (pending token first).
        Returns draft logits (R, P, vocab).
        """
        raise NotImplementedError

    def draft_chain(
        self,
        hidden: np.ndarray,
        token: int,
        t: int,
        temperature: float,
        rng: np.random.Generator,
        forced: Optional[Sequence[int]] = None,
    ) -> DraftResult:
        raise NotImplementedError

    def param_count(self) -> int:
        return int(sum(p.size for _, p in self.trainable_parameters()))

    def _check_hidden(self, hidden: np.ndarray) -> np.ndarray:
        hidden = np.asarray(hidden)
        if hidden.shape[-1] != self.config.d_model:
            raise ShapeError(type(self).__name__, hidden.shape, (self.config.d_model,), detail="d_model mismatch")
        return hidden


class MedusaLogicalHead(Module):
    def __init__(self, d_model: int, vocab_size: int, k: int, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.blocks = [ResBlock(d_model, dtype=dtype) for _ in range(k)]
        self.proj = Linear(d_model, vocab_size, std=None, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.proj(x)


class MedusaHead(DraftHead):
    """
    ``medusa_num_heads`` logical heads, each ``K x ResBlock -> Linear``. Head ``j`` predicts the
    ``j``-th token after the pending token, all from the same hidden state.
    """

    def __init__(self, config: HeadConfig, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.config = config
        self.heads = [
            MedusaLogicalHead(config.d_model, config.vocab_size, config.k, dtype) for _ in range(config.medusa_num_heads)
        ]

    @classmethod
    def from_target(cls, config: HeadConfig, target: TargetModel) -> "MedusaHead":
        """Projections start as copies of the target LM head; the ResBlock stacks start as the identity."""
        head = cls(config, dtype=target.lm_head.weight.dtype)
        for logical in head.heads:
            logical.proj.weight.data = target.lm_head.weight.data.copy()
        return head

    @property
    def train_positions(self) -> int:
        return self.config.medusa_num_heads

    def chain_logits(self, hidden: Tensor, tokens: np.ndarray) -> Tensor:
        positions = np.asarray(tokens).shape[1]
        if positions > len(self.heads):
            raise ContractViolation(f"{positions} chain positions requested from {len(self.heads)} medusa heads")
        per_head = [self.heads[j](hidden) for j in range(positions)]
        rows = hidden.shape[0]
        stacked = ops.concat([ops.reshape(logits, (rows, 1, -1)) for logits in per_head], axis=1)
        return stacked

    def draft_chain(
        self,
        hidden: np.ndarray,
        token: int,
        t: int,
        temperature: float,
        rng: np.random.Generator,
        forced: Optional[Sequence[int]] = None,
    ) -> DraftResult:
        _check_chain(t, forced)
        return medusa_draft_chain(self, hidden, t, temperature, rng, forced)


def medusa_forward(head: MedusaHead, hidden_n: np.ndarray) -> List[np.ndarray]:
    """One distribution per logical head, all computed from ``hidden_n``."""
    hidden_n = head._check_hidden(hidden_n).reshape(1, -1)
    with no_grad():
        x = Tensor(hidden_n.astype(head.heads[0].proj.weight.dtype))
        return [softmax_rows(logical(x).data.astype(np.float64))[0] for logical in head.heads]


def medusa_draft_chain(
    head: MedusaHead,
    hidden_n: np.ndarray,
    t: int,
    temperature: float,
    rng: np.random.Generator,
    forced: Optional[Sequence[int]] = None,
) -> DraftResult:
    _check_chain(t, forced)
    if t > len(head.heads):
        raise ContractViolation(f"medusa chain of {t} needs {t} heads, this head has {len(head.heads)}")
    hidden_n = head._check_hidden(hidden_n).reshape(1, -1)
    tokens: List[int] = []
    dists: List[np.ndarray] = []
    with no_grad():
        x = Tensor(hidden_n.astype(head.heads[0].proj.weight.dtype))
        for j in range(t):
            token, used = _pick(head.heads[j](x).data[0], j, temperature, rng, forced)
            tokens.append(token)
            dists.append(used)
    return DraftResult(tokens, dists, None, forward_passes=1)


class EagleHead(DraftHead):
    """
    ``Embedding -> fusion Linear -> K x DecoderLayer -> LM Head``. Each step fuses the embedding of
    the previous token with the previous feature; the LM head is the target's own, kept frozen.
    """

    def __init__(self, config: HeadConfig, target: TargetModel, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if target.config.d_model != config.d_model:
            raise ShapeError("EagleHead", (target.config.d_model,), (config.d_model,), detail="d_model mismatch")
        dtype = target.lm_head.weight.dtype
        d = config.d_model
        self.config = config
        self.embedding = Embedding(config.vocab_size, d, dtype=dtype)
        self.embedding.weight.data = target.tok_emb.weight.data.copy()
        self.fusion = Linear(2 * d, d, bias=False, std=None, dtype=dtype)
        # [0 | I]: the fused feature starts as the incoming hidden state
        self.fusion.weight.data[d:, :] = np.eye(d, dtype=dtype)
        self.layers = [
            DecoderBlock(d, config.n_heads, config.ff_mult, rng, identity_init=True, dtype=dtype) for _ in range(config.k)
        ]
        self._lm_head = target.lm_head

    @property
    def lm_head(self) -> Linear:
        return self._lm_head

    @property
    def train_positions(self) -> int:
        return self.config.draft_len

    def step(self, token_ids: np.ndarray, feature: Tensor, caches: Optional[List[KVCache]]) -> tuple[Tensor, List[KVCache]]:
        """
        One chain step over R rows: ``token_ids`` (R,), ``feature`` (R, d). Returns the predicted
        feature (R, d) and the per-layer caches extended by this step.
        """
        rows = feature.shape[0]
        fused = self.fusion(ops.concat([self.embedding(np.asarray(token_ids)), feature], axis=-1))
        x = ops.reshape(fused, (rows, 1, self.config.d_model))
        new_caches: List[KVCache] = []
        for i, layer in enumerate(self.layers):
            x, cache = layer(x, None if caches is None else caches[i])
            new_caches.append(cache)
        return ops.reshape(x, (rows, self.config.d_model)), new_caches

    def chain_logits(self, hidden: Tensor, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        rows, positions = tokens.shape
        feature = hidden
        caches: Optional[List[KVCache]] = None
        logits = []
        for j in range(positions):
            feature, caches = self.step(tokens[:, j], feature, caches)
            logits.append(ops.reshape(self.lm_head(feature), (rows, 1, -1)))
        return ops.concat(logits, axis=1)

    def draft_chain(
        self,
        hidden: np.ndarray,
        token: int,
        t: int,
        temperature: float,
        rng: np.random.Generator,
        forced: Optional[Sequence[int]] = None,
    ) -> DraftResult:
        return eagle_draft_chain(self, hidden, [token], t, temperature, rng, forced)


def eagle_draft_chain(
    head: EagleHead,
    target_hidden: np.ndarray,
    context_tokens: Sequence[int],
    t: int,
    temperature: float,
    rng: np.random.Generator,
    forced: Optional[Sequence[int]] = None,
) -> DraftResult:
    """
    Drafts ``t`` tokens after the last context token. Step 1 fuses that token with the last target
    hidden row; step ``j`` fuses the step ``j-1`` token with the step ``j-1`` predicted feature.
    """
    _check_chain(t, forced)
    if len(context_tokens) < 1:
        raise ContractViolation("eagle drafting needs at least one context token")
    target_hidden = head._check_hidden(target_hidden)
    last_hidden = target_hidden.reshape(-1, head.config.d_model)[-1:]
    dtype = head.lm_head.weight.dtype
    tokens: List[int] = []
    dists: List[np.ndarray] = []
    features: List[np.ndarray] = []
    with no_grad():
        feature = Tensor(last_hidden.astype(dtype))
        previous = int(context_tokens[-1])
        caches: Optional[List[KVCache]] = None
        for j in range(t):
            feature, caches = head.step(np.array([previous]), feature, caches)
            token, used = _pick(head.lm_head(feature).data[0], j, temperature, rng, forced)
            tokens.append(token)
            dists.append(used)
            features.append(feature.data[0].copy())
            previous = token
    return DraftResult(tokens, dists, features, forward_passes=t)


def build_head(
    config: HeadConfig, target: TargetModel, rng: Optional[np.random.Generator] = None
) -> DraftHead:
    if config.d_model != target.config.d_model:
        raise ShapeError("build_head", (config.d_model,), (target.config.d_model,), detail="d_model mismatch")
    if config.kind == HeadKind.medusa:
        return MedusaHead.from_target(config, target)
    return EagleHead(config, target, rng)


def decoder_layer_params(d_model: int, ff_mult: int) -> int:
    hidden = ff_mult * d_model
    norms = 2 * (2 * d_model)
    attention = (d_model * 3 * d_model + 3 * d_model) + (d_model * d_model + d_model)
    feedforward = (d_model * hidden + hidden) + (hidden * d_model + d_model)
    return norms + attention + feedforward


def param_count(config: HeadConfig) -> int:
    """
    Trainable parameters of a head built from ``config``; the EAGLE LM head is frozen and excluded.
    """
    d, vocab = config.d_model, config.vocab_size
    if config.kind == HeadKind.medusa:
        per_head = config.k * (d * d + d) + d * vocab + vocab
        return config.medusa_num_heads * per_head
    return vocab * d + 2 * d * d + config.k * decoder_layer_params(d, config.ff_mult)
