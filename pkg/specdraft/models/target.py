import time
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from specdraft.autodiff import ops
from specdraft.autodiff.nn import DecoderBlock, Embedding, LayerNorm, Linear, Module
from specdraft.autodiff.optim import Optimizer
from specdraft.autodiff.tensor import Tensor, backward, reset_tape
from specdraft.errors import ContextOverflowError, CorpusError, DomainError, GraphError
from specdraft.log import get_logger
from specdraft.models.sampling import sample_token, softmax_rows
from specdraft.training.losses import cross_entropy

logger = get_logger()

BYTE_VOCAB = 256


class TargetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: PositiveInt = BYTE_VOCAB
    d_model: PositiveInt = 128
    n_layers: PositiveInt = 6
    n_heads: PositiveInt = 4
    max_seq_len: PositiveInt = 256
    ff_mult: PositiveInt = 4

    @model_validator(mode="after")
    def _check_shape(self) -> "TargetConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.vocab_size != BYTE_VOCAB:
            raise ValueError(f"the byte tokenizer needs vocab_size == {BYTE_VOCAB}, got {self.vocab_size}")
        return self


class TargetModel(Module):
    """
    Byte-level decoder-only transformer: token + learned positional embeddings, ``n_layers`` pre-norm
    blocks, final layer norm, and an LM head without bias. ``hidden`` always means the final-norm output.
    """

    def __init__(self, config: TargetConfig, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tok_emb = Embedding(config.vocab_size, config.d_model, rng)
        self.pos_emb = Embedding(config.max_seq_len, config.d_model, rng)
        self.layers = [
            DecoderBlock(config.d_model, config.n_heads, config.ff_mult, rng) for _ in range(config.n_layers)
        ]
        self.ln_f = LayerNorm(config.d_model)
        self.lm_head = Linear(config.d_model, config.vocab_size, rng, bias=False)

    def forward_graph(self, tokens: np.ndarray) -> Tuple[Tensor, Tensor]:
        """
        Differentiable batched forward over ``tokens`` of shape (B, T). Returns logits (B, T, V)
        and hidden states (B, T, d_model).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DomainError(f"forward_graph expects (batch, time) token ids, got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ContextOverflowError(tokens.shape[1], self.config.max_seq_len)
        x = ops.add(self.tok_emb(tokens), self.pos_emb(np.arange(tokens.shape[1])))
        for block in self.layers:
            x, _ = block(x)
        hidden = self.ln_f(x)
        return self.lm_head(hidden), hidden

    def session(self) -> "TargetSession":
        return TargetSession(self)


def _rowwise_linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    # A stack of (1, d) @ (d, e) products: each row is computed by the same call no matter how
    # many rows are processed together, so results are bitwise independent of batching.
    out = np.matmul(x[:, None, :], weight)[:, 0, :]
    return out + bias if bias is not None else out


def _layer_norm_rows(x: np.ndarray, norm: LayerNorm) -> np.ndarray:
    centred = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + x.dtype.type(norm.eps))
    return centred * inv_std * norm.weight.data + norm.bias.data


def _silu(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


class TargetSession:
    """
    Per-sequence KV cache over a frozen or training-time ``TargetModel``. ``extend`` runs one target
    forward over new tokens and returns their logits and hidden rows; ``truncate`` rolls the cache back.
    """

    def __init__(self, model: TargetModel) -> None:
        cfg = model.config
        self.model = model
        self.head_dim = cfg.d_model // cfg.n_heads
        shape = (cfg.n_layers, cfg.n_heads, cfg.max_seq_len, self.head_dim)
        dtype = model.lm_head.weight.dtype
        self.keys = np.zeros(shape, dtype=dtype)
        self.values = np.zeros(shape, dtype=dtype)
        self.length = 0

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise DomainError(f"cannot truncate a cache of length {self.length} to {length}")
        self.length = length

    def extend(self, tokens: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        model = self.model
        cfg = model.config
        tokens = np.asarray(tokens, dtype=np.int64)
        count = tokens.size
        if count == 0:
            raise DomainError("extend needs at least one token")
        if self.length + count > cfg.max_seq_len:
            raise ContextOverflowError(self.length + count, cfg.max_seq_len)
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise DomainError(f"token ids must lie in [0, {cfg.vocab_size})")
        start = self.length
        positions = np.arange(start, start + count)
        x = model.tok_emb.weight.data[tokens] + model.pos_emb.weight.data[positions]
        scale = 1.0 / np.sqrt(self.head_dim)
        for layer_index, block in enumerate(model.layers):
            qkv = _rowwise_linear(_layer_norm_rows(x, block.ln1), block.qkv.weight.data, block.qkv.bias.data)
            q, k, v = (part.reshape(count, cfg.n_heads, self.head_dim) for part in np.split(qkv, 3, axis=1))
            keys = self.keys[layer_index]
            values = self.values[layer_index]
            keys[:, start : start + count] = k.transpose(1, 0, 2)
            values[:, start : start + count] = v.transpose(1, 0, 2)
            context = np.empty((count, cfg.n_heads, self.head_dim), dtype=x.dtype)
            for i in range(count):
                visible = start + i + 1
                scores = np.matmul(keys[:, :visible], q[i][:, :, None])[:, :, 0] * x.dtype.type(scale)
                weights = softmax_rows(scores)
                context[i] = np.matmul(weights[:, None, :], values[:, :visible])[:, 0, :]
            x = x + _rowwise_linear(context.reshape(count, cfg.d_model), block.attn_out.weight.data, block.attn_out.bias.data)
            up = _silu(_rowwise_linear(_layer_norm_rows(x, block.ln2), block.ff_up.weight.data, block.ff_up.bias.data))
            x = x + _rowwise_linear(up, block.ff_down.weight.data, block.ff_down.bias.data)
        hidden = _layer_norm_rows(x, model.ln_f)
        logits = _rowwise_linear(hidden, model.lm_head.weight.data, None)
        self.length += count
        return logits, hidden


def target_forward(model: TargetModel, tokens: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    One causal forward over ``tokens``: logits (len, vocab) and hidden (len, d_model).
    """
    if len(tokens) < 1:
        raise DomainError("target_forward needs at least one token")
    if len(tokens) > model.config.max_seq_len:
        raise ContextOverflowError(len(tokens), model.config.max_seq_len)
    return model.session().extend(tokens)


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64; every row is a valid probability distribution."""
    return softmax_rows(np.asarray(logits, dtype=np.float64))


class Generation(NamedTuple):
    tokens: List[int]
    forward_passes: int
    truncated: bool
    step_seconds: List[float]


def generate_autoregressive(
    model: TargetModel,
    prompt: Sequence[int],
    max_new: int,
    temperature: float,
    rng: np.random.Generator,
) -> Generation:
    """
    Vanilla decoding: one target forward per generated token. On context overflow the window is
    truncated from the left to half the context and the result is flagged.
    """
    if not model.frozen:
        raise GraphError("generate_autoregressive needs a frozen target model")
    if len(prompt) < 1:
        raise DomainError("prompt must contain at least one token")
    limit = model.config.max_seq_len
    tokens = list(prompt)
    truncated = False
    session = model.session()
    pending = tokens
    if len(pending) > limit:
        pending = tokens[-limit:]
        truncated = True
    forwards = 0
    step_seconds: List[float] = []
    for _ in range(max_new):
        if session.length + len(pending) > limit:
            logger.warning(f"Context limit of {limit} reached, truncating from the left")
            session = model.session()
            pending = tokens[-(limit // 2) :]
            truncated = True
        started = time.perf_counter()
        logits, _ = session.extend(pending)
        token = sample_token(probs_from_logits(logits[-1:])[0], temperature, rng)
        step_seconds.append(time.perf_counter() - started)
        forwards += 1
        tokens.append(token)
        pending = [token]
    return Generation(tokens, forwards, truncated, step_seconds)


def sample_training_batch(
    corpus: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random windows of ``seq_len`` inputs and their next-byte targets.
    """
    if corpus.size < 2:
        raise CorpusError("corpus needs at least two bytes to form a training pair")
    seq_len = min(seq_len, corpus.size - 1)
    offsets = rng.integers(0, corpus.size - seq_len, size=batch_size)
    window = offsets[:, None] + np.arange(seq_len + 1)[None, :]
    sequences = corpus[window].astype(np.int64)
    return sequences[:, :-1], sequences[:, 1:]


def train_target(
    model: TargetModel,
    corpus: np.ndarray,
    steps: int,
    batch_size: int,
    seq_len: int,
    optimizer: Optimizer,
    rng: np.random.Generator,
) -> List[float]:
    """
    Next-byte cross-entropy training. The model is frozen on return, whatever the step count.
    """
    if model.frozen:
        raise GraphError("target model is frozen and cannot be trained")
    if corpus.size == 0:
        raise CorpusError("cannot train on an empty corpus")
    seq_len = min(seq_len, model.config.max_seq_len)
    losses: List[float] = []
    with logging_redirect_tqdm(loggers=[logger]):
        for step in tqdm(range(steps), unit="step", disable=steps == 0):
            inputs, targets = sample_training_batch(corpus, batch_size, seq_len, rng)
            reset_tape()
            optimizer.zero_grad()
            logits, _ = model.forward_graph(inputs)
            loss = cross_entropy(logits, targets)
            if not np.isfinite(loss.item()):
                raise DomainError(f"non-finite target loss at step {step}")
            backward(loss)
            optimizer.step()
            losses.append(loss.item())
            if step % 100 == 0:
                logger.debug(f"target step {step}: loss {losses[-1]:.4f}")
    model.freeze()
    return losses
