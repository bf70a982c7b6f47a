from typing import Callable, NamedTuple, Optional

import numpy as np

from specdraft.autodiff.tensor import no_grad
from specdraft.errors import CorpusError, GraphError
from specdraft.models.target import TargetModel


class TrainBatch(NamedTuple):
    """
    Row ``r`` is one drafting context: ``hidden[r]`` is the frozen target's hidden state at the
    context's last row ``p``; ``tokens[r, j]`` is the token consumed at chain step ``j + 1`` (the
    corpus token at ``p + j + 1``); ``q_logits[r, j]`` is the target's logits at row ``p + j + 1``.
    """

    hidden: np.ndarray
    tokens: np.ndarray
    q_logits: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.hidden.shape[0])

    @property
    def positions(self) -> int:
        return int(self.tokens.shape[1])


def build_batch(
    target: TargetModel,
    windows: np.ndarray,
    positions: int,
    rng: np.random.Generator,
    starts_per_window: Optional[int] = None,
) -> TrainBatch:
    """
    Runs the frozen target over corpus ``windows`` (B, T) and aligns draft positions with target rows.
    """
    if not target.frozen:
        raise GraphError("draft-head batches must come from a frozen target")
    windows = np.asarray(windows, dtype=np.int64)
    batch, steps = windows.shape
    last_start = steps - 1 - positions
    if last_start < 0:
        raise CorpusError(f"windows of {steps} tokens are too short for {positions} draft positions")
    with no_grad():
        logits, hidden = target.forward_graph(windows)
    starts = np.arange(last_start + 1)
    if starts_per_window is not None and starts_per_window < starts.size:
        starts = np.sort(rng.choice(starts, size=starts_per_window, replace=False))
    b_index = np.repeat(np.arange(batch), starts.size)
    p_index = np.tile(starts, batch)
    ahead = p_index[:, None] + np.arange(1, positions + 1)[None, :]
    return TrainBatch(
        hidden=hidden.data[b_index, p_index],
        tokens=windows[b_index[:, None], ahead],
        q_logits=logits.data[b_index[:, None], ahead],
    )


def sample_windows(corpus: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    if corpus.size < seq_len:
        raise CorpusError(f"corpus of {corpus.size} bytes is shorter than a {seq_len}-byte window")
    offsets = rng.integers(0, corpus.size - seq_len + 1, size=batch_size)
    return corpus[offsets[:, None] + np.arange(seq_len)[None, :]].astype(np.int64)


def batch_sampler(
    target: TargetModel,
    corpus: np.ndarray,
    batch_size: int,
    seq_len: int,
    positions: int,
    rng: np.random.Generator,
    starts_per_window: Optional[int] = None,
) -> Callable[[], TrainBatch]:
    """Seeded stream of training batches; identical seeds give identical streams."""
    seq_len = min(seq_len, target.config.max_seq_len)

    def sample() -> TrainBatch:
        windows = sample_windows(corpus, batch_size, seq_len, rng)
        return build_batch(target, windows, positions, rng, starts_per_window)

    return sample
