from typing import List, Optional

import numpy as np

from specdraft.autodiff import ops
from specdraft.autodiff.nn import Linear, Module
from specdraft.autodiff.tensor import DEFAULT_DTYPE, Tensor
from specdraft.errors import ShapeError

MAX_FC_LAYERS = 3


def default_fc_layers(k: int) -> int:
    """Discriminator depth follows the head's layer count, clamped to [1, 3]."""
    return int(min(max(k, 1), MAX_FC_LAYERS))


class Discriminator(Module):
    """
    Judges whether a candidate next-token distribution came from the target.

    Input row: ``[hidden_map(hidden) | candidate log-probs | reference slot]``, each ``vocab`` wide.
    ``fc_layers`` fully connected layers with SiLU in between, then a sigmoid. The last layer is
    zero-initialised so a fresh discriminator answers exactly 0.5.
    """

    def __init__(
        self,
        d_model: int,
        vocab_size: int,
        fc_layers: int = 1,
        rng: Optional[np.random.Generator] = None,
        fc_width: Optional[int] = None,
        dtype: np.dtype = DEFAULT_DTYPE,
    ) -> None:
        super().__init__()
        if not 1 <= fc_layers <= MAX_FC_LAYERS:
            raise ValueError(f"fc_layers must lie in [1, {MAX_FC_LAYERS}], got {fc_layers}")
        self.d_model = d_model
        self.vocab_size = vocab_size
        width = fc_width or vocab_size
        self.hidden_map = Linear(d_model, vocab_size, rng, dtype=dtype)
        widths = [3 * vocab_size] + [width] * (fc_layers - 1) + [1]
        self.fc: List[Linear] = []
        for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == fc_layers - 1
            self.fc.append(Linear(d_in, d_out, rng, std=None if last else 0.02, dtype=dtype))

    @property
    def input_width(self) -> int:
        return 3 * self.vocab_size

    def score(self, hidden: Tensor, candidate_logits: Tensor, reference_logits: Optional[Tensor] = None) -> Tensor:
        """
        Probability (rows, 1) that each candidate row came from the target. Candidate and reference
        logits are normalised to log-probabilities; a missing reference is an all-zero slot.
        """
        mapped = self.hidden_map(hidden)
        candidate = ops.log_softmax(candidate_logits)
        if reference_logits is None:
            reference = Tensor(np.zeros(candidate.shape, dtype=candidate.dtype))
        else:
            reference = ops.log_softmax(reference_logits)
        return discriminate(self, mapped, candidate, reference)


def discriminate(disc: Discriminator, mapped_hidden: Tensor, candidate: Tensor, reference: Tensor) -> Tensor:
    for name, part in (("mapped_hidden", mapped_hidden), ("candidate", candidate), ("reference", reference)):
        if part.ndim != 2 or part.shape[-1] != disc.vocab_size:
            raise ShapeError("discriminate", part.shape, (mapped_hidden.shape[0], disc.vocab_size), detail=name)
    x = ops.concat([mapped_hidden, candidate, reference], axis=-1)
    for i, layer in enumerate(disc.fc):
        x = layer(x)
        if i < len(disc.fc) - 1:
            x = ops.silu(x)
    return ops.sigmoid(x)
