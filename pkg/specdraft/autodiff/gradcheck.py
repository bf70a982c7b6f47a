from typing import Callable, List, NamedTuple, Sequence

import numpy as np

from specdraft.autodiff.tensor import Tensor, backward, no_grad, reset_tape

RELATIVE_EPS = 1e-6


class GradCheckResult(NamedTuple):
    max_rel_error: float
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite differences of the scalar ``fn()`` with respect to every entry of ``tensor``.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, eps: float = RELATIVE_EPS) -> float:
    # Below eps both gradients count as zero and are compared absolutely.
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> GradCheckResult:
    """
    Compares tape gradients with central finite differences. Run at float64.
    """
    for t in inputs:
        t.grad = None
    reset_tape()
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    numeric = [numeric_grad(fn, t, h) for t in inputs]
    worst = max((relative_error(a, n) for a, n in zip(analytic, numeric)), default=0.0)
    return GradCheckResult(worst, analytic, numeric)
