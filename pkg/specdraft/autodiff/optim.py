from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from specdraft.autodiff.tensor import Tensor
from specdraft.errors import GraphError, MissingGradientError

NamedParams = Sequence[Tuple[str, Tensor]]


class OptimizerKind(str, Enum):
    sgd = "sgd"
    adam = "adam"


def clip_grad_norm(params: NamedParams, max_norm: float) -> float:
    """
    Rescales all gradients in place so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping.
    """
    grads = [p.grad for _, p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads]))) if grads else 0.0
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(factor)
    return total


class Optimizer:
    """
    Holds named parameters and updates them from their populated ``.grad``.
    Gradients are zeroed after every step.
    """

    kind: OptimizerKind

    def __init__(self, params: NamedParams, lr: float, clip_norm: Optional[float] = None) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params: List[Tuple[str, Tensor]] = list(params)
        self.lr = lr
        self.clip_norm = clip_norm
        frozen = [name for name, p in self.params if not p.requires_grad]
        if frozen:
            raise GraphError(f"cannot optimize frozen parameter(s): {', '.join(frozen)}")

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        missing = [name for name, p in self.params if p.grad is None]
        if missing:
            raise MissingGradientError(missing)
        if self.clip_norm:
            clip_grad_norm(self.params, self.clip_norm)
        self._update()
        self.zero_grad()

    def _update(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    kind = OptimizerKind.sgd

    def _update(self) -> None:
        for _, p in self.params:
            p.data -= p.dtype.type(self.lr) * p.grad


class Adam(Optimizer):
    kind = OptimizerKind.adam

    def __init__(
        self,
        params: NamedParams,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: Optional[float] = None,
    ) -> None:
        super().__init__(params, lr, clip_norm)
        if not (0 < betas[0] < 1 and 0 < betas[1] < 1):
            raise ValueError(f"adam betas must lie in (0, 1), got {betas}")
        if not eps > 0:
            raise ValueError(f"adam eps must be positive, got {eps}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.first_moment: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}
        self.second_moment: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}

    def _update(self) -> None:
        self.step_count += 1
        correction1 = 1 - self.beta1**self.step_count
        correction2 = 1 - self.beta2**self.step_count
        for name, p in self.params:
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * np.square(p.grad)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(kind: OptimizerKind, params: NamedParams, lr: float, clip_norm: Optional[float] = None) -> Optimizer:
    if kind == OptimizerKind.sgd:
        return SGD(params, lr=lr, clip_norm=clip_norm)
    if kind == OptimizerKind.adam:
        return Adam(params, lr=lr, clip_norm=clip_norm)
    raise GraphError(f"unknown optimizer kind {kind}")
