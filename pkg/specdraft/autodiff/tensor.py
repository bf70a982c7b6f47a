import os
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from specdraft.errors import DomainError, GraphError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()
_debug = os.environ.get("SPECDRAFT_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """
    Turns on the finite-output check that every primitive runs after its forward pass.
    """
    global _debug
    _debug = enabled


class Tensor:
    """
    Dense row-major array with optional participation in the reverse-mode tape.

    Leaves (parameters, inputs) carry no tape; results of primitives that saw at least one
    input requiring grad are recorded on the thread's current tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, dtype: Any = None) -> None:
        if dtype is not None:
            array = np.ascontiguousarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            array = np.ascontiguousarray(data)
        else:
            array = np.ascontiguousarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operators delegate to the primitives module.
    def __add__(self, other: "Tensor") -> "Tensor":
        from specdraft.autodiff import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from specdraft.autodiff import ops

        return ops.add(self, ops.scale(other, -1.0))

    def __mul__(self, other: Any) -> "Tensor":
        from specdraft.autodiff import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from specdraft.autodiff import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from specdraft.autodiff import ops

        return ops.matmul(self, other)


class Node(NamedTuple):
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """
    Append-only record of the primitives run since the tape was opened.
    Append order is a valid topological order; backward walks it once, in reverse.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> Tape:
    """
    Discards whatever the current thread has recorded and opens a fresh tape.
    """
    _state.tape = Tape()
    return _state.tape


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    Wraps the forward result of a primitive and appends a node when any input requires grad.
    """
    if _debug and not np.all(np.isfinite(data)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise DomainError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if not is_grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    tape = current_tape()
    for t in inputs:
        if t._tape is not None and t._tape is not tape:
            raise GraphError(f"{op}: input was recorded on a previous tape; re-run the forward pass")
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """
    Reverse-mode sweep from a scalar loss. Gradients accumulate into leaf ``.grad``;
    leaves recorded on the tape but not on any path to the loss receive zeros.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    if tape is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape.consumed:
        raise GraphError("backward called twice on the same graph; re-run the forward pass first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._tape is None:
                leaves[id(inp)] = inp
    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        if grad_out is None:
            continue
        for inp, grad_in in zip(node.inputs, node.backward_fn(grad_out)):
            if grad_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + grad_in
            else:
                grads[key] = grad_in
    tape.consumed = True
    tape.nodes.clear()
    if getattr(_state, "tape", None) is tape:
        _state.tape = Tape()

    for key, leaf in leaves.items():
        contribution = grads.get(key)
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if contribution is not None:
            leaf.grad = leaf.grad + contribution.astype(leaf.dtype, copy=False)
