from specdraft.autodiff.tensor import Tensor, backward, no_grad, reset_tape

__all__ = ["Tensor", "backward", "no_grad", "reset_tape"]
