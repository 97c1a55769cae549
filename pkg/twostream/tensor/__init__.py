from twostream.tensor.tensor_base import Graph, Tensor, backward, grad_enabled, no_grad

__all__ = ["Graph", "Tensor", "backward", "grad_enabled", "no_grad"]
