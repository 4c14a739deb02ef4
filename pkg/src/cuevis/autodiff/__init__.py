"""Small reverse-mode autodiff kernel on numpy arrays."""
from cuevis.autodiff import ops
from cuevis.autodiff.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint, tensors_digest
from cuevis.autodiff.gradcheck import GradCheckReport, fd_check
from cuevis.autodiff.optim import Adam
from cuevis.autodiff.tensor import Graph, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "Graph",
    "GradCheckReport",
    "Tensor",
    "backward",
    "checkpoint_digest",
    "fd_check",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
    "tensors_digest",
]
