"""Minimal autodiff engine and the calibration network built on it."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .network import (
    ARCHS,
    ArchConfig,
    ForwardPass,
    Network,
    TeacherSnapshot,
    cosine_head_forward,
    make_arch,
)
from .optim import DEFAULT_LR, DivergenceError, OptimizerState, plateau_update, sgd_step
from .tensor import DegenerateFeatureError, Tensor, no_grad, smooth_l1


def forward(net, batch) -> ForwardPass:
    return net.forward(batch)


def backward(net, loss) -> dict:
    """Clear accumulated gradients, backpropagate ``loss``, return grads by name."""
    if not loss.has_graph:
        raise RuntimeError("missing forward cache: loss was not computed with gradient tracking")
    net.zero_grad()
    loss.backward()
    return {k: (p.grad if p.grad is not None else p.data * 0) for k, p in net.params.items()}


__all__ = [
    "ARCHS",
    "ArchConfig",
    "Checkpoint",
    "CheckpointError",
    "DEFAULT_LR",
    "DegenerateFeatureError",
    "DivergenceError",
    "ForwardPass",
    "Network",
    "OptimizerState",
    "TeacherSnapshot",
    "Tensor",
    "backward",
    "cosine_head_forward",
    "forward",
    "grad_check",
    "load_checkpoint",
    "make_arch",
    "no_grad",
    "plateau_update",
    "save_checkpoint",
    "sgd_step",
    "smooth_l1",
]
