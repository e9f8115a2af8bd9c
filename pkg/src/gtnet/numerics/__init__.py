"""Minimal numpy autodiff engine, layers, and optimiser."""
from .gradcheck import NondeterministicForward, finite_difference_check
from .nn import LBR, BatchNorm, Dropout, Linear, Module, Parameter
from .optim import CosineAnnealing, OptimizerConfig, cosine_annealing_lr, sgd_step
from .tensor import (
    NumericError,
    Tensor,
    add,
    backward,
    batch_norm,
    broadcast_to,
    concat,
    cross_entropy,
    dropout,
    gather,
    linear,
    matmul,
    max_,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
    swapaxes,
    unsqueeze,
)

__all__ = [name for name in dir() if not name.startswith("_")]
