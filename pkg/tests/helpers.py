"""Shared test utilities."""
import numpy as np

from gtnet.attention import LocalBlock
from gtnet.numerics import LBR, backward


def structurally_zero(module):
    """Names of parameters whose true gradient is identically zero.

    * a local block's query weights: the query is constant along the neighbour
      axis and the per-channel softmax over that axis cancels it;
    * the bias of a linear layer feeding training-mode batch norm: the batch
      mean subtraction removes any constant shift.
    """
    names = set()
    for prefix, m in module.named_modules():
        dot = f"{prefix}." if prefix else ""
        if isinstance(m, LocalBlock):
            names.add(f"{dot}w_ql.weight")
        if isinstance(m, LBR) and m.bn.training:
            names.add(f"{dot}linear.bias")
    return names


def split_params(module):
    """(parameters to finite-difference check, structurally zero parameters)."""
    zero = structurally_zero(module)
    checked, skipped = [], []
    for name, p in module.named_parameters():
        (skipped if name in zero else checked).append(p)
    return checked, skipped


def max_grad(forward, params):
    """Largest |analytic gradient| over ``params`` for one backward pass."""
    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(forward())
    return max((float(np.abs(p.grad).max()) for p in params), default=0.0)
