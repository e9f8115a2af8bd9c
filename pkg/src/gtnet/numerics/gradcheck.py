from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .nn import Parameter
from .tensor import Tensor, backward


class NondeterministicForward(RuntimeError):
    pass


def finite_difference_check(forward: Callable[[], Tensor], params: Sequence[Parameter],
                            epsilon: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``forward`` must rebuild the scalar loss from the current parameter values
    each call. The error per entry is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-12)``.
    """
    base = forward()
    again = forward()
    if base.data.tobytes() != again.data.tobytes():
        raise NondeterministicForward("two evaluations of the forward differ")

    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(forward())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(forward().data)
            flat[i] = orig - epsilon
            down = float(forward().data)
            flat[i] = orig
            cd = (up - down) / (2.0 * epsilon)
            a = float(gflat[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst
