"""Shared test oracles."""
import numpy as np

from tatdet import tensor as T
from tatdet.tensor import Tensor, max_relative_error, numerical_gradient


def grad_check(fn, arrays, eps=1e-5, weights_seed=0):
    """Compare backward() against central differences for every input array.

    ``fn`` maps tensors to a tensor; non-scalar outputs are reduced with a fixed
    random weighting so every output entry participates.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = None
    if out.size != 1:
        w = np.random.default_rng(weights_seed).normal(size=out.shape)

    def scalar(o):
        return T.tsum(T.mul(o, w)) if w is not None else T.tsum(o)

    scalar(out).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def value():
            with T.no_grad():
                return scalar(fn(*[Tensor(x) for x in arrays])).item()

        num = numerical_gradient(value, a, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, max_relative_error(ana, num))
    return worst
