"""Central finite differences, kept independent of the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape

# entries whose gradients are smaller than this are compared absolutely
REL_FLOOR = 1e-4


def numerical_gradient(fn, array, step=1e-5):
    """d fn() / d array by central differences; ``array`` is perturbed in place and restored."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fn()
        flat[k] = orig - step
        down = fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=REL_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(loss_fn, tensors, step=1e-5):
    """Compare tape gradients of ``loss_fn()`` against finite differences.

    ``loss_fn`` builds a scalar tensor from ``tensors`` (which must have
    ``requires_grad=True``).  Returns ``{index: max relative error}``.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)

    def scalar():
        with no_tape():
            return float(loss_fn().data)

    errors = {}
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(scalar, t.data, step)
        errors[k] = relative_error(analytic, numeric)
    return errors


def leaf(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
