"""Finite-difference utilities for checking analytic gradients.

The checker perturbs every coordinate of the designated leaf tensors with
central differences and compares against the gradients produced by the
reverse-mode tape.  It never inspects the tape itself, only forward
evaluations, so it stays independent of the code path it validates.
"""

import numpy as np

from .tensor import Tensor, backward, zero_grads


def numerical_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fplus = float(f(x))
        flat[i] = orig - h
        fminus = float(f(x))
        flat[i] = orig
        gflat[i] = (fplus - fminus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """Max coordinate discrepancy normalized by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build_loss, leaves, h=1e-5):
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` must construct and return a scalar loss Tensor from the
    current values of ``leaves`` (a list of requires_grad Tensors).
    Returns the worst relative error across all leaves.
    """
    zero_grads(leaves)
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = np.array(leaf.grad)
        original = leaf.data

        def freval(arr, _leaf=leaf):
            _leaf.data = arr
            return build_loss().item()

        numeric = numerical_gradient(freval, original, h=h)
        leaf.data = original
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def param_tensor(rng, shape, scale=1.0):
    """Random requires_grad leaf, standard normal scaled by ``scale``."""
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
