"""Dense float64 tensors with reverse-mode automatic differentiation.

Tape-based engine: each operation whose inputs require gradients records
its parent tensors and a vector-Jacobian callback on the output.
``backward`` walks the tape in reverse topological order and accumulates
gradients into every reachable tensor that requires them.  Repeated
backward calls without zeroing accumulate, so callers zero gradients
between optimizer steps.  Everything is float64 and single-threaded.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True
_node_ids = itertools.count()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float64 value, optionally on the backward tape.

    Leaf tensors created with ``requires_grad=True`` are trainable
    parameters; ``grad`` is populated by ``backward`` and has the same
    shape as ``data``.  ``mask`` is an optional binary array of the same
    shape used by pruning: coordinates with mask 0 are held at exactly 0
    by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "mask", "node_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.mask = None
        self.node_id = next(_node_ids)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    """Build an op output; record tape info only when gradients can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitive operations ---------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _make(data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if na else None,
                _unbroadcast(g * a.data, b.data.shape) if nb else None)

    return _make(data, (a, b), vjp)


def matmul(a, b):
    """Matrix product; batched over leading axes like ``np.matmul``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape) if na else None
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape) if nb else None
        return ga, gb

    return _make(data, (a, b), vjp)


def reshape(x, shape):
    x = _wrap(x)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), vjp)


def transpose(x, axes):
    x = _wrap(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(data, (x,), vjp)


def take(x, key):
    """Basic (non-repeating) indexing/slicing with scatter-add backward."""
    x = _wrap(x)
    data = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(data, (x,), vjp)


def tsum(x, axis=None, keepdims=False):
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(data, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}): "
                         f"min={ids.min()}, max={ids.max()}")
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), vjp)


def gelu(x):
    """Smooth GELU nonlinearity (tanh form)."""
    x = _wrap(x)
    need = _grad_enabled and x.requires_grad
    data, deriv = _kernels.gelu_fwd(x.data, need)

    def vjp(g):
        return (g * deriv,)

    return _make(data, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), "
                         f"got {gain.data.shape} and {bias.data.shape}")
    y2, xhat, inv = _kernels.layer_norm_fwd(x.data.reshape(-1, d), gain.data,
                                            bias.data, eps)
    data = y2.reshape(x.data.shape)

    def vjp(g):
        gx, ggain, gbias = _kernels.layer_norm_bwd(g.reshape(-1, d), xhat, inv,
                                                   gain.data)
        return gx.reshape(x.data.shape), ggain, gbias

    return _make(data, (x, gain, bias), vjp)


def softmax_rows(x):
    """Row-wise softmax over the last axis, stabilized by max subtraction.

    Each output row is nonnegative and sums to 1 within 1e-12.
    """
    x = _wrap(x)
    k = x.data.shape[-1]
    flat = x.data.reshape(-1, k)
    y2, finite = _kernels.softmax_fwd(flat)
    if not finite:
        raise NumericError("softmax input contains NaN")
    data = y2.reshape(x.data.shape)

    def vjp(g):
        gx = _kernels.softmax_bwd(g.reshape(-1, k), y2)
        return (gx.reshape(x.data.shape),)

    return _make(data, (x,), vjp)


def cross_entropy(logits, labels, weights=None):
    """Weighted mean negative log-likelihood of integer ``labels``.

    ``weights`` (nonnegative, one per row) default to all ones; the
    reduction divides by the weight sum, so it is the plain mean in the
    unweighted case.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects rank-2 logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ContractError(f"weights length {w.shape} does not match batch {n}")
        if (w < 0).any():
            raise ContractError("weights must be nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise ContractError("weight sum must be positive")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    nll = -logp[np.arange(n), labels]
    data = np.array((w * nll).sum() / wsum)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p * (w / wsum)[:, None],)

    return _make(data, (logits,), vjp)


def kl_divergence(target_probs, student_logits, weights=None):
    """Batch-mean KL(target || softmax(student_logits)).

    Targets are constants: gradients flow only into the student logits.
    Each target row must be a probability distribution (sum 1 within
    1e-6).  Optional nonnegative per-row weights change the reduction to
    a weighted mean.
    """
    target = _wrap(target_probs)
    logits = _wrap(student_logits)
    if target.ndim != 2 or logits.ndim != 2 or target.shape != logits.shape:
        raise ShapeError(f"kl_divergence expects matching rank-2 shapes, "
                         f"got {target.shape} and {logits.shape}")
    t = target.data
    if (t < 0).any():
        raise ContractError("target probabilities must be nonnegative")
    rowsum = t.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-6:
        raise ContractError(f"target rows must sum to 1 within 1e-6, "
                            f"worst deviation {np.abs(rowsum - 1.0).max():.3e}")
    n = t.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ContractError(f"weights length {w.shape} does not match batch {n}")
        if (w < 0).any():
            raise ContractError("weights must be nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise ContractError("weight sum must be positive")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    per_row = tlogt.sum(axis=1) - (t * logp).sum(axis=1)
    data = np.array((w * per_row).sum() / wsum)

    def vjp(g):
        p = np.exp(logp)
        grad = p * rowsum[:, None] - t
        return (None, g * grad * (w / wsum)[:, None])

    return _make(data, (target, logits), vjp)


# -- backward pass -----------------------------------------------------


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``loss`` must be a scalar.  Local gradients are recomputed per call,
    so calling backward twice without zeroing doubles leaf gradients.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # Accumulation is functional (acc + pg allocates) so vjps may alias
    # their incoming gradient without risk of cross-parent corruption.
    local = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            # local grads are never mutated after this point, so aliasing
            # is safe and avoids a zero-fill per tape node
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = local.get(id(parent))
            local[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params):
    for p in params:
        p.grad = None


# -- optimizer ---------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a fixed parameter list.

    Parameters carrying a binary ``mask`` keep masked coordinates at
    exactly 0: after every step the coordinate value and both moment
    buffers are zeroed there.
    """

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ContractError("betas must lie in (0, 1)")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        """Apply one decoupled weight-decay Adam update to all parameters."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ContractError("parameter has no gradient; run backward first")
            _kernels.adamw_update(p.data, p.grad, m, v, self.lr, self.weight_decay,
                                  self.beta1, self.beta2, self.eps, bc1, bc2)
            if p.mask is not None:
                dead = p.mask == 0
                p.data[dead] = 0.0
                m[dead] = 0.0
                v[dead] = 0.0
