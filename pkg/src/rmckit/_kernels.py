"""Fused elementwise kernels for the hot training path.

Each kernel has a plain numpy fallback; when numba is importable the
jitted versions (serial loops, cached) are used instead.  Results are
deterministic for a fixed backend; the numpy and numba paths may differ
in the last bits because of summation order, which is why tests validate
through the public ops rather than comparing backends.
"""

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in dev env
    HAVE_NUMBA = False


def _gelu_fwd_np(x, need_deriv):
    c = math.sqrt(2.0 / math.pi)
    sq = x * x
    t = np.tanh(c * (x + 0.044715 * (sq * x)))
    y = 0.5 * x * (1.0 + t)
    if not need_deriv:
        return y, None
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (c * (1.0 + 3 * 0.044715 * sq))
    return y, deriv


def _softmax_fwd_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(g, y):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def _layer_norm_bwd_np(g, xhat, inv, gain):
    gbias = g.sum(axis=0)
    ggain = (g * xhat).sum(axis=0)
    gh = g * gain
    gx = inv[:, None] * (gh - gh.mean(axis=1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=1, keepdims=True))
    return gx, ggain, gbias


def _adamw_np(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)


if HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_fwd_nb(x, y):
        n, k = x.shape
        ok = True
        for i in range(n):
            hi = x[i, 0]
            for j in range(k):
                v = x[i, j]
                if v != v:
                    ok = False
                if v > hi:
                    hi = v
            total = 0.0
            for j in range(k):
                e = math.exp(x[i, j] - hi)
                y[i, j] = e
                total += e
            for j in range(k):
                y[i, j] /= total
        return ok

    @njit(cache=True)
    def _softmax_bwd_nb(g, y, gx):
        n, k = g.shape
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[i, j] * y[i, j]
            for j in range(k):
                gx[i, j] = y[i, j] * (g[i, j] - dot)

    @njit(cache=True)
    def _layer_norm_fwd_nb(x, gain, bias, eps, y, xhat, inv):
        n, d = x.shape
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                dev = x[i, j] - mu
                var += dev * dev
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            inv[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]

    @njit(cache=True)
    def _layer_norm_bwd_nb(g, xhat, inv, gain, gx, ggain, gbias):
        n, d = g.shape
        for j in range(d):
            ggain[j] = 0.0
            gbias[j] = 0.0
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gij = g[i, j]
                h = xhat[i, j]
                gbias[j] += gij
                ggain[j] += gij * h
                gh = gij * gain[j]
                m1 += gh
                m2 += gh * h
            m1 /= d
            m2 /= d
            r = inv[i]
            for j in range(d):
                gx[i, j] = r * (g[i, j] * gain[j] - m1 - xhat[i, j] * m2)

    @njit(cache=True)
    def _adamw_nb(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps) + wd * p[i])


def gelu_fwd(x, need_deriv):
    """Returns (gelu(x), derivative or None); ``x`` is any-shape float64.

    numpy's SIMD tanh beats a scalar jit loop here, so this stays numpy.
    """
    return _gelu_fwd_np(x, need_deriv)


def softmax_fwd(x2d):
    """Returns (row softmax, all-finite flag)."""
    if HAVE_NUMBA:
        x2d = np.ascontiguousarray(x2d)
        y = np.empty_like(x2d)
        ok = _softmax_fwd_nb(x2d, y)
        return y, bool(ok)
    rowmax = x2d.max(axis=1)
    return _softmax_fwd_np(x2d), not np.isnan(rowmax).any()


def softmax_bwd(g2d, y2d):
    if HAVE_NUMBA:
        g2d = np.ascontiguousarray(g2d)
        gx = np.empty_like(g2d)
        _softmax_bwd_nb(g2d, y2d, gx)
        return gx
    return _softmax_bwd_np(g2d, y2d)


def layer_norm_fwd(x2d, gain, bias, eps):
    if HAVE_NUMBA:
        x2d = np.ascontiguousarray(x2d)
        y = np.empty_like(x2d)
        xhat = np.empty_like(x2d)
        inv = np.empty(x2d.shape[0])
        _layer_norm_fwd_nb(x2d, gain, bias, eps, y, xhat, inv)
        return y, xhat, inv
    return _layer_norm_fwd_np(x2d, gain, bias, eps)


def layer_norm_bwd(g2d, xhat, inv, gain):
    if HAVE_NUMBA:
        g2d = np.ascontiguousarray(g2d)
        gx = np.empty_like(g2d)
        ggain = np.empty(gain.size)
        gbias = np.empty(gain.size)
        _layer_norm_bwd_nb(g2d, xhat, inv, gain, gx, ggain, gbias)
        return gx, ggain, gbias
    return _layer_norm_bwd_np(g2d, xhat, inv, gain)


def adamw_update(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2):
    """In-place decoupled weight-decay Adam update on flat float64 arrays."""
    if HAVE_NUMBA:
        _adamw_nb(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                  m.reshape(-1), v.reshape(-1), lr, wd, b1, b2, eps, bc1, bc2)
    else:
        _adamw_np(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2)
