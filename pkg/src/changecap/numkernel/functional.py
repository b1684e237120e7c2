"""Differentiable primitives over :class:`~changecap.numkernel.tensor.Tensor`.

Every function accepts tensors (or array-likes, treated as constants) and
returns tensors.  Batched layouts are channel-first: ``N x C x H x W`` for
images, ``N x D`` for vectors.  Gate order for LSTM weights is (i, f, g, o).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_op


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g[0], sa), _unbroadcast(g[0], sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g[0], sa), _unbroadcast(-g[0], sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g[0] * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g[0] * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., n) and 2-D ``b`` of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        g = g[0]
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        g = g[0]
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd if x.requires_grad else None,
                 g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op(out, inputs, bw, "linear")


# ------------------------------------------------------------ shape plumbing

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g[0].reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g[0], bounds, axis=axis)

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        parts = np.split(g[0], len(tensors), axis=axis)
        return [np.squeeze(p, axis=axis) for p in parts]

    return make_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g[0])
        return (out,)

    return make_op(np.array(x.data[index], dtype=DTYPE), (x,), bw, "getitem")


def embedding(table, indices):
    """Row lookup ``table[indices]``; ``table`` is (V, D)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"token index out of range [0, {vocab})")

    def bw(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, idx, g[0])
        return (out,)

    return make_op(table.data[idx], (table,), bw, "embedding")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gg = g[0]
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, shape).copy(),)

    return make_op(np.asarray(x.data.sum(axis=axis), dtype=DTYPE), (x,), bw, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)])
    return mul(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------- activations

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g[0] * mask,), "relu")


def _sigmoid(z):
    return expit(z)


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g[0] * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g[0] * (1.0 - y * y),), "tanh")


def _check_axis(x, axis):
    if axis is None:
        raise ValueError("softmax requires an axis")
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.ndim}")


def _softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis):
    x = as_tensor(x)
    _check_axis(x, axis)
    p = _softmax(x.data, axis)

    def bw(g):
        g = g[0]
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_op(p, (x,), bw, "softmax")


def log_softmax(x, axis):
    x = as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        g = g[0]
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw, "log_softmax")


def abs(x):  # noqa: A001
    x = as_tensor(x)
    s = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g[0] * s,), "abs")


def log(x):
    x = as_tensor(x)
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g[0] / xd,), "log")


def apply_activation(kind, x, axis=None):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind in ("softmax", "softmax_over_axis"):
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def entropy(logits, axis=-1):
    """Shannon entropy (nats) of ``softmax(logits)`` along ``axis``."""
    return mul(sum(mul(softmax(logits, axis), log_softmax(logits, axis)), axis), -1.0)


# ------------------------------------------------------------- convolutions

def conv2d(x, kernel, bias=None, padding=0, stride=1):
    """2-D cross-correlation.

    ``x`` is (N, C_in, H, W) or (C_in, H, W); ``kernel`` is (C_out, C_in, k, k).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kd.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernel expects {kc} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {h}x{w} with padding {padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # (n, c, ho, wo, k, k) view of every receptive field, contracted in one call
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * k * k)
    kmat = kd.reshape(c_out, c_in * k * k)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        go = g[0][None] if squeeze else g[0]
        gmat = go.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(kd.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, ho, wo, c_in, k, k)
            gx = np.zeros((n, c_in) + xp.shape[2:], dtype=DTYPE)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + hs:stride, j:j + ws:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(go.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out[0] if squeeze else out, inputs, bw, "conv2d")


def _pool_view(xd, k):
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"pool: spatial size {h}x{w} not divisible by {k}")
    return xd.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k)


def max_pool2d(x, k=2):
    """Non-overlapping k x k max pooling on (N, C, H, W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    view = _pool_view(x.data, k)
    arg = view.argmax(axis=-1)
    out = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gv = np.zeros(view.shape, dtype=DTYPE)
        np.put_along_axis(gv, arg[..., None], g[0][..., None], axis=-1)
        gv = gv.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gv.reshape(n, c, h, w),)

    return make_op(out, (x,), bw, "max_pool2d")


def avg_pool2d(x, k=2):
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = _pool_view(x.data, k).mean(axis=-1)

    def bw(g):
        gg = np.repeat(np.repeat(g[0], k, axis=2), k, axis=3) / (k * k)
        return (gg,)

    return make_op(out, (x,), bw, "avg_pool2d")


def global_max_pool(x):
    """(N, C, H, W) -> (N, C) maximum over spatial positions."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros(flat.shape, dtype=DTYPE)
        np.put_along_axis(gf, arg[..., None], g[0][..., None], axis=-1)
        return (gf.reshape(n, c, h, w),)

    return make_op(out, (x,), bw, "global_max_pool")


def spatial_pool(attention, features):
    """Attention-weighted sum over H, W: (N,1,H,W) x (N,C,H,W) -> (N,C)."""
    attention, features = as_tensor(attention), as_tensor(features)
    if attention.ndim != 4 or attention.shape[1] != 1 or \
            attention.shape[2:] != features.shape[2:] or attention.shape[0] != features.shape[0]:
        raise ShapeError(f"spatial_pool: map {attention.shape} incompatible with {features.shape}")
    a, X = attention.data, features.data
    out = np.einsum("nhw,nchw->nc", a[:, 0], X, optimize=True)

    def bw(g):
        g = g[0]
        ga = np.einsum("nc,nchw->nhw", g, X, optimize=True)[:, None] if attention.requires_grad else None
        gx = g[:, :, None, None] * a if features.requires_grad else None
        return ga, gx

    return make_op(out, (attention, features), bw, "spatial_pool")


def weighted_sum(weights, values):
    """Convex-style mixing: (N, K) x (N, K, D) -> (N, D), ``sum_k w[n,k] v[n,k,:]``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if weights.ndim != 2 or values.ndim != 3 or values.shape[:2] != weights.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} incompatible with {values.shape}")
    w, v = weights.data, values.data
    out = np.einsum("nk,nkd->nd", w, v)

    def bw(g):
        g = g[0]
        gw = np.einsum("nd,nkd->nk", g, v) if weights.requires_grad else None
        gv = w[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return make_op(out, (weights, values), bw, "weighted_sum")


# ------------------------------------------------------------------- LSTM

def lstm_step(x, h_prev, c_prev, w_ih, w_hh, bias):
    """One LSTM cell update; returns ``(h, c)``.

    ``w_ih`` is (4*D_h, D_in), ``w_hh`` is (4*D_h, D_h), ``bias`` is (4*D_h,),
    gates stacked as input, forget, candidate, output.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    w_ih, w_hh, bias = as_tensor(w_ih), as_tensor(w_hh), as_tensor(bias)
    d_h = h_prev.shape[-1]
    if w_ih.shape != (4 * d_h, x.shape[-1]) or w_hh.shape != (4 * d_h, d_h) \
            or bias.shape != (4 * d_h,) or c_prev.shape != h_prev.shape \
            or x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"lstm_step: inconsistent shapes x={x.shape} h={h_prev.shape} "
                         f"c={c_prev.shape} w_ih={w_ih.shape} w_hh={w_hh.shape} b={bias.shape}")
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    z = xd @ w_ih.data.T + hd @ w_hh.data.T + bias.data
    sz = _sigmoid(z)
    i, f, o = sz[..., :d_h], sz[..., d_h:2 * d_h], sz[..., 3 * d_h:]
    gc = np.tanh(z[..., 2 * d_h:3 * d_h])
    c = f * cd + i * gc
    tc = np.tanh(c)
    h = o * tc

    def bw(g):
        dh, dc = g
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[..., :d_h] = dc * gc
        dz[..., d_h:2 * d_h] = dc * cd
        dz[..., 2 * d_h:3 * d_h] = dc * i * (1.0 - gc * gc)
        dz[..., 3 * d_h:] = dh * tc
        deriv = sz * (1.0 - sz)
        deriv[..., 2 * d_h:3 * d_h] = 1.0    # candidate gate derivative already applied
        dz *= deriv
        dz2 = dz.reshape(-1, 4 * d_h)
        return (dz @ w_ih.data if x.requires_grad else None,
                dz @ w_hh.data if h_prev.requires_grad else None,
                dc * f if c_prev.requires_grad else None,
                dz2.T @ xd.reshape(-1, xd.shape[-1]) if w_ih.requires_grad else None,
                dz2.T @ hd.reshape(-1, d_h) if w_hh.requires_grad else None,
                dz2.sum(axis=0) if bias.requires_grad else None)

    return make_op((h, c), (x, h_prev, c_prev, w_ih, w_hh, bias), bw, "lstm_step")


# ------------------------------------------------------------------- losses

def cross_entropy(logits, targets, pad_index=0):
    """Summed negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is (..., V); ``targets`` has the leading shape.  Positions
    equal to ``pad_index`` are ignored.
    """
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    vocab = logits.shape[-1]
    mask = tgt != pad_index
    if not mask.any():
        raise ValueError("cross_entropy: every target position is padding")
    if tgt[mask].min() < 0 or tgt[mask].max() >= vocab:
        raise IndexError(f"cross_entropy: target outside [0, {vocab})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(mask, tgt, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum()

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None],
                          np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (p * mask[..., None] * g[0],)

    return make_op(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")
