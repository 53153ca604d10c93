"""Differentiable primitives over ``Tensor``.

Every op returns a new node whose backward closure pushes gradients into its
parents with matching shapes.  Broadcasting is supported on the elementwise
ops; gradients are summed back down to the parent shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, accumulate_grad, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        # promote the scalar/constant side to the graph dtype
        tgt = np.promote_types(a.dtype, b.dtype)
        if a.dtype != tgt:
            a = Tensor(a.data.astype(tgt), requires_grad=a.requires_grad) if not (a.requires_grad or a._parents) else a
        if b.dtype != tgt:
            b = Tensor(b.data.astype(tgt), requires_grad=b.requires_grad) if not (b.requires_grad or b._parents) else b
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return make_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape))

    return make_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g / b.data, a.shape))
        accumulate_grad(b, _unbroadcast(-g * out / b.data, b.shape))

    return make_node(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        accumulate_grad(a, -g)

    return make_node(-a.data, (a,), bwd)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent

    def bwd(g):
        accumulate_grad(a, g * exponent * a.data ** (exponent - 1))

    return make_node(out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        accumulate_grad(a, g * out)

    return make_node(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        accumulate_grad(a, g / a.data)

    return make_node(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        accumulate_grad(a, g * 0.5 / out)

    return make_node(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        accumulate_grad(a, g * (1.0 - out * out))

    return make_node(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        accumulate_grad(a, g * out * (1.0 - out))

    return make_node(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        accumulate_grad(a, g * (a.data > 0))

    return make_node(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), numerically stable."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        accumulate_grad(a, g * s)

    return make_node(out, (a,), bwd)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, floor)

    def bwd(g):
        accumulate_grad(a, g * (a.data > floor))

    return make_node(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        accumulate_grad(a, out * (g - dot))

    return make_node(out, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        gk = np.expand_dims(g, axis) if not keepdims else g
        accumulate_grad(a, gk * soft)

    return make_node(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data @ b.data

    def bwd(g):
        if a.ndim == 2 and b.ndim == 2:
            accumulate_grad(a, g @ b.data.T)
            accumulate_grad(b, a.data.T @ g)
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            accumulate_grad(a, _unbroadcast(ga, a.shape))
            accumulate_grad(b, _unbroadcast(gb, b.shape))

    return make_node(out, (a, b), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            accumulate_grad(a, np.broadcast_to(gk, a.shape))

    return make_node(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g / n, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            accumulate_grad(a, np.broadcast_to(gk / n, a.shape))

    return make_node(np.asarray(out), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        accumulate_grad(a, g.reshape(a.shape))

    return make_node(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        accumulate_grad(a, np.transpose(g, inv))

    return make_node(out, (a,), bwd)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        accumulate_grad(a, buf)

    return make_node(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate_grad(t, g[tuple(idx)])

    return make_node(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            accumulate_grad(t, np.take(g, i, axis=axis))

    return make_node(out, tuple(tensors), bwd)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather: ids of any shape -> ids.shape + (dim,)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.ravel(), g.reshape(-1, table.shape[-1]))
        accumulate_grad(table, buf)

    return make_node(out, (table,), bwd)


def take_along_time(a, idx: np.ndarray) -> Tensor:
    """Reorder the time axis of [B,T,C] per batch row; idx is [B,T] ints."""
    a = as_tensor(a)
    b_ix = np.arange(a.shape[0])[:, None]
    out = a.data[b_ix, idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (b_ix, idx), g)
        accumulate_grad(a, buf)

    return make_node(out, (a,), bwd)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sq = (x * x).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    out = x * inv

    def bwd(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        accumulate_grad(a, inv * g - (inv**3) * dot * x)

    return make_node(out, (a,), bwd)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws the mask from ``rng`` (caller owns determinism)."""
    if p <= 0.0:
        return as_tensor(a)
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = a.data * keep

    def bwd(g):
        accumulate_grad(a, g * keep)

    return make_node(out, (a,), bwd)


def repeat_time(a, times: int) -> Tensor:
    """Repeat each step of [T,C] (or [B,T,C]) ``times`` along the time axis."""
    a = as_tensor(a)
    axis = a.ndim - 2
    out = np.repeat(a.data, times, axis=axis)

    def bwd(g):
        shp = list(a.shape)
        shp.insert(axis + 1, times)
        accumulate_grad(a, g.reshape(shp).sum(axis=axis + 1))

    return make_node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _conv1d_pad(t_in: int, k: int, dilation: int, stride: int, padding: str):
    span = (k - 1) * dilation + 1
    if padding == "valid":
        left = right = 0
    elif padding == "causal":
        left, right = (k - 1) * dilation, 0
    elif padding == "same":
        t_out = -(-t_in // stride)
        total = max((t_out - 1) * stride + span - t_in, 0)
        left = total // 2
        right = total - left
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return left, right


def conv1d(x, w, b=None, dilation: int = 1, stride: int = 1, padding: str = "same") -> Tensor:
    """x [B,T,Cin], w [K,Cin,Cout] -> [B,T',Cout].  Taps ordered earliest first."""
    x = as_tensor(x)
    w = as_tensor(w)
    B, T, Cin = x.shape
    K, _, Cout = w.shape
    left, right = _conv1d_pad(T, K, dilation, stride, padding)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if (left or right) else x.data
    Tp = xp.shape[1]
    span = (K - 1) * dilation + 1
    T_out = (Tp - span) // stride + 1
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, T_out, K, Cin), strides=(s0, stride * s1, dilation * s1, s2)
    )
    cols = np.ascontiguousarray(cols).reshape(B * T_out, K * Cin)
    wm = w.data.reshape(K * Cin, Cout)
    out = cols @ wm
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(B, T_out, Cout)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gf = g.reshape(B * T_out, Cout)
        accumulate_grad(w, (cols.T @ gf).reshape(K, Cin, Cout))
        if b is not None:
            accumulate_grad(b, gf.sum(axis=0))
        gcols = (gf @ wm.T).reshape(B, T_out, K, Cin)
        gxp = np.zeros((B, Tp, Cin), dtype=g.dtype)
        for i in range(K):
            off = i * dilation
            gxp[:, off : off + T_out * stride : stride, :] += gcols[:, :, i, :]
        if left or right:
            gxp = gxp[:, left : Tp - right, :]
        accumulate_grad(x, gxp)

    return make_node(out, parents, bwd)


def conv2d(x, w, b=None, stride=(1, 1), padding: str = "same") -> Tensor:
    """x [B,H,W,Cin], w [Kh,Kw,Cin,Cout], tensorflow-style 'same' padding."""
    x = as_tensor(x)
    w = as_tensor(w)
    B, H, W_, Cin = x.shape
    Kh, Kw, _, Cout = w.shape
    sh, sw = stride
    if padding == "same":
        Ho, Wo = -(-H // sh), -(-W_ // sw)
        ph = max((Ho - 1) * sh + Kh - H, 0)
        pw = max((Wo - 1) * sw + Kw - W_, 0)
        pads = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0))
    elif padding == "valid":
        Ho, Wo = (H - Kh) // sh + 1, (W_ - Kw) // sw + 1
        pads = ((0, 0), (0, 0), (0, 0), (0, 0))
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, pads) if any(p for pair in pads for p in pair) else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, Ho, Wo, Kh, Kw, Cin),
        strides=(s0, sh * s1, sw * s2, s1, s2, s3),
    )
    cols = np.ascontiguousarray(cols).reshape(B * Ho * Wo, Kh * Kw * Cin)
    wm = w.data.reshape(Kh * Kw * Cin, Cout)
    out = cols @ wm
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(B, Ho, Wo, Cout)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gf = g.reshape(B * Ho * Wo, Cout)
        accumulate_grad(w, (cols.T @ gf).reshape(Kh, Kw, Cin, Cout))
        if b is not None:
            accumulate_grad(b, gf.sum(axis=0))
        gcols = (gf @ wm.T).reshape(B, Ho, Wo, Kh, Kw, Cin)
        gxp = np.zeros((B, Hp, Wp, Cin), dtype=g.dtype)
        for i in range(Kh):
            for j in range(Kw):
                gxp[:, i : i + Ho * sh : sh, j : j + Wo * sw : sw, :] += gcols[:, :, :, i, j, :]
        (pt, pb), (pl, pr) = pads[1], pads[2]
        if pt or pb or pl or pr:
            gxp = gxp[:, pt : Hp - pb, pl : Wp - pr, :]
        accumulate_grad(x, gxp)

    return make_node(out, parents, bwd)
