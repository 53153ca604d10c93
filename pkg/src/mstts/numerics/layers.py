"""Parameterized building blocks: linear maps, convolutions, recurrent cells.

Layers hold their weights as ``Tensor`` leaves and expose ``params(prefix)``
so models can assemble a flat name -> Tensor registry.  Weight tensors are
named ``*.w`` (subject to L2 regularization), biases ``*.b``, lookup tables
``*.table``.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, parameter


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True, dtype=np.float32):
        self.w = parameter(glorot(rng, (n_in, n_out), n_in, n_out, dtype))
        self.b = parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.w)
        if self.b is not None:
            y = ops.add(y, self.b)
        return y

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv1d:
    def __init__(
        self,
        rng,
        n_in: int,
        n_out: int,
        kernel: int,
        dilation: int = 1,
        stride: int = 1,
        padding: str = "same",
        bias: bool = True,
        dtype=np.float32,
    ):
        fan_in = kernel * n_in
        self.w = parameter(glorot(rng, (kernel, n_in, n_out), fan_in, n_out, dtype))
        self.b = parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        self.dilation = dilation
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv1d(
            x, self.w, self.b, dilation=self.dilation, stride=self.stride, padding=self.padding
        )

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv2d:
    def __init__(self, rng, n_in, n_out, kernel=(3, 3), stride=(1, 1), dtype=np.float32):
        kh, kw = kernel
        fan_in = kh * kw * n_in
        self.w = parameter(glorot(rng, (kh, kw, n_in, n_out), fan_in, n_out, dtype))
        self.b = parameter(np.zeros(n_out, dtype=dtype))
        self.stride = stride

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding="same")

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LSTMCell:
    """Standard LSTM cell, gates ordered (input, forget, cell, output)."""

    def __init__(self, rng, n_in: int, n_hidden: int, dtype=np.float32):
        self.n_hidden = n_hidden
        self.wx = parameter(glorot(rng, (n_in, 4 * n_hidden), n_in, n_hidden, dtype))
        self.wh = parameter(glorot(rng, (n_hidden, 4 * n_hidden), n_hidden, n_hidden, dtype))
        b = np.zeros(4 * n_hidden, dtype=dtype)
        b[n_hidden : 2 * n_hidden] = 1.0  # forget gate open at init
        self.b = parameter(b)

    def __call__(self, x, h, c):
        H = self.n_hidden
        gates = ops.add(ops.add(ops.matmul(x, self.wx), ops.matmul(h, self.wh)), self.b)
        i = ops.sigmoid(gates[:, 0:H])
        f = ops.sigmoid(gates[:, H : 2 * H])
        g = ops.tanh(gates[:, 2 * H : 3 * H])
        o = ops.sigmoid(gates[:, 3 * H : 4 * H])
        c2 = ops.add(ops.mul(f, c), ops.mul(i, g))
        h2 = ops.mul(o, ops.tanh(c2))
        return h2, c2

    def zero_state(self, batch: int, dtype=None):
        dt = dtype or self.wx.dtype
        return (
            Tensor(np.zeros((batch, self.n_hidden), dtype=dt)),
            Tensor(np.zeros((batch, self.n_hidden), dtype=dt)),
        )

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.wx.w": self.wx, f"{prefix}.wh.w": self.wh, f"{prefix}.b": self.b}


def run_lstm(cell: LSTMCell, x, batch: int, n_steps: int):
    """Unidirectional pass over [B,T,C]; returns [B,T,H]."""
    h, c = cell.zero_state(batch, dtype=x.dtype)
    outs = []
    for t in range(n_steps):
        h, c = cell(x[:, t, :], h, c)
        outs.append(h)
    return ops.stack(outs, axis=1)


class BiLSTM:
    """Bidirectional LSTM over padded [B,T,C] with per-row valid lengths."""

    def __init__(self, rng, n_in: int, n_hidden: int, dtype=np.float32):
        self.fwd = LSTMCell(rng, n_in, n_hidden, dtype)
        self.bwd = LSTMCell(rng, n_in, n_hidden, dtype)

    def __call__(self, x, lengths: np.ndarray):
        B, T = x.shape[0], x.shape[1]
        fwd_out = run_lstm(self.fwd, x, B, T)
        idx = _reversal_index(lengths, T)
        rev = ops.take_along_time(x, idx)
        bwd_out = ops.take_along_time(run_lstm(self.bwd, rev, B, T), idx)
        return ops.concat([fwd_out, bwd_out], axis=-1)

    def params(self, prefix: str) -> dict:
        return {**self.fwd.params(f"{prefix}.fwd"), **self.bwd.params(f"{prefix}.bwd")}


def _reversal_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row involution reversing the valid prefix, identity on padding."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)
