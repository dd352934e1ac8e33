"""Trainable layer primitives built on the tensor core.

Layers hold their parameters as plain Tensors and expose them through
``named_params()`` in a fixed order, which the optimizer and checkpoint
code rely on for determinism.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.w = glorot(rng, (n_in, n_out), n_in, n_out)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tt.matmul(x, self.w)
        return y if self.b is None else y + self.b

    def named_params(self, prefix: str):
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class Embedding:
    def __init__(self, rng, n_symbols: int, dim: int):
        self.table = Tensor(rng.normal(0.0, 0.3, size=(n_symbols, dim)),
                            requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return tt.embed(self.table, ids)

    def named_params(self, prefix: str):
        return [(f"{prefix}.table", self.table)]


class LSTMCell:
    """Single LSTM step with fused gate weights and forget-gate bias 1."""

    def __init__(self, rng, n_in: int, n_hidden: int):
        self.n_hidden = n_hidden
        self.w = glorot(rng, (n_in + n_hidden, 4 * n_hidden), n_in + n_hidden,
                        4 * n_hidden)
        b = np.zeros(4 * n_hidden)
        b[n_hidden:2 * n_hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def init_state(self):
        h = Tensor(np.zeros(self.n_hidden))
        c = Tensor(np.zeros(self.n_hidden))
        return h, c

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        n = self.n_hidden
        gates = tt.matmul(tt.concat([x, h]), self.w) + self.b
        i = tt.sigmoid(gates[0:n])
        f = tt.sigmoid(gates[n:2 * n])
        g = tt.tanh(gates[2 * n:3 * n])
        o = tt.sigmoid(gates[3 * n:4 * n])
        c_new = f * c + i * g
        h_new = o * tt.tanh(c_new)
        return h_new, c_new

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Conv1dBank:
    """Same-padded multi-channel 1-D convolution over a (time, channels) input.

    Implemented as a single matmul over stacked shifted slices, following the
    cross-correlation convention of :func:`longsynth.tensor.conv1d_same`.
    """

    def __init__(self, rng, n_in: int, n_out: int, kernel: int, bias: bool = True):
        if kernel % 2 == 0:
            raise ValueError("kernel must be odd for same padding")
        self.kernel = kernel
        self.n_in = n_in
        self.w = glorot(rng, (kernel * n_in, n_out), kernel * n_in, n_out)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        L = x.data.shape[0]
        p = (self.kernel - 1) // 2
        pad = Tensor(np.zeros((p, self.n_in)))
        xp = tt.concat([pad, x, pad], axis=0) if p else x
        windows = tt.concat([xp[k:k + L] for k in range(self.kernel)], axis=1)
        y = tt.matmul(windows, self.w)
        return y if self.b is None else y + self.b

    def named_params(self, prefix: str):
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class BiLSTM:
    """Bidirectional single-layer LSTM; output width is 2 * hidden."""

    def __init__(self, rng, n_in: int, n_hidden: int):
        self.fwd = LSTMCell(rng, n_in, n_hidden)
        self.bwd = LSTMCell(rng, n_in, n_hidden)

    def __call__(self, xs: Tensor) -> Tensor:
        L = xs.data.shape[0]
        h, c = self.fwd.init_state()
        fwd_out = []
        for i in range(L):
            h, c = self.fwd.step(xs[i], h, c)
            fwd_out.append(h)
        h, c = self.bwd.init_state()
        bwd_out = [None] * L
        for i in reversed(range(L)):
            h, c = self.bwd.step(xs[i], h, c)
            bwd_out[i] = h
        return tt.concat([tt.stack(fwd_out), tt.stack(bwd_out)], axis=1)

    def named_params(self, prefix: str):
        return self.fwd.named_params(f"{prefix}.fwd") + self.bwd.named_params(f"{prefix}.bwd")


def collect_params(named) -> list[Tensor]:
    return [t for _, t in named]
