"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable computation in the package is expressed through the ops in
this module. Ops record themselves on the currently active :class:`Tape`
(creation order is a topological order, so replaying the record backwards
visits each op exactly once); with no active tape they run as plain numpy
and cost nothing extra.

Convolution convention (pinned by tests): :func:`conv1d_same` computes a
cross-correlation with symmetric zero padding,

    out[t] = sum_k taps[k] * signal[t + k - (K-1)//2].
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one differentiable computation.

    Use as a context manager around the forward pass, then call
    :func:`backward` with the scalar loss. A tape is single-owner: do not
    share one mutably across threads.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-dimensional float64 value, optionally tracked for gradients.

    ``data`` is always a contiguous float64 ndarray. ``grad`` is populated by
    :func:`backward` and accumulates across calls until reset (see
    :func:`zero_grads`). Tensors are treated as immutable values by all ops;
    only the optimizer mutates ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Build an op result, validating finiteness and recording on the tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape = tape
        tape._nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor the scalar ``loss`` depends on.

    Parameters the loss never touched keep ``grad=None``; read them through
    :func:`grad_of`, which reports zeros. Gradients accumulate across calls.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._tape is not None and loss._tape is not tape:
        raise ValueError("loss was recorded on a different tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


def grad_of(t: Tensor) -> np.ndarray:
    """The accumulated gradient of ``t``, zeros if it was never reached."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands with numpy matmul semantics."""
    if a.data.ndim == 0 or b.data.ndim == 0 or a.data.ndim > 2 or b.data.ndim > 2:
        raise ShapeError("matmul expects 1-D or 2-D operands")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:  # 1-D dot
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _make(data, (a, b), bwd, "matmul")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - t * t))

    return _make(t, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bwd, "sigmoid")


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)

    def bwd(g):
        _accum(a, g * e)

    return _make(e, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd, "log")


def log_floored(a: Tensor, eps: float = 1e-12, floor: float = -1e6) -> Tensor:
    """log(a) where a > eps, else ``floor``; clamped positions get zero grad."""
    ok = a.data > eps
    data = np.where(ok, np.log(np.maximum(a.data, eps)), floor)

    def bwd(g):
        _accum(a, np.where(ok, g / np.maximum(a.data, eps), 0.0))

    return _make(data, (a,), bwd, "log_floored")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        _accum(a, g * s)

    return _make(data, (a,), bwd, "softplus")


def abs_(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd, "abs")


def square(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bwd, "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt requires nonnegative input")
    r = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / np.maximum(r, 1e-300))

    return _make(r, (a,), bwd, "sqrt")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def bwd(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bwd, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(data, dtype=np.float64), (a,), bwd, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), bwd, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), bwd, "stack")


def embed(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add gradient into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= weight.data.shape[0]):
        raise IndexError(f"symbol id out of range [0, {weight.data.shape[0]})")
    data = weight.data[ids]

    def bwd(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        _accum(weight, full)

    return _make(data, (weight,), bwd, "embed")


def correlate1d(signal: Tensor, taps: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Cross-correlation ``out[t] = sum_k taps[k] * padded[t + k]``.

    ``padded`` is ``signal`` zero-extended by ``pad_left``/``pad_right``;
    output length is ``L + pad_left + pad_right - K + 1``.
    """
    if signal.data.ndim != 1 or taps.data.ndim != 1:
        raise ShapeError("correlate1d expects 1-D signal and taps")
    L, K = signal.data.shape[0], taps.data.shape[0]
    out_len = L + pad_left + pad_right - K + 1
    if out_len < 1:
        raise ShapeError("taps longer than padded signal")
    padded = np.pad(signal.data, (pad_left, pad_right))
    data = np.correlate(padded, taps.data, mode="valid")

    def bwd(g):
        # d signal[s] = sum_j g[s + pad_left - j] * taps[j], a correlation of
        # the re-padded upstream grad with the reversed taps.
        gpad = np.pad(g, (K - 1, K - 1))
        ds_full = np.correlate(gpad, taps.data[::-1], mode="valid")
        _accum(signal, ds_full[pad_left: pad_left + L])
        _accum(taps, np.correlate(padded, g, mode="valid"))

    return _make(data, (signal, taps), bwd, "correlate1d")


def conv1d_same(signal: Tensor, taps: Tensor) -> Tensor:
    """Same-length cross-correlation with centered zero padding; K must be odd.

    ``out[t] = sum_k taps[k] * signal[t + k - (K-1)//2]`` (zero outside), so
    taps ``[0, 1, 0]`` are the identity and ``[1, 0, 0]`` shift the signal
    one position toward higher indices.
    """
    K = taps.data.shape[0]
    if K % 2 == 0:
        raise ShapeError(f"conv1d_same requires odd tap count, got {K}")
    p = (K - 1) // 2
    return correlate1d(signal, taps, p, p)


def unfold1d(signal: Tensor, K: int, pad_left: int, pad_right: int) -> Tensor:
    """Stack sliding windows of a padded 1-D signal into rows: out[t, k] = padded[t + k]."""
    if signal.data.ndim != 1:
        raise ShapeError("unfold1d expects a 1-D signal")
    L = signal.data.shape[0]
    out_len = L + pad_left + pad_right - K + 1
    if out_len < 1:
        raise ShapeError("window longer than padded signal")
    padded = np.pad(signal.data, (pad_left, pad_right))
    idx = np.arange(out_len)[:, None] + np.arange(K)[None, :]
    data = padded[idx]

    def bwd(g):
        full = np.zeros(L + pad_left + pad_right)
        np.add.at(full, idx, g)
        end = full.shape[0] - pad_right
        _accum(signal, full[pad_left:end])

    return _make(data, (signal,), bwd, "unfold1d")


def softmax_masked(x: Tensor, mask=None) -> Tensor:
    """Softmax over a vector with optional boolean mask (True = keep).

    Masked entries are exactly 0 in the output and are treated as constants
    by the gradient. Stabilized by max subtraction over the kept entries.
    """
    if x.data.ndim != 1:
        raise ShapeError("softmax_masked expects a 1-D tensor")
    if mask is None:
        keep = np.ones(x.data.shape[0], dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.data.shape:
            raise ShapeError("mask shape must match input shape")
    if not keep.any():
        raise ValueError("softmax_masked: all positions masked")
    z = x.data[keep]
    e = np.exp(z - z.max())
    y = np.zeros_like(x.data)
    y[keep] = e / e.sum()

    def bwd(g):
        inner = float((g[keep] * y[keep]).sum())
        dx = np.zeros_like(x.data)
        dx[keep] = y[keep] * (g[keep] - inner)
        _accum(x, dx)

    return _make(y, (x,), bwd, "softmax_masked")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2) + eps^2) over the last axis, composed from primitives."""
    sq = sum_(square(x), axis=x.data.ndim - 1, keepdims=True)
    return div(x, sqrt(sq + eps * eps))


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, stabilized by a detached row max."""
    if x.data.ndim != 2:
        raise ShapeError("logsumexp_rows expects a 2-D tensor")
    m = Tensor(x.data.max(axis=1, keepdims=True))
    return reshape(log(sum_(exp(sub(x, m)), axis=1, keepdims=True)) + m, (x.data.shape[0],))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout driven by an explicit random source; identity in eval mode."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(x.data.shape) >= p).astype(np.float64)
    return mul(x, Tensor(keep / (1.0 - p)))


def zoneout(prev: Tensor, new: Tensor, p: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Stochastically keep previous state entries with probability ``p``.

    Training draws a Bernoulli(p) keep-mask per entry; eval mode uses the
    deterministic expectation ``p * prev + (1-p) * new``. p=1 returns ``prev``
    exactly, p=0 returns ``new`` exactly, in either mode.
    """
    if p <= 0.0:
        return new
    if p >= 1.0:
        return prev
    if training:
        m = (rng.random(new.data.shape) < p).astype(np.float64)
    else:
        m = np.full(new.data.shape, p)
    mt = Tensor(m)
    return add(mul(prev, mt), mul(new, Tensor(1.0 - m)))


def bce_with_logits(logit: Tensor, target: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, numerically stable."""
    return add(mul(target, softplus(neg(logit))),
               mul(1.0 - target, softplus(logit)))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f, params, eps: float = 1e-5, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor and must be
    deterministic (seed or disable any stochastic regularizers). Returns the
    max over checked entries of ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.

    With ``max_entries`` set, at most that many coordinates per parameter are
    probed (seeded sample); large models stay checkable in seconds.
    """
    params = list(params)
    zero_grads(params)
    tape = Tape()
    with tape:
        loss = f()
    backward(tape, loss)
    analytic = [grad_of(p).copy() for p in params]
    zero_grads(params)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_entries is not None and n > max_entries:
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            cd = (hi - lo) / (2.0 * eps)
            a = an.reshape(-1)[i]
            rel = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
