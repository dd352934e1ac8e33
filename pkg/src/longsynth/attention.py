"""Energy-based attention mechanisms with monotonic-alignment machinery.

Two mechanisms share the same interface:

* hybrid location-sensitive attention (LSA): content terms (query/key
  projections) plus a location term computed by convolving the previous
  alignment with a bank of learned static filters;
* dynamic convolution attention (DCA): no content terms at all — static
  filters, input-dependent dynamic filters, and a fixed log-domain prior
  filter, all applied to the previous alignment.

Prior-filter convention (pinned by the forward-drift test): the prior is a
causal convolution ``out[j] = sum_k taps[k] * prev[j - k]``, so tap index k
is a forward displacement of k encoder positions and the expected alignment
position advances by the taps' mean displacement each decoder step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .nn import Linear, glorot
from .tensor import Tensor


@dataclass
class AlignmentState:
    """Previous-step attention weights plus the encoder padding mask."""

    alignment: Tensor          # (L,) probability vector
    mask: np.ndarray           # (L,) bool, True = real position

    def validate(self, tol: float = 1e-9) -> None:
        a = self.alignment.data
        if a.ndim != 1 or a.shape != self.mask.shape:
            raise ValueError("alignment/mask shape mismatch")
        if np.any(a < 0) or abs(a.sum() - 1.0) > tol:
            raise ValueError("alignment is not a probability vector")
        if np.any(a[~self.mask] != 0.0):
            raise ValueError("masked positions must carry exactly zero weight")


@dataclass
class AttentionOutput:
    alignment: Tensor          # (L,) new weights
    context: Tensor            # weighted key average
    energies: Tensor           # raw pre-softmax energies
    state: AlignmentState      # state advanced to the new alignment


def init_alignment(L: int, mask=None) -> AlignmentState:
    """One-hot at position 0; the prior then drives forward movement from step 1."""
    if L < 1:
        raise ValueError("encoder length must be >= 1")
    a = np.zeros(L)
    a[0] = 1.0
    m = np.ones(L, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return AlignmentState(Tensor(a), m)


def prior_filter_taps(n_taps: int, alpha: float, beta: float) -> np.ndarray:
    """Beta-binomial pmf over displacements 0..n_taps-1, via log-gamma.

    taps[k] = C(n, k) * B(k + alpha, n - k + beta) / B(alpha, beta) with
    n = n_taps - 1; sums to 1 up to floating-point rounding.
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    if alpha <= 0 or beta <= 0:
        raise ValueError("shape parameters must be positive")
    n = n_taps - 1
    log_b0 = math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)
    taps = np.empty(n_taps)
    for k in range(n_taps):
        log_c = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
        log_b = (math.lgamma(k + alpha) + math.lgamma(n - k + beta)
                 - math.lgamma(n + alpha + beta))
        taps[k] = math.exp(log_c + log_b - log_b0)
    return taps


def apply_prior(prev_alignment: Tensor, taps: np.ndarray) -> Tensor:
    """Log-domain prior bias: log(taps (*) prev) with a causal convolution.

    Positions where the convolution underflows 1e-12 are clamped to -1e6,
    which keeps the softmax finite while making them numerically unreachable.
    """
    k = len(taps)
    rev = Tensor(np.ascontiguousarray(taps[::-1]))
    conv = tt.correlate1d(prev_alignment, rev, pad_left=k - 1, pad_right=0)
    return tt.log_floored(conv, eps=1e-12, floor=-1e6)


class DynamicFilterGenerator:
    """Two-layer map from the decoder state to a bank of convolution taps."""

    def __init__(self, rng, dec_dim: int, hidden: int, n_filters: int, tap_len: int):
        self.n_filters = n_filters
        self.tap_len = tap_len
        self.w_in = glorot(rng, (dec_dim, hidden), dec_dim, hidden)
        self.b_in = Tensor(np.zeros(hidden), requires_grad=True)
        self.w_out = glorot(rng, (hidden, n_filters * tap_len), hidden,
                            n_filters * tap_len)

    def __call__(self, d: Tensor, rng=None, training: bool = False,
                 dropout_p: float = 0.1) -> Tensor:
        """Return an (n_filters, tap_len) bank; dropout hits the input only in training."""
        x = d
        if training and dropout_p > 0:
            x = tt.dropout(x, dropout_p, rng, training=True)
        hidden = tt.tanh(tt.matmul(x, self.w_in) + self.b_in)
        flat = tt.matmul(hidden, self.w_out)
        return tt.reshape(flat, (self.n_filters, self.tap_len))

    def named_params(self, prefix: str):
        return [(f"{prefix}.w_in", self.w_in), (f"{prefix}.b_in", self.b_in),
                (f"{prefix}.w_out", self.w_out)]


def dynamic_filters(d: Tensor, gen: DynamicFilterGenerator, rng=None,
                    training: bool = False, dropout_p: float = 0.1) -> Tensor:
    return gen(d, rng=rng, training=training, dropout_p=dropout_p)


def _location_features(alignment: Tensor, filters: Tensor) -> Tensor:
    """Convolve the previous alignment with every filter: (L, n_filters).

    ``filters`` is (n_filters, K) with odd K; each row follows the centered
    cross-correlation convention of conv1d_same.
    """
    n_filters, k = filters.data.shape
    p = (k - 1) // 2
    windows = tt.unfold1d(alignment, k, p, p)          # (L, K)
    return tt.matmul(windows, tt.transpose(filters))   # (L, n_filters)


class LSAParams:
    """Projections and static filter bank for the hybrid mechanism."""

    def __init__(self, rng, dec_dim: int, key_dim: int, attention_dim: int,
                 n_static: int = 32, tap_len: int = 31):
        if tap_len % 2 == 0:
            raise ValueError("static filter length must be odd")
        self.query = glorot(rng, (dec_dim, attention_dim), dec_dim, attention_dim)
        self.key = glorot(rng, (key_dim, attention_dim), key_dim, attention_dim)
        self.location = glorot(rng, (n_static, attention_dim), n_static, attention_dim)
        self.energy = glorot(rng, (attention_dim,), attention_dim, 1)
        self.bias = Tensor(np.zeros(attention_dim), requires_grad=True)
        self.static_filters = glorot(rng, (n_static, tap_len), tap_len, n_static)

    def named_params(self, prefix: str = "lsa"):
        return [(f"{prefix}.query", self.query), (f"{prefix}.key", self.key),
                (f"{prefix}.location", self.location), (f"{prefix}.energy", self.energy),
                (f"{prefix}.bias", self.bias),
                (f"{prefix}.static_filters", self.static_filters)]


class DCAParams:
    """Static/dynamic filter projections plus the fixed prior taps."""

    def __init__(self, rng, dec_dim: int, attention_dim: int, n_static: int = 8,
                 n_dynamic: int = 8, tap_len: int = 21, prior_n_taps: int = 11,
                 prior_alpha: float = 0.1, prior_beta: float = 0.9,
                 generator_hidden: int | None = None):
        if tap_len % 2 == 0:
            raise ValueError("filter length must be odd")
        self.static_proj = glorot(rng, (n_static, attention_dim), n_static, attention_dim)
        self.dynamic_proj = glorot(rng, (n_dynamic, attention_dim), n_dynamic,
                                   attention_dim)
        self.energy = glorot(rng, (attention_dim,), attention_dim, 1)
        self.bias = Tensor(np.zeros(attention_dim), requires_grad=True)
        self.static_filters = glorot(rng, (n_static, tap_len), tap_len, n_static)
        self.generator = DynamicFilterGenerator(
            rng, dec_dim, generator_hidden or attention_dim, n_dynamic, tap_len)
        self.prior_taps = prior_filter_taps(prior_n_taps, prior_alpha, prior_beta)

    def named_params(self, prefix: str = "dca"):
        return ([(f"{prefix}.static_proj", self.static_proj),
                 (f"{prefix}.dynamic_proj", self.dynamic_proj),
                 (f"{prefix}.energy", self.energy), (f"{prefix}.bias", self.bias),
                 (f"{prefix}.static_filters", self.static_filters)]
                + self.generator.named_params(f"{prefix}.generator"))


def lsa_energies(d: Tensor, keys: Tensor, state: AlignmentState,
                 params: LSAParams) -> Tensor:
    """E_j = energy . tanh(query(d) + key(h_j) + location(f_j) + bias)."""
    f = _location_features(state.alignment, params.static_filters)
    pre = (tt.matmul(d, params.query)
           + tt.matmul(keys, params.key)
           + tt.matmul(f, params.location)
           + params.bias)
    return tt.matmul(tt.tanh(pre), params.energy)


def dca_energies(d: Tensor, state: AlignmentState, params: DCAParams,
                 rng=None, training: bool = False,
                 dynamic_dropout_p: float = 0.1) -> Tensor:
    """Purely location-relative energies; the keys never enter.

    E_j = energy . tanh(static(f_j) + dynamic(g_j) + bias) + prior_j, where
    f/g convolve the previous alignment with the static bank and with
    filters generated from the decoder state, and prior_j is the log-domain
    beta-binomial bias.
    """
    f = _location_features(state.alignment, params.static_filters)
    bank = params.generator(d, rng=rng, training=training,
                            dropout_p=dynamic_dropout_p)
    g = _location_features(state.alignment, bank)
    pre = (tt.matmul(f, params.static_proj)
           + tt.matmul(g, params.dynamic_proj)
           + params.bias)
    p = apply_prior(state.alignment, params.prior_taps)
    return tt.matmul(tt.tanh(pre), params.energy) + p


def attend(energies: Tensor, keys: Tensor, state: AlignmentState) -> AttentionOutput:
    """Softmax the energies under the encoder mask and average the keys."""
    alignment = tt.softmax_masked(energies, state.mask)
    context = tt.matmul(alignment, keys)
    return AttentionOutput(alignment=alignment, context=context, energies=energies,
                           state=AlignmentState(alignment, state.mask))


class LSAttention:
    kind = "lsa"

    def __init__(self, rng, dec_dim, key_dim, attention_dim, n_static=32, tap_len=31):
        self.params = LSAParams(rng, dec_dim, key_dim, attention_dim, n_static, tap_len)

    def __call__(self, d, keys, state, rng=None, training=False) -> AttentionOutput:
        return attend(lsa_energies(d, keys, state, self.params), keys, state)

    def named_params(self, prefix: str = "attention"):
        return self.params.named_params(prefix)


class DCAttention:
    kind = "dca"

    def __init__(self, rng, dec_dim, key_dim, attention_dim, n_static=8, n_dynamic=8,
                 tap_len=21, prior_n_taps=11, prior_alpha=0.1, prior_beta=0.9,
                 dynamic_dropout_p=0.1):
        self.dynamic_dropout_p = dynamic_dropout_p
        self.params = DCAParams(rng, dec_dim, attention_dim, n_static, n_dynamic,
                                tap_len, prior_n_taps, prior_alpha, prior_beta)

    def __call__(self, d, keys, state, rng=None, training=False) -> AttentionOutput:
        e = dca_energies(d, state, self.params, rng=rng, training=training,
                         dynamic_dropout_p=self.dynamic_dropout_p)
        return attend(e, keys, state)

    def named_params(self, prefix: str = "attention"):
        return self.params.named_params(prefix)
