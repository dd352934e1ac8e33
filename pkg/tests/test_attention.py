import numpy as np
import pytest
from scipy.special import roots_jacobi

from longsynth import tensor as tt
from longsynth.attention import (
    AlignmentState,
    DCAParams,
    DCAttention,
    DynamicFilterGenerator,
    LSAParams,
    LSAttention,
    apply_prior,
    attend,
    dca_energies,
    dynamic_filters,
    init_alignment,
    lsa_energies,
    prior_filter_taps,
)
from longsynth.tensor import Tensor, finite_diff_check


def conv_same_oracle(signal, taps):
    L, K = len(signal), len(taps)
    p = (K - 1) // 2
    out = np.zeros(L)
    for t in range(L):
        for k in range(K):
            s = t + k - p
            if 0 <= s < L:
                out[t] += taps[k] * signal[s]
    return out


def causal_conv_oracle(signal, taps):
    """out[j] = sum_k taps[k] * signal[j-k], zero outside."""
    L, K = len(signal), len(taps)
    out = np.zeros(L)
    for j in range(L):
        for k in range(K):
            if 0 <= j - k < L:
                out[j] += taps[k] * signal[j - k]
    return out


def beta_binomial_quadrature(n_taps, alpha, beta, n_nodes=32):
    """Integrate the binomial pmf against the Beta density by Gauss-Jacobi."""
    n = n_taps - 1
    t, w = roots_jacobi(n_nodes, beta - 1.0, alpha - 1.0)
    x = (1.0 + t) / 2.0
    norm = w.sum()  # equals 2^(alpha+beta-1) * B(alpha, beta)
    taps = np.empty(n_taps)
    from math import comb
    for k in range(n_taps):
        f = comb(n, k) * x**k * (1.0 - x)**(n - k)
        taps[k] = (w * f).sum() / norm
    return taps


class TestPriorFilterTaps:
    def test_uniform_three(self):
        assert np.max(np.abs(prior_filter_taps(3, 1.0, 1.0) - 1.0 / 3.0)) < 1e-12

    def test_uniform_two(self):
        assert np.max(np.abs(prior_filter_taps(2, 1.0, 1.0) - 0.5)) < 1e-12

    def test_matches_integration_oracle(self):
        got = prior_filter_taps(11, 0.1, 0.9)
        want = beta_binomial_quadrature(11, 0.1, 0.9)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_sums_to_one_over_parameter_grid(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = float(np.exp(rng.uniform(np.log(0.01), np.log(100))))
            b = float(np.exp(rng.uniform(np.log(0.01), np.log(100))))
            n = int(rng.integers(1, 65))
            taps = prior_filter_taps(n, a, b)
            assert np.all(taps >= 0)
            assert abs(taps.sum() - 1.0) < 1e-9

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            prior_filter_taps(5, 0.0, 1.0)
        with pytest.raises(ValueError):
            prior_filter_taps(5, 1.0, -2.0)


class TestApplyPrior:
    def test_single_tap_identity(self):
        prev = np.zeros(6)
        prev[2] = 1.0
        bias = apply_prior(Tensor(prev), np.array([1.0]))
        assert bias.data[2] == 0.0
        assert np.all(bias.data[np.arange(6) != 2] == -1e6)

    def test_shift_tap_moves_forward(self):
        # taps [0,1,0] put all mass at displacement +1 under the causal
        # convention, so the zero-bias position moves up one index.
        prev = np.zeros(5)
        prev[2] = 1.0
        bias = apply_prior(Tensor(prev), np.array([0.0, 1.0, 0.0]))
        assert bias.data[3] == 0.0
        assert np.all(bias.data[np.arange(5) != 3] == -1e6)

    def test_uniform_times_uniform_interior(self):
        L, K = 12, 3
        prev = np.full(L, 1.0 / L)
        taps = np.full(K, 1.0 / K)
        bias = apply_prior(Tensor(prev), taps)
        interior = bias.data[K - 1:]
        assert np.max(np.abs(interior - np.log(1.0 / L))) < 1e-9

    def test_random_vs_direct_summation(self):
        rng = np.random.default_rng(9)
        taps = prior_filter_taps(3, 0.5, 0.5)
        for _ in range(20):
            L = int(rng.integers(3, 12))
            prev = rng.random(L)
            prev /= prev.sum()
            got = apply_prior(Tensor(prev), taps).data
            conv = causal_conv_oracle(prev, taps)
            keep = conv > 1e-12
            assert np.max(np.abs(got[keep] - np.log(conv[keep]))) < 1e-9
            assert np.all(got[~keep] == -1e6)


class TestDynamicFilters:
    def _gen(self, rng, dec_dim=4, hidden=3, n_filters=2, tap_len=5):
        return DynamicFilterGenerator(rng, dec_dim, hidden, n_filters, tap_len)

    def test_zero_input_weight_is_constant(self):
        rng = np.random.default_rng(0)
        gen = self._gen(rng)
        gen.w_in.data[:] = 0.0
        gen.b_in.data[:] = rng.normal(size=3)
        d1 = Tensor(rng.normal(size=4))
        d2 = Tensor(rng.normal(size=4))
        out1 = dynamic_filters(d1, gen).data
        out2 = dynamic_filters(d2, gen).data
        want = (np.tanh(gen.b_in.data) @ gen.w_out.data).reshape(2, 5)
        assert np.array_equal(out1, out2)
        assert np.max(np.abs(out1 - want)) < 1e-15

    def test_all_zero_generator(self):
        gen = self._gen(np.random.default_rng(1))
        gen.w_in.data[:] = 0.0
        gen.b_in.data[:] = 0.0
        out = dynamic_filters(Tensor(np.ones(4)), gen)
        assert np.all(out.data == 0.0)

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(2)
        gen = self._gen(rng)
        d = rng.normal(size=4)
        got = dynamic_filters(Tensor(d), gen).data
        want = (np.tanh(d @ gen.w_in.data + gen.b_in.data) @ gen.w_out.data).reshape(2, 5)
        assert np.max(np.abs(got - want)) < 1e-12


def _lsa_oracle(d, keys, prev, p: LSAParams):
    L = keys.shape[0]
    n_static = p.static_filters.data.shape[0]
    f = np.zeros((L, n_static))
    for s in range(n_static):
        f[:, s] = conv_same_oracle(prev, p.static_filters.data[s])
    E = np.zeros(L)
    for j in range(L):
        pre = (d @ p.query.data + keys[j] @ p.key.data + f[j] @ p.location.data
               + p.bias.data)
        E[j] = p.energy.data @ np.tanh(pre)
    return E


def _dca_oracle(d, prev, p: DCAParams):
    L = prev.shape[0]
    gen = p.generator
    bank = (np.tanh(d @ gen.w_in.data + gen.b_in.data) @ gen.w_out.data).reshape(
        gen.n_filters, gen.tap_len)
    n_static = p.static_filters.data.shape[0]
    f = np.zeros((L, n_static))
    for s in range(n_static):
        f[:, s] = conv_same_oracle(prev, p.static_filters.data[s])
    g = np.zeros((L, gen.n_filters))
    for s in range(gen.n_filters):
        g[:, s] = conv_same_oracle(prev, bank[s])
    conv = causal_conv_oracle(prev, p.prior_taps)
    prior = np.where(conv > 1e-12, np.log(np.maximum(conv, 1e-12)), -1e6)
    E = np.zeros(L)
    for j in range(L):
        pre = f[j] @ p.static_proj.data + g[j] @ p.dynamic_proj.data + p.bias.data
        E[j] = p.energy.data @ np.tanh(pre) + prior[j]
    return E


def _rand_state(rng, L, mask=None):
    a = rng.random(L) + 1e-3
    m = np.ones(L, dtype=bool) if mask is None else mask
    a[~m] = 0.0
    a /= a.sum()
    return AlignmentState(Tensor(a), m)


class TestLSAEnergies:
    def test_all_zero_params_uniform_alignment(self):
        rng = np.random.default_rng(0)
        p = LSAParams(rng, 3, 3, 4, n_static=2, tap_len=3)
        for t in (p.query, p.key, p.location, p.energy, p.bias, p.static_filters):
            t.data[:] = 0.0
        state = init_alignment(5)
        e = lsa_energies(Tensor(np.ones(3)), Tensor(rng.normal(size=(5, 3))), state, p)
        assert np.all(e.data == 0.0)
        out = attend(e, Tensor(rng.normal(size=(5, 3))), state)
        assert np.max(np.abs(out.alignment.data - 0.2)) < 1e-12

    def test_zero_energy_vector(self):
        rng = np.random.default_rng(1)
        p = LSAParams(rng, 3, 3, 4, n_static=2, tap_len=3)
        p.energy.data[:] = 0.0
        state = _rand_state(rng, 4)
        e = lsa_energies(Tensor(rng.normal(size=3)),
                         Tensor(rng.normal(size=(4, 3))), state, p)
        assert np.all(e.data == 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        p = LSAParams(rng, 3, 3, 3, n_static=2, tap_len=3)
        d = rng.normal(size=3)
        keys = rng.normal(size=(4, 3))
        state = _rand_state(rng, 4)
        got = lsa_energies(Tensor(d), Tensor(keys), state, p).data
        want = _lsa_oracle(d, keys, state.alignment.data, p)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_no_location_term_ignores_previous_alignment(self):
        rng = np.random.default_rng(3)
        p = LSAParams(rng, 3, 3, 4, n_static=2, tap_len=3)
        p.location.data[:] = 0.0
        d = Tensor(rng.normal(size=3))
        keys = Tensor(rng.normal(size=(5, 3)))
        e1 = lsa_energies(d, keys, _rand_state(rng, 5), p).data
        e2 = lsa_energies(d, keys, _rand_state(rng, 5), p).data
        assert np.max(np.abs(e1 - e2)) < 1e-15


class TestDCAEnergies:
    def _tiny(self, rng, **kw):
        kw.setdefault("n_static", 2)
        kw.setdefault("n_dynamic", 2)
        kw.setdefault("tap_len", 3)
        return DCAParams(rng, 3, 4, **kw)

    def test_prior_only_stationary(self):
        rng = np.random.default_rng(0)
        p = self._tiny(rng, prior_n_taps=1, prior_alpha=1.0, prior_beta=1.0)
        p.energy.data[:] = 0.0
        prev = np.zeros(6)
        prev[3] = 1.0
        state = AlignmentState(Tensor(prev), np.ones(6, dtype=bool))
        e = dca_energies(Tensor(rng.normal(size=3)), state, p)
        assert e.data[3] == 0.0
        assert np.all(e.data[np.arange(6) != 3] == -1e6)
        out = attend(e, Tensor(rng.normal(size=(6, 2))), state)
        assert np.max(np.abs(out.alignment.data - prev)) < 1e-9

    def test_uniform_prior_spread(self):
        # Causal convention: a one-hot at j spreads onto displacements
        # {0, 1, 2}, i.e. positions {j, j+1, j+2}, each 1/3.
        rng = np.random.default_rng(1)
        p = self._tiny(rng, prior_n_taps=3, prior_alpha=1.0, prior_beta=1.0)
        for t in (p.static_proj, p.dynamic_proj, p.energy, p.bias, p.static_filters,
                  p.generator.w_in, p.generator.b_in, p.generator.w_out):
            t.data[:] = 0.0
        j = 2
        prev = np.zeros(8)
        prev[j] = 1.0
        state = AlignmentState(Tensor(prev), np.ones(8, dtype=bool))
        e = dca_energies(Tensor(rng.normal(size=3)), state, p)
        out = attend(e, Tensor(rng.normal(size=(8, 2))), state)
        a = out.alignment.data
        assert np.max(np.abs(a[[j, j + 1, j + 2]] - 1.0 / 3.0)) < 1e-9
        rest = np.setdiff1d(np.arange(8), [j, j + 1, j + 2])
        assert np.all(a[rest] < 1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        p = self._tiny(rng)
        d = rng.normal(size=3)
        state = _rand_state(rng, 5)
        got = dca_energies(Tensor(d), state, p).data
        want = _dca_oracle(d, state.alignment.data, p)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_keys_never_enter(self):
        rng = np.random.default_rng(3)
        mech = DCAttention(rng, 3, 2, 4, n_static=2, n_dynamic=2, tap_len=3)
        d = Tensor(rng.normal(size=3))
        keys = rng.normal(size=(5, 2))
        perm = keys[::-1].copy()
        state = _rand_state(rng, 5)
        out1 = mech(d, Tensor(keys), state)
        out2 = mech(d, Tensor(perm), state)
        assert np.array_equal(out1.alignment.data, out2.alignment.data)
        assert not np.allclose(out1.context.data, out2.context.data)


class TestAttend:
    def test_uniform_energies(self):
        keys = np.arange(10, dtype=float).reshape(5, 2)
        state = init_alignment(5)
        out = attend(Tensor(np.zeros(5)), Tensor(keys), state)
        assert np.max(np.abs(out.alignment.data - 0.2)) < 1e-15
        assert np.max(np.abs(out.context.data - keys.mean(axis=0))) < 1e-12

    def test_saturated_energy(self):
        keys = np.eye(4)
        e = np.zeros(4)
        e[2] = 50.0
        out = attend(Tensor(e), Tensor(keys), init_alignment(4))
        assert out.alignment.data[2] > 1.0 - 1e-9
        assert np.max(np.abs(out.context.data - keys[2])) < 1e-9

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=6)
        keys = rng.normal(size=(6, 3))
        out = attend(Tensor(e), Tensor(keys), init_alignment(6))
        want = out.alignment.data @ keys
        manual = np.zeros(3)
        for j in range(6):
            manual += out.alignment.data[j] * keys[j]
        assert np.max(np.abs(out.context.data - want)) < 1e-15
        assert np.max(np.abs(out.context.data - manual)) < 1e-12

    def test_state_advances(self):
        state = init_alignment(3)
        out = attend(Tensor([0.0, 5.0, 0.0]), Tensor(np.eye(3)), state)
        assert out.state.alignment is out.alignment
        out.state.validate()


class TestInitAlignment:
    def test_length_one(self):
        assert np.array_equal(init_alignment(1).alignment.data, [1.0])

    def test_length_four(self):
        assert np.array_equal(init_alignment(4).alignment.data, [1, 0, 0, 0])

    def test_always_normalized(self):
        for L in (1, 2, 7, 33):
            s = init_alignment(L)
            s.validate()

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            init_alignment(0)


class TestInvariants:
    def test_alignment_normalization_random_steps(self):
        rng = np.random.default_rng(10)
        for trial in range(60):
            L = int(rng.integers(1, 65))
            dec_dim, key_dim, attn = 3, 2, 4
            mask = np.ones(L, dtype=bool)
            if L > 2:
                n_pad = int(rng.integers(0, L // 2))
                if n_pad:
                    mask[L - n_pad:] = False
            kind = rng.choice(["lsa", "dca"])
            if kind == "lsa":
                mech = LSAttention(rng, dec_dim, key_dim, attn, n_static=2, tap_len=3)
            else:
                mech = DCAttention(rng, dec_dim, key_dim, attn, n_static=2,
                                   n_dynamic=2, tap_len=3)
            state = _rand_state(rng, L, mask)
            out = mech(Tensor(rng.normal(size=dec_dim)),
                       Tensor(rng.normal(size=(L, key_dim))), state)
            a = out.alignment.data
            assert np.all(a >= 0)
            assert abs(a.sum() - 1.0) < 1e-9
            assert np.all(a[~mask] == 0.0)

    def test_prior_forward_drift_pins_orientation(self):
        # With zeroed trainables the alignment is repeatedly convolved with
        # the prior, so E[j] must advance by the taps' mean displacement per
        # step until mass reaches the boundary.
        rng = np.random.default_rng(11)
        p = DCAParams(rng, 3, 4, n_static=2, n_dynamic=2, tap_len=3,
                      prior_n_taps=11, prior_alpha=0.1, prior_beta=0.9)
        for t in (p.static_proj, p.dynamic_proj, p.energy, p.bias, p.static_filters,
                  p.generator.w_in, p.generator.b_in, p.generator.w_out):
            t.data[:] = 0.0
        prior_mean = float((np.arange(11) * p.prior_taps).sum())
        L = 64
        state = init_alignment(L)
        keys = Tensor(np.zeros((L, 2)))
        expected_pos = [0.0]
        for _ in range(5):
            e = dca_energies(Tensor(np.zeros(3)), state, p)
            out = attend(e, keys, state)
            state = out.state
            expected_pos.append(float((np.arange(L) * out.alignment.data).sum()))
        steps = np.diff(expected_pos)
        assert np.all(steps >= -1e-12)
        assert np.max(np.abs(steps - prior_mean)) < 1e-6

    def test_gradients_both_mechanisms(self):
        rng = np.random.default_rng(12)
        for kind in ("lsa", "dca"):
            if kind == "lsa":
                mech = LSAttention(rng, 3, 2, 4, n_static=2, tap_len=3)
            else:
                mech = DCAttention(rng, 3, 2, 4, n_static=2, n_dynamic=2, tap_len=3)
            d = Tensor(rng.normal(size=3))
            keys = Tensor(rng.normal(size=(5, 2)))
            w_a = Tensor(rng.normal(size=5))
            w_c = Tensor(rng.normal(size=2))
            state = _rand_state(rng, 5)

            def f():
                out = mech(d, keys, state, training=False)
                return tt.sum_(out.alignment * w_a) + tt.sum_(out.context * w_c)

            params = [t for _, t in mech.named_params()]
            assert finite_diff_check(f, params) < 1e-4
