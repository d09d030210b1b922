"""Mixer block tests against a straight-line expression oracle."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import erf

from conftest import fd_param_check
from tabnsa.autodiff import Tensor
from tabnsa.tabmixer import LN_EPS, init_tabmixer_params, layer_norm, tabmixer_forward

RNG = np.random.default_rng(123)


def oracle_forward(x, p):
    """Term-by-term numpy evaluation, independent of the autodiff engine."""

    def ln(u, scale, shift):
        mu = u.mean(axis=-1, keepdims=True)
        var = ((u - mu) ** 2).mean(axis=-1, keepdims=True)
        return (u - mu) / np.sqrt(var + LN_EPS) * scale + shift

    def gelu(u):
        return 0.5 * u * (1.0 + erf(u / np.sqrt(2.0)))

    def silu(u):
        return u / (1.0 + np.exp(-u))

    xt = np.swapaxes(x, -1, -2)
    mlp1 = ln(xt, p["ln1_scale"].data, p["ln1_shift"].data) @ p["w1"].data.T + p["b1"].data
    mlp2 = ln(x, p["ln2_scale"].data, p["ln2_shift"].data) @ p["w2"].data.T + p["b2"].data
    return silu(np.swapaxes(gelu(mlp1), -1, -2) * mlp2) + x


class TestLayerNorm:
    def test_constant_vector_becomes_shift(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = layer_norm(x, Tensor(np.ones(5)), Tensor(np.full(5, 0.25))).numpy()
        npt.assert_allclose(out, np.full((2, 5), 0.25), atol=1e-12)

    def test_two_point_closed_form(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).numpy()
        expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + LN_EPS)
        npt.assert_allclose(out, expected, atol=1e-15)

    def test_zero_mean_without_shift(self):
        x = Tensor(RNG.normal(size=(3, 4, 7)))
        out = layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7))).numpy()
        npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)


class TestForward:
    def test_zeroed_mlps_are_identity(self):
        x = RNG.normal(size=(2, 5, 3))
        p = init_tabmixer_params(5, 3, RNG)
        p["w1"].data[:] = 0.0
        p["w2"].data[:] = 0.0
        out = tabmixer_forward(Tensor(x), p).numpy()
        assert np.array_equal(out, x)

    def test_matches_straight_line_oracle(self):
        x = RNG.normal(size=(1, 3, 4))
        p = init_tabmixer_params(3, 4, RNG)
        for t in p.values():  # nonzero biases and shifts to exercise every term
            t.data[:] = RNG.normal(size=t.data.shape)
        got = tabmixer_forward(Tensor(x), p).numpy()
        npt.assert_allclose(got, oracle_forward(x, p), atol=1e-12)

    def test_batched_matches_per_sample(self):
        xs = RNG.normal(size=(4, 6, 5))
        p = init_tabmixer_params(6, 5, RNG)
        batched = tabmixer_forward(Tensor(xs), p).numpy()
        for b in range(4):
            single = tabmixer_forward(Tensor(xs[b : b + 1]), p).numpy()
            npt.assert_allclose(batched[b], single[0], atol=1e-12)

    def test_nonlinearity_witness(self):
        x = RNG.normal(size=(1, 4, 4))
        p = init_tabmixer_params(4, 4, RNG)
        z1 = tabmixer_forward(Tensor(2.0 * x), p).numpy()
        z2 = 2.0 * tabmixer_forward(Tensor(x), p).numpy()
        assert np.max(np.abs(z1 - z2)) > 1e-3

    @pytest.mark.parametrize("n,d", [(1, 1), (2, 7), (8, 3), (5, 5)])
    def test_shape_preserved(self, n, d):
        x = RNG.normal(size=(2, n, d))
        p = init_tabmixer_params(n, d, RNG)
        assert tabmixer_forward(Tensor(x), p).shape == (2, n, d)

    def test_deterministic(self):
        x = RNG.normal(size=(2, 4, 3))
        p = init_tabmixer_params(4, 3, np.random.default_rng(0))
        a = tabmixer_forward(Tensor(x), p).numpy()
        b = tabmixer_forward(Tensor(x), p).numpy()
        assert np.array_equal(a, b)


class TestGradients:
    def test_all_params_and_input_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x_data = rng.normal(size=(2, 6, 8))
        p = init_tabmixer_params(6, 8, rng)
        for t in p.values():
            t.data[:] = rng.normal(size=t.data.shape) * 0.3
        p["x"] = Tensor(x_data, requires_grad=True)
        weight = rng.normal(size=(2, 6, 8))

        def loss():
            y = tabmixer_forward(p["x"], p)
            return (y * Tensor(weight)).sum()

        fd_param_check(loss, p, rng, samples=None)  # exhaustive: every scalar
