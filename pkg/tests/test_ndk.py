import math

import numpy as np
import pytest

from ndk_dynamics import DynamicsParams, KernelInputs, ndk, nngp_equilibrium_kernel, ntk
from ndk_dynamics.ndk import long_time_integral, ndk_parts, stationary_ndk_parts
from ndk_dynamics.prior import prior_cov

from .oracles import random_input_pair, standard_nngp, standard_ntk

ACTS = ["linear", "relu", "erf"]


class TestDocumentedValues:
    def test_linear_closed_form(self):
        one = KernelInputs(1.0, 1.0, 1.0)
        assert ndk("linear", 2, DynamicsParams(T=0.0), 0, 0, one) == pytest.approx(3.0)
        p = DynamicsParams(T=0.2, sigma2=1.3, sigma0_2=0.4)
        g = KernelInputs(1.0, 0.3, 2.0)
        for L in (1, 2, 3):
            t, tp = 2.0, 5.0
            m = prior_cov(p, t, tp)
            expected = m ** L * (L + 1) * math.exp(-p.rate * 3.0) * 0.3
            np.testing.assert_allclose(ndk("linear", L, p, t, tp, g), expected, rtol=1e-13)

    def test_relu_orthogonal(self):
        g = KernelInputs(1.0, 0.0, 1.0)
        np.testing.assert_allclose(ndk("relu", 1, DynamicsParams(T=0.0), 0, 0, g), 1 / (2 * math.pi), rtol=1e-14)

    def test_ntk_values(self):
        assert ntk("linear", 1, 1.0, KernelInputs(1.0, 0.5, 1.0)) == pytest.approx(1.0)
        assert ntk("relu", 1, 1.0, KernelInputs(1.0, 1.0, 1.0)) == pytest.approx(1.0)

    def test_nngp_values(self):
        assert nngp_equilibrium_kernel("relu", 1, 1.0, KernelInputs(1.0, 1.0, 1.0)) == pytest.approx(0.5)
        assert nngp_equilibrium_kernel("relu", 1, 1.0, KernelInputs(1.0, 0.0, 1.0)) == pytest.approx(1 / (2 * math.pi))
        assert nngp_equilibrium_kernel("linear", 3, 2.0, KernelInputs(1.0, 0.25, 1.0)) == pytest.approx(2.0)

    @pytest.mark.parametrize("act", ACTS)
    def test_zero_temperature_is_frozen(self, act):
        p = DynamicsParams(T=0.0, sigma2=0.8, sigma0_2=0.8)
        g = KernelInputs(1.0, 0.4, 1.2)
        t = np.array([0.0, 3.0, 100.0])
        np.testing.assert_allclose(ndk(act, 2, p, t, t[::-1], g), ndk(act, 2, p, 0, 0, g), rtol=1e-14)


class TestProperties:
    @pytest.mark.parametrize("act", ACTS)
    @pytest.mark.parametrize("L", [1, 2, 3, 4])
    def test_ntk_matches_standard_recursion(self, act, L, rng):
        for _ in range(20):
            kxx, kxy, kyy = random_input_pair(rng)
            var = rng.uniform(0.3, 2.5)
            ours = ntk(act, L, var, KernelInputs(kxx, kxy, kyy))
            np.testing.assert_allclose(ours, standard_ntk(act, L, var, kxx, kxy, kyy), rtol=1e-12)
            np.testing.assert_allclose(nngp_equilibrium_kernel(act, L, var, KernelInputs(kxx, kxy, kyy)),
                                       standard_nngp(act, L, var, kxx, kxy, kyy), rtol=1e-12, atol=1e-300)

    @pytest.mark.parametrize("act", ACTS)
    def test_exchange_symmetry(self, act):
        p = DynamicsParams(T=0.05, sigma0_2=0.5)
        g = KernelInputs(0.9, -0.2, 1.6)
        np.testing.assert_allclose(ndk(act, 3, p, 1.0, 7.0, g), ndk(act, 3, p, 7.0, 1.0, g.swapped()), rtol=1e-12)

    @pytest.mark.parametrize("act", ACTS)
    def test_stationarity(self, act):
        p = DynamicsParams(T=0.05, sigma2=1.5, sigma0_2=1.5)
        g = KernelInputs(0.9, 0.5, 1.1)
        t, tp = np.array([0.0, 1.0, 4.0]), np.array([2.0, 0.0, 30.0])
        base = ndk(act, 2, p, t, tp, g)
        for s in (0.5, 10.0, 300.0):
            np.testing.assert_allclose(ndk(act, 2, p, t + s, tp + s, g), base, rtol=1e-12)
        np.testing.assert_allclose(stationary_ndk_parts(act, 2, p, t - tp, g).kd, base, rtol=1e-12)

    def test_parts_decomposition(self):
        p = DynamicsParams(T=0.1, sigma0_2=0.5)
        g = KernelInputs(1.0, 0.3, 1.0)
        parts = ndk_parts("relu", 2, p, 1.0, 3.0, g)
        m = prior_cov(p, 1.0, 3.0)
        e = math.exp(-p.rate * 2.0)
        np.testing.assert_allclose(parts.kd, m * parts.hidden + e * parts.readout, rtol=1e-15)


class TestLongTimeIntegral:
    @pytest.mark.parametrize("act,L", [("linear", 1), ("linear", 2), ("relu", 1), ("relu", 2), ("erf", 2)])
    def test_identity(self, act, L):
        T = 0.01
        p = DynamicsParams(T=T, sigma2=1.2, sigma0_2=1.2)
        g = KernelInputs(1.0, 0.6, 1.0)
        got = long_time_integral(act, L, p, g, 20 / T)
        expected = p.sigma2 / T * nngp_equilibrium_kernel(act, L, p.sigma2, g)
        assert abs(got / expected - 1) < 1e-2

    def test_empty_window(self):
        assert long_time_integral("relu", 1, DynamicsParams(T=0.1), KernelInputs(1, 1, 1), 0.0) == 0.0
