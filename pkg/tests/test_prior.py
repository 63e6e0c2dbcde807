import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ndk_dynamics import ConfigError, DynamicsParams, decay_factor, prior_cov
from ndk_dynamics.prior import stationary_cov


class TestDynamicsParams:
    def test_defaults_and_rate(self):
        p = DynamicsParams(T=0.5, sigma2=2.0)
        assert p.rate == 0.25
        assert not p.stationary
        assert DynamicsParams(T=0.5, sigma2=2.0, sigma0_2=2.0).stationary

    @pytest.mark.parametrize("kwargs", [
        {"T": -1.0}, {"T": 1.0, "sigma2": 0.0}, {"T": 1.0, "sigma0_2": -2.0},
        {"T": 1.0, "dt": 0.0}, {"T": 1.0, "t_max": 0.001, "dt": 0.01},
        {"T": 1.0, "dt_coarse": 0.0}, {"T": float("nan")},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DynamicsParams(**kwargs)

    def test_two_scale_defaults(self):
        p = DynamicsParams.two_scale(T=1e-3)
        assert p.t_max == pytest.approx(1e4)
        assert p.dt_coarse == pytest.approx(1.0)
        assert DynamicsParams.two_scale(T=1.0).dt_coarse == 0.01
        with pytest.raises(ConfigError):
            DynamicsParams.two_scale(T=0.0)


class TestPriorCov:
    def test_known_value(self):
        p = DynamicsParams(T=0.5, sigma2=1.0, sigma0_2=2.0)
        np.testing.assert_allclose(prior_cov(p, 1.0, 1.0), 1.0 + np.exp(-1.0), rtol=1e-14)

    def test_initial_and_stationary_limits(self):
        p = DynamicsParams(T=0.1, sigma2=1.5, sigma0_2=0.3)
        assert prior_cov(p, 0.0, 0.0) == pytest.approx(0.3, rel=1e-15)
        assert prior_cov(p, 1e4, 1e4) == pytest.approx(1.5, rel=1e-12)
        np.testing.assert_allclose(prior_cov(p, 1e4 + 3.0, 1e4), stationary_cov(p, 3.0), rtol=1e-12)

    def test_zero_temperature_is_frozen(self):
        p = DynamicsParams(T=0.0, sigma2=1.0, sigma0_2=2.0)
        np.testing.assert_array_equal(prior_cov(p, [0.0, 5.0, 50.0], 7.0), 2.0)
        assert decay_factor(p, 0.0, 100.0) == 1.0

    def test_broadcasting_and_scalar_return(self):
        p = DynamicsParams(T=0.2)
        out = prior_cov(p, np.arange(3)[:, None], np.arange(4)[None, :])
        assert out.shape == (3, 4)
        assert isinstance(prior_cov(p, 1.0, 2.0), float)

    @settings(max_examples=60, deadline=None)
    @given(T=st.floats(1e-4, 2.0), s2=st.floats(0.1, 4.0), s0=st.floats(0.1, 4.0),
           t=st.floats(0.0, 50.0), tp=st.floats(0.0, 50.0))
    def test_symmetric_and_psd(self, T, s2, s0, t, tp):
        p = DynamicsParams(T=T, sigma2=s2, sigma0_2=s0)
        assert prior_cov(p, t, tp) == prior_cov(p, tp, t)
        m = np.array([[prior_cov(p, t, t), prior_cov(p, t, tp)],
                      [prior_cov(p, tp, t), prior_cov(p, tp, tp)]])
        assert np.linalg.eigvalsh(m).min() >= -1e-12 * m.max()

    def test_matches_simulated_ou_process(self):
        # exact OU transition: w' = e^{-r h} w + sqrt(s2 (1 - e^{-2 r h})) xi
        p = DynamicsParams(T=0.5, sigma2=1.0, sigma0_2=3.0)
        rng = np.random.default_rng(1)
        n, h = 400_000, 0.5
        w0 = np.sqrt(p.sigma0_2) * rng.standard_normal(n)
        w1 = w0.copy()
        for _ in range(4):
            w1 = np.exp(-p.rate * h) * w1 + np.sqrt(p.sigma2 * (1 - np.exp(-2 * p.rate * h))) * rng.standard_normal(n)
        est = np.mean(w1 * w0)
        se = np.std(w1 * w0) / np.sqrt(n)
        assert abs(est - prior_cov(p, 2.0, 0.0)) < 4 * se
