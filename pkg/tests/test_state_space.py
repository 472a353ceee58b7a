import math

import numpy as np
import pytest

from conftest import gp_posterior, kalman_chain
from trajtensor.errors import DimensionMismatch, NonMonotoneTimestamp, NotSmoothed
from trajtensor.kernel_sde import MaternKernel, build_sde
from trajtensor.state_space import (
    FactorChain,
    StateGaussian,
    block_discretize,
    extract_factor,
    filtered_state_at,
    interpolate,
    predict,
    rts_smooth,
)


def smoothed_chain(sde, times, ys, noise_var, rank=1):
    chain = kalman_chain(sde, times, ys, noise_var, rank)
    chain.smoothed = rts_smooth(chain, sde)
    return chain


class TestPredict:
    def test_empty_chain_is_stationary(self):
        sde = build_sde(MaternKernel(1, 0.3, 0.3))
        s = predict(FactorChain(1, 1, rank=3), sde, 0.4)
        np.testing.assert_array_equal(s.mean, np.zeros(6))
        np.testing.assert_allclose(s.cov, np.kron(np.eye(3), sde.P_inf))
        assert s.t == 0.4

    def test_scalar_ou_step(self):
        sde = build_sde(MaternKernel(0, 1.0, 1.0))  # alpha = 1
        chain = FactorChain(1, 1, rank=1)
        chain.append(StateGaussian(np.array([1.0]), np.array([[0.1]]), 0.0))
        s = predict(chain, sde, math.log(2))
        assert s.mean[0] == pytest.approx(0.5, rel=1e-13)
        assert s.cov[0, 0] == pytest.approx(0.775, rel=1e-13)

    def test_tiny_gap_keeps_state(self):
        sde = build_sde(MaternKernel(1, 0.5, 0.2))
        chain = FactorChain(1, 1, rank=2)
        mean = np.array([0.3, -1.0, 0.7, 2.0])
        cov = np.diag([0.1, 0.2, 0.3, 0.4])
        chain.append(StateGaussian(mean, cov, 1.0))
        s = predict(chain, sde, 1.0 + 1e-12)
        np.testing.assert_allclose(s.mean, mean, atol=1e-9)
        np.testing.assert_allclose(s.cov, cov, atol=1e-9)

    def test_rejects_non_increasing(self):
        sde = build_sde(MaternKernel(0, 1.0, 1.0))
        chain = FactorChain(1, 1, rank=1)
        chain.append(StateGaussian(np.zeros(1), np.eye(1), 0.5))
        with pytest.raises(NonMonotoneTimestamp):
            predict(chain, sde, 0.5)
        with pytest.raises(NonMonotoneTimestamp):
            chain.append(StateGaussian(np.zeros(1), np.eye(1), 0.2))

    def test_block_structure_exact(self):
        sde = build_sde(MaternKernel(2, 0.5, 0.3))
        blk = block_discretize(sde, 3, 0.2)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert not blk.F_bar[3 * i:3 * i + 3, 3 * j:3 * j + 3].any()
                    assert not blk.Q_bar[3 * i:3 * i + 3, 3 * j:3 * j + 3].any()


class TestSmoothing:
    def test_single_state_unchanged(self):
        sde = build_sde(MaternKernel(1, 0.3, 0.3))
        chain = kalman_chain(sde, [0.2], [1.0], 0.1)
        sm = rts_smooth(chain, sde)
        np.testing.assert_array_equal(sm[0].mean, chain.filtered[0].mean)
        np.testing.assert_array_equal(sm[0].cov, chain.filtered[0].cov)

    def test_exact_data_is_interpolated(self):
        sde = build_sde(MaternKernel(0, 1.0, 0.5))
        times = [0.1, 0.3, 0.35, 0.7, 0.9]
        ys = [0.5, -0.2, 0.1, 1.3, 0.0]
        sm = rts_smooth(kalman_chain(sde, times, ys, 0.0), sde)
        np.testing.assert_allclose([s.mean[0] for s in sm], ys, atol=1e-10)

    @pytest.mark.parametrize("p", [0, 1, 2])
    def test_matches_dense_gp(self, p, rng):
        kernel = MaternKernel(p, 0.7, 0.3)
        sde = build_sde(kernel)
        times = np.sort(rng.uniform(0, 2, 20))
        ys = np.sin(4 * times) + 0.1 * rng.standard_normal(20)
        noise = 0.05
        sm = rts_smooth(kalman_chain(sde, times, ys, noise), sde)
        mu, var = gp_posterior(kernel, times, ys, noise, times)
        np.testing.assert_allclose([s.mean[0] for s in sm], mu, atol=1e-6)
        np.testing.assert_allclose([s.cov[0, 0] for s in sm], var, atol=1e-6)

    def test_idempotent_and_information_gain(self, rng):
        sde = build_sde(MaternKernel(1, 0.5, 0.2))
        times = np.sort(rng.uniform(0, 1, 12))
        chain = kalman_chain(sde, times, rng.standard_normal(12), 0.2, rank=2)
        a = rts_smooth(chain, sde)
        b = rts_smooth(chain, sde)
        for s1, s2 in zip(a, b):
            np.testing.assert_array_equal(s1.mean, s2.mean)
            np.testing.assert_array_equal(s1.cov, s2.cov)
        for k, s in enumerate(a):
            prior = predict(FactorChain(1, 1, 2, chain.timestamps[:k], chain.filtered[:k]), sde, chain.timestamps[k])
            assert np.linalg.eigvalsh(prior.cov - s.cov).min() >= -1e-8
            np.testing.assert_allclose(s.cov, s.cov.T, atol=1e-10)


class TestInterpolate:
    def setup_method(self):
        self.kernel = MaternKernel(1, 0.6, 0.25)
        self.sde = build_sde(self.kernel)
        rng = np.random.default_rng(7)
        self.times = np.sort(rng.uniform(0.2, 0.8, 15))
        self.ys = np.cos(6 * self.times) + 0.1 * rng.standard_normal(15)
        self.noise = 0.02
        self.chain = smoothed_chain(self.sde, self.times, self.ys, self.noise)

    def test_requires_smoothing(self):
        chain = kalman_chain(self.sde, self.times, self.ys, self.noise)
        with pytest.raises(NotSmoothed):
            interpolate(chain, self.sde, 0.5)

    def test_coincident_query(self):
        s = interpolate(self.chain, self.sde, self.times[4])
        assert s is self.chain.smoothed[4]

    def test_matches_dense_gp_everywhere(self):
        query = np.concatenate([[0.0, 0.1, 0.19], np.linspace(0.21, 0.79, 23), [0.85, 1.0, 1.5]])
        mu, var = gp_posterior(self.kernel, self.times, self.ys, self.noise, query)
        got = [interpolate(self.chain, self.sde, t) for t in query]
        np.testing.assert_allclose([s.mean[0] for s in got], mu, atol=1e-6)
        np.testing.assert_allclose([s.cov[0, 0] for s in got], var, atol=1e-6)

    def test_reverts_to_stationary_far_away(self):
        s = interpolate(self.chain, self.sde, 50.0)
        np.testing.assert_allclose(s.mean, 0, atol=1e-12)
        np.testing.assert_allclose(s.cov, self.sde.P_inf, atol=1e-12)

    def test_continuity(self):
        mid = 0.5 * (self.times[5] + self.times[6])
        for t in (mid, self.times[5]):
            c = interpolate(self.chain, self.sde, t).mean[0]
            for eps in (1e-9, -1e-9):
                assert abs(interpolate(self.chain, self.sde, t + eps).mean[0] - c) <= 1e-6

    def test_filtered_estimate_matches_gp_on_past_data(self):
        t = 0.5 * (self.times[8] + self.times[9])
        past = self.times <= t
        mu, var = gp_posterior(self.kernel, self.times[past], self.ys[past], self.noise, [t])
        s = filtered_state_at(self.chain, self.sde, t)
        assert s.mean[0] == pytest.approx(mu[0], abs=1e-6)
        assert s.cov[0, 0] == pytest.approx(var[0], abs=1e-6)


class TestExtractFactor:
    def test_p0_identity(self):
        s = StateGaussian(np.array([1.0, 2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]), 0.0)
        m, c = extract_factor(s, 1)
        np.testing.assert_array_equal(m, s.mean)
        np.testing.assert_array_equal(c, s.cov)

    def test_p1_rank2(self):
        A = np.arange(16.0).reshape(4, 4)
        s = StateGaussian(np.array([1.0, 2.0, 3.0, 4.0]), A @ A.T, 0.0)
        m, c = extract_factor(s, 2)
        np.testing.assert_array_equal(m, [1.0, 3.0])
        np.testing.assert_array_equal(c, (A @ A.T)[np.ix_([0, 2], [0, 2])])
        assert np.linalg.eigvalsh(c).min() >= -1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            extract_factor(StateGaussian(np.zeros(5), np.eye(5), 0.0), 2)
