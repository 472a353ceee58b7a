import numpy as np
import pytest

from conftest import gp_posterior
from trajtensor.cep import CepConfig, TuckerCorePosterior
from trajtensor.data_io import generate_synthetic
from trajtensor.engine import (
    Batch,
    checkpoint,
    create_model,
    factor_trajectory,
    finalize,
    predict_entry,
    process_batch,
    restore,
    run_stream,
    smooth_chain,
)
from trajtensor.errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyModel,
    IndexOutOfRange,
    NonMonotoneTimestamp,
    UnknownObject,
)
from trajtensor.kernel_sde import MaternKernel
from trajtensor.state_space import FactorChain, StateGaussian

KERNEL = MaternKernel(1, 0.3, 0.3)


def random_batches(rng, n_batches, dims, per_batch=2):
    ts = np.sort(rng.uniform(0, 1, n_batches))
    out = []
    for t in ts:
        entries = [(tuple(int(rng.integers(1, d + 1)) for d in dims), float(rng.standard_normal()))
                   for _ in range(per_batch)]
        out.append(Batch(float(t), entries))
    return out


def assert_models_identical(a, b):
    assert sorted(a.chains) == sorted(b.chains)
    for k in a.chains:
        ca, cb = a.chains[k], b.chains[k]
        assert ca.timestamps == cb.timestamps
        for sa, sb in zip(ca.filtered, cb.filtered):
            assert np.array_equal(sa.mean, sb.mean) and np.array_equal(sa.cov, sb.cov)
    assert a.noise.shape == b.noise.shape and a.noise.rate == b.noise.rate


class TestProcessBatch:
    def test_first_batch(self):
        m = create_model((3, 4), 2, kernel=KERNEL)
        rep = process_batch(m, Batch(0.1, [((2, 3), 0.5)]))
        assert sorted(m.chains) == [(1, 2), (2, 3)]
        assert all(len(c) == 1 for c in m.chains.values())
        assert m.noise.shape == 1.0 + 0.5
        assert rep.touched == [(1, 2), (2, 3)]

    def test_disjoint_batches_leave_chains_alone(self):
        m = create_model((3, 3), 1, kernel=KERNEL)
        process_batch(m, Batch(0.1, [((1, 1), 0.5)]))
        before = {k: (c.filtered[-1].mean.copy(), len(c)) for k, c in m.chains.items()}
        process_batch(m, Batch(0.2, [((2, 2), -0.3)]))
        for k, (mean, n) in before.items():
            assert len(m.chains[k]) == n
            assert np.array_equal(m.chains[k].filtered[-1].mean, mean)

    def test_replay_is_bit_identical(self, rng):
        batches = random_batches(rng, 15, (3, 2, 4))
        a = create_model((3, 2, 4), 2, kernel=KERNEL, seed=5)
        b = create_model((3, 2, 4), 2, kernel=KERNEL, seed=5)
        run_stream(a, batches)
        run_stream(b, batches)
        assert_models_identical(a, b)

    def test_rejects_bad_input(self):
        m = create_model((2, 2), 1, kernel=KERNEL)
        process_batch(m, Batch(0.5, [((1, 1), 0.5)]))
        with pytest.raises(NonMonotoneTimestamp):
            process_batch(m, Batch(0.5, [((1, 2), 0.5)]))
        with pytest.raises(IndexOutOfRange):
            process_batch(m, Batch(0.6, [((3, 1), 0.5)]))
        with pytest.raises(IndexOutOfRange):
            process_batch(m, Batch(0.6, [((0, 1), 0.5)]))
        with pytest.raises(DimensionMismatch):
            process_batch(m, Batch(0.6, [((1, 1, 1), 0.5)]))
        assert m.n_batches == 1

    def test_chain_lengths_count_appearances(self, rng):
        batches = random_batches(rng, 30, (4, 3), per_batch=3)
        m = create_model((4, 3), 1, kernel=KERNEL)
        run_stream(m, batches)
        for (mode, obj), chain in m.chains.items():
            expected = sum(any(idx[mode - 1] == obj for idx, _ in b.entries) for b in batches)
            assert len(chain) == expected

    def test_gamma_shape_ledger(self, rng):
        batches = random_batches(rng, 25, (3, 3), per_batch=3)
        m = create_model((3, 3), 2, kernel=KERNEL, noise_prior=(2.0, 0.5))
        run_stream(m, batches)
        assert m.noise.shape == pytest.approx(2.0 + 75 / 2, abs=1e-9)

    def test_keeps_no_batch_data(self, rng):
        m = create_model((2, 2), 1, kernel=KERNEL)
        run_stream(m, random_batches(rng, 5, (2, 2)))
        held = [v for v in vars(m).values() if isinstance(v, (list, Batch))]
        assert held == []


class TestLinearGaussianReduction:
    @pytest.mark.parametrize("p", [0, 1])
    def test_matches_dense_gp(self, p, rng):
        kernel = MaternKernel(p, 0.7, 0.25)
        times = np.sort(rng.uniform(0, 1, 20))
        ys = np.sin(5 * times) + 0.1 * rng.standard_normal(20)
        noise = 0.04
        m = create_model((1,), 1, kernel=kernel, cep=CepConfig(fixed_tau=1 / noise))
        run_stream(m, [Batch(t, [((1,), y)]) for t, y in zip(times, ys)])
        chain = m.chains[(1, 1)]
        for k in range(len(times)):
            mu, var = gp_posterior(kernel, times[: k + 1], ys[: k + 1], noise, [times[k]])
            assert chain.filtered[k].mean[0] == pytest.approx(mu[0], abs=1e-6)
            assert chain.filtered[k].cov[0, 0] == pytest.approx(var[0], abs=1e-6)
        finalize(m)
        mu, var = gp_posterior(kernel, times, ys, noise, times)
        np.testing.assert_allclose([s.mean[0] for s in chain.smoothed], mu, atol=1e-6)
        np.testing.assert_allclose([s.cov[0, 0] for s in chain.smoothed], var, atol=1e-6)


class TestFinalize:
    def test_empty_model(self):
        with pytest.raises(EmptyModel):
            finalize(create_model((2, 2), 1, kernel=KERNEL))

    def test_single_batch(self):
        m = create_model((2, 2), 1, kernel=KERNEL)
        process_batch(m, Batch(0.3, [((1, 2), 0.4)]))
        finalize(m)
        for c in m.chains.values():
            assert np.array_equal(c.smoothed[0].mean, c.filtered[0].mean)

    def test_idempotent_and_thread_count_independent(self, rng, monkeypatch):
        batches = random_batches(rng, 20, (3, 3))
        results = []
        for threads in ("1", "3", "3"):
            monkeypatch.setenv("SFTL_THREADS", threads)
            m = create_model((3, 3), 2, kernel=KERNEL)
            run_stream(m, batches)
            finalize(m)
            results.append({k: [s.mean.copy() for s in c.smoothed] for k, c in m.chains.items()})
            finalize(m)
            for k, c in m.chains.items():
                for s, ref in zip(c.smoothed, results[-1][k]):
                    assert np.array_equal(s.mean, ref)
        for r in results[1:]:
            for k in r:
                for a, b in zip(r[k], results[0][k]):
                    assert np.array_equal(a, b)

    def test_on_demand_single_chain(self, rng):
        m = create_model((2, 2), 1, kernel=KERNEL)
        run_stream(m, random_batches(rng, 8, (2, 2)))
        chain = smooth_chain(m, 1, 1)
        assert chain.smoothed is not None
        assert all(c.smoothed is None for k, c in m.chains.items() if k != (1, 1))
        with pytest.raises(UnknownObject):
            smooth_chain(m, 1, 7)


def deterministic_model(values, R, form="cp"):
    """Model whose chains hold exact (zero-covariance) factor states."""
    M = len(values)
    m = create_model((3,) * M, R, form, MaternKernel(0, 1.0, 1.0))
    for mode, vec in enumerate(values, start=1):
        ch = FactorChain(mode, 1, R)
        ch.append(StateGaussian(np.asarray(vec, float), np.zeros((R, R)), 0.5))
        ch.smoothed = list(ch.filtered)
        m.chains[(mode, 1)] = ch
    m.n_batches = 1
    return m


class TestPredictEntry:
    def test_zero_means(self):
        m = create_model((2, 2), 2, kernel=KERNEL)
        mean, var = predict_entry(m, (1, 2), 0.5)
        assert mean == 0.0
        assert var > 1 / m.noise.mean

    def test_deterministic_product(self):
        m = deterministic_model([[2.0], [3.0]], 1)
        mean, var = predict_entry(m, (1, 1), 0.5)
        assert mean == pytest.approx(6.0)
        assert var == pytest.approx(1 / m.noise.mean)

    def test_orthogonal_factors(self):
        m = deterministic_model([[1.0, 0.0], [0.0, 1.0]], 2)
        assert predict_entry(m, (1, 1), 0.5)[0] == 0.0

    def test_tucker_plugin(self):
        m = deterministic_model([[2.0], [3.0]], 1, form="tucker")
        m.core = TuckerCorePosterior(np.array([0.5]), np.zeros((1, 1)))
        assert predict_entry(m, (1, 1), 0.5)[0] == pytest.approx(3.0)

    def test_out_of_range(self):
        m = create_model((2, 2), 1, kernel=KERNEL)
        with pytest.raises(UnknownObject):
            predict_entry(m, (3, 1), 0.5)

    def test_trajectory_query_requires_known_object(self, rng):
        m = create_model((2, 5), 1, kernel=KERNEL)
        process_batch(m, Batch(0.1, [((1, 1), 0.2)]))
        with pytest.raises(UnknownObject, match="known objects"):
            factor_trajectory(m, 2, 4, [0.1])


class TestTucker:
    def test_frozen_diagonal_core_matches_cp(self, rng):
        R = 2
        batches = random_batches(rng, 10, (3, 3))
        cp = create_model((3, 3), R, "cp", KERNEL, seed=3)
        core = np.zeros((R, R))
        core[0, 0] = core[1, 1] = 1.0
        tk = create_model((3, 3), R, "tucker", KERNEL, seed=3, cep=CepConfig(learn_core=False),
                          core=TuckerCorePosterior(core.ravel(), np.zeros((R * R, R * R))))
        run_stream(cp, batches)
        run_stream(tk, batches)
        for k in cp.chains:
            for a, b in zip(cp.chains[k].filtered, tk.chains[k].filtered):
                np.testing.assert_allclose(b.mean, a.mean, atol=1e-8)
                np.testing.assert_allclose(b.cov, a.cov, atol=1e-8)

    def test_learns_core_across_batches(self, rng):
        m = create_model((2, 3, 2), (2, 1, 2), "tucker", KERNEL)
        run_stream(m, random_batches(rng, 12, (2, 3, 2)))
        assert m.core.mean.shape == (4,)
        assert np.linalg.eigvalsh(m.core.cov).min() > 0
        assert np.trace(m.core.cov) < 4.0
        finalize(m)
        mean, var = predict_entry(m, (1, 2, 2), 0.5)
        assert np.isfinite(mean) and var > 0


class TestCheckpoint:
    def test_empty_model(self):
        m = create_model((2, 3), 2, kernel=KERNEL, seed=9)
        r = restore(checkpoint(m))
        assert r.chains == {} and r.n_batches == 0
        assert r.mode_dims == (2, 3) and r.ranks == (2, 2) and r.seed == 9
        assert r.noise.shape == m.noise.shape

    @pytest.mark.parametrize("form", ["cp", "tucker"])
    def test_resume_is_bit_identical(self, form, rng):
        batches = random_batches(rng, 20, (3, 2))
        full = create_model((3, 2), 2, form, KERNEL)
        run_stream(full, batches)
        part = create_model((3, 2), 2, form, KERNEL)
        run_stream(part, batches[:11])
        resumed = restore(checkpoint(part))
        run_stream(resumed, batches[11:])
        assert_models_identical(full, resumed)
        if form == "tucker":
            assert np.array_equal(full.core.mean, resumed.core.mean)
        finalize(full)
        finalize(resumed)
        assert predict_entry(full, (2, 1), 0.37) == predict_entry(resumed, (2, 1), 0.37)

    def test_smoothed_states_survive(self, rng):
        m = create_model((2, 2), 1, kernel=KERNEL)
        run_stream(m, random_batches(rng, 6, (2, 2)))
        finalize(m)
        r = restore(checkpoint(m))
        for k, c in m.chains.items():
            for a, b in zip(c.smoothed, r.chains[k].smoothed):
                assert np.array_equal(a.mean, b.mean)

    def test_corrupt_inputs(self, rng):
        m = create_model((2, 2), 1, kernel=KERNEL)
        run_stream(m, random_batches(rng, 4, (2, 2)))
        data = checkpoint(m)
        with pytest.raises(CorruptCheckpoint):
            restore(data[:-10])
        with pytest.raises(CorruptCheckpoint):
            restore(b"nonsense" + data[8:])
        bumped = data[:8] + (99).to_bytes(4, "little") + data[12:]
        with pytest.raises(CorruptCheckpoint, match="version"):
            restore(bumped)
        with pytest.raises(CorruptCheckpoint):
            restore(b"")


def test_synthetic_stream_runs_fast():
    stream, _ = generate_synthetic(0, n_timestamps=100)
    m = create_model((2, 2), 1, kernel=KERNEL)
    reps = run_stream(m, stream.batches())
    assert len(reps) == 100
    assert all(r.converged for r in reps[-10:])
