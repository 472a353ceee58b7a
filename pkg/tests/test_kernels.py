import numpy as np
import pytest

from trajtensor import kernels
from trajtensor.errors import SingularPredictCovariance

BACKENDS = kernels.available_backends()


def random_spd(rng, n, shift=0.1):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + shift * np.eye(n)


def rts_inputs(rng, N=6, D=4):
    means = rng.standard_normal((N, D))
    covs = np.stack([random_spd(rng, D) for _ in range(N)])
    F = np.array([np.eye(D) + 0.1 * rng.standard_normal((D, D)) for _ in range(N - 1)]).reshape(N - 1, D, D)
    Q = np.array([random_spd(rng, D, 0.05) for _ in range(N - 1)]).reshape(N - 1, D, D)
    return means, covs, F, Q


def sweep_inputs(rng, E=5, M=3, K=6, R=2):
    obj = rng.integers(0, K, (E, M)).astype(np.int64)
    prior_prec = np.stack([random_spd(rng, R, 0.5) for _ in range(K)])
    prior_shift = rng.standard_normal((K, R))
    covs = np.linalg.inv(prior_prec)
    means = np.einsum("kij,kj->ki", covs, prior_shift)
    return dict(
        y=rng.standard_normal(E), obj=obj, prior_prec=prior_prec, prior_shift=prior_shift,
        site_prec=np.zeros((E, M, R, R)), site_shift=np.zeros((E, M, R)), site_omega=np.zeros(E),
        post_prec=prior_prec.copy(), means=means, covs=covs, gamma_ok=np.zeros(E, dtype=np.uint8),
    )


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in ("python", "compiled")


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_rts_single_state_is_identity(name, rng):
    m, c, F, Q = rts_inputs(rng, N=1)
    sm, sc = BACKENDS[name].rts_backward(m, c, F, Q)
    np.testing.assert_array_equal(sm, m)
    np.testing.assert_array_equal(sc, c)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_rts_does_not_mutate_inputs(name, rng):
    m, c, F, Q = rts_inputs(rng)
    m0, c0 = m.copy(), c.copy()
    BACKENDS[name].rts_backward(m, c, F, Q)
    np.testing.assert_array_equal(m, m0)
    np.testing.assert_array_equal(c, c0)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_rts_singular_prediction_raises(name):
    D = 2
    m = np.zeros((2, D))
    c = np.zeros((2, D, D))
    F = np.zeros((1, D, D))
    Q = np.zeros((1, D, D))
    with pytest.raises(SingularPredictCovariance):
        BACKENDS[name].rts_backward(m, c, F, Q)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernels not built")
class TestCompiledMatchesPython:
    @pytest.mark.parametrize("D", [1, 3, 6])
    def test_rts(self, D, rng):
        args = rts_inputs(rng, N=9, D=D)
        a = BACKENDS["python"].rts_backward(*args)
        b = BACKENDS["compiled"].rts_backward(*args)
        np.testing.assert_allclose(b[0], a[0], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(b[1], a[1], rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("R,M", [(1, 2), (2, 3), (3, 2)])
    def test_sweeps(self, R, M, rng):
        base = sweep_inputs(rng, M=M, R=R)
        states = {n: {k: v.copy() for k, v in base.items()} for n in ("python", "compiled")}
        for it in range(6):
            outs = {}
            for n, s in states.items():
                outs[n] = BACKENDS[n].cp_sweep(
                    s["y"], s["obj"], s["prior_prec"], s["prior_shift"], s["site_prec"], s["site_shift"],
                    s["site_omega"], s["post_prec"], s["means"], s["covs"], 2.0 + it, 3.0,
                    1.0 if it == 0 else 0.5, s["gamma_ok"],
                )
            assert outs["compiled"][1] == outs["python"][1]
            assert outs["compiled"][0] == pytest.approx(outs["python"][0], rel=1e-8, abs=1e-12)
            for k in ("site_prec", "site_shift", "site_omega", "post_prec", "means", "covs", "gamma_ok"):
                np.testing.assert_allclose(states["compiled"][k], states["python"][k], rtol=1e-9, atol=1e-11)
