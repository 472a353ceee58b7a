import numpy as np
import pytest

from trajtensor.kernel_sde import kernel_value
from trajtensor.state_space import FactorChain, StateGaussian, factor_selector, predict


def gp_posterior(kernel, times, ys, noise_var, query):
    """Dense GP regression: posterior mean and variance of f at ``query``."""
    times = np.asarray(times, float)
    query = np.asarray(query, float)
    K = kernel_value(kernel, np.abs(times[:, None] - times[None, :]))
    Ks = kernel_value(kernel, np.abs(times[:, None] - query[None, :]))
    Kss = kernel_value(kernel, np.zeros(len(query)))
    C = K + noise_var * np.eye(len(times))
    L = np.linalg.cholesky(C)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, ys))
    V = np.linalg.solve(L, Ks)
    return Ks.T @ alpha, Kss - (V * V).sum(0)


def kalman_chain(sde, times, ys, noise_var, rank=1):
    """Chain of running posteriors from direct observations of factor 1."""
    chain = FactorChain(mode=1, obj=1, rank=rank)
    H = factor_selector(rank, sde.order)[:1]
    for t, y in zip(times, ys):
        prior = predict(chain, sde, t)
        if noise_var == 0:
            S = H @ prior.cov @ H.T
        else:
            S = H @ prior.cov @ H.T + noise_var
        K = prior.cov @ H.T / S
        mean = prior.mean + (K * (y - H @ prior.mean)).ravel()
        cov = prior.cov - K @ H @ prior.cov
        chain.append(StateGaussian(mean, 0.5 * (cov + cov.T), t))
    return chain


@pytest.fixture
def rng():
    return np.random.default_rng(20231015)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
