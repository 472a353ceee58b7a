"""Conditional expectation propagation for one batch of tensor entries.

Each entry likelihood ``N(y | f(v^1, ..., v^M), 1/tau)`` is replaced by a
product of one Gaussian site per involved factor, one Gamma site for ``tau``
and, for the Tucker form, one Gaussian site on the vectorized core. Sites are
refined in parallel by conditional moment matching: the tilted distribution
of one block given all others is Gaussian (or Gamma) in closed form, and the
conditioning variables are replaced by their current posterior expectations.

Sites live in factor space (the ``R`` function values of a state); the
derivative coordinates of the SDE state are updated only through their prior
correlation with the function values.

Kronecker products and core vectorization are mode-1-major everywhere: the
core tensor ``W[r_1, ..., r_M]`` is flattened in C order (``r_M`` varies
fastest), matching ``np.kron(u^1, ..., u^M)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import kernels
from .errors import ImproperCalibration, NonPositiveRate, SingularSystem
from .kernel_sde import psd_clamp
from .state_space import StateGaussian, extract_factor

log = logging.getLogger(__name__)

CORE = "core"


@dataclass
class GaussianSite:
    target: object
    natural_precision: np.ndarray
    natural_shift: np.ndarray


@dataclass
class GammaSite:
    shape_increment: float = 0.0
    rate_increment: float = 0.0


@dataclass
class SiteSet:
    """Converged approximation of one observation's likelihood."""

    index: tuple
    y: float
    factor_sites: list
    gamma: GammaSite
    core: GaussianSite | None = None


@dataclass
class NoisePosterior:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma parameters must be positive, got ({self.shape}, {self.rate})")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass
class TuckerCorePosterior:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def standard(cls, ranks):
        n = int(np.prod(ranks))
        return cls(np.zeros(n), np.eye(n))

    @property
    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)


@dataclass
class CalibratedGaussian:
    """Cavity distribution in natural form; ``precision`` may be zero (flat)."""

    precision: np.ndarray
    shift: np.ndarray

    @property
    def cov(self):
        return np.linalg.inv(self.precision)

    @property
    def mean(self):
        return np.linalg.solve(self.precision, self.shift)


@dataclass
class CepConfig:
    max_iters: int = 50
    tol: float = 1e-4
    damping: float = 0.5
    fixed_tau: float | None = None
    learn_core: bool = True

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.fixed_tau is not None and not self.fixed_tau > 0:
            raise ValueError("fixed_tau must be positive")


@dataclass
class CepResult:
    posteriors: dict
    noise: NoisePosterior
    core: TuckerCorePosterior | None
    sites: list
    iterations: int
    converged: bool
    no_progress: bool = False
    factor_natural: dict = field(default_factory=dict)


def _is_pd(A):
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def _inv_pd(P):
    P = 0.5 * (P + P.T)
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        jitter = 1e-9 * max(np.trace(P) / P.shape[0], 1e-300)
        try:
            L = np.linalg.cholesky(P + jitter * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            raise SingularSystem("matrix is not positive definite") from None
    Linv = np.linalg.inv(L)
    C = Linv.T @ Linv
    return 0.5 * (C + C.T)


# -- per-site operations ---------------------------------------------------

def calibrate(post_precision, post_shift, site_precision, site_shift) -> CalibratedGaussian:
    """Divide a Gaussian posterior by one of its sites (natural-parameter subtraction)."""
    prec = np.atleast_2d(post_precision) - np.atleast_2d(site_precision)
    shift = np.atleast_1d(post_shift) - np.atleast_1d(site_shift)
    if not _is_pd(prec):
        raise ImproperCalibration("cavity precision is not positive definite")
    return CalibratedGaussian(prec, shift)


def calibrate_gamma(noise: NoisePosterior, site: GammaSite):
    shape = noise.shape - site.shape_increment
    rate = noise.rate - site.rate_increment
    if not (shape > 0 and rate > 0):
        raise ImproperCalibration(f"cavity Gamma({shape}, {rate}) is improper")
    return shape, rate


def hadamard_moments(means, seconds, skip=None):
    """``E[v]`` and ``E[v v^T]`` of the elementwise product of independent factors,
    leaving out mode ``skip``. The empty product is the all-ones vector/matrix."""
    R = len(means[0])
    mu = np.ones(R)
    sec = np.ones((R, R))
    for j, (m, s) in enumerate(zip(means, seconds)):
        if j != skip:
            mu = mu * m
            sec = sec * s
    return mu, sec


def _conditional_gaussian(y, calibrated, Eb, Ebb, etau):
    A = calibrated.precision + etau * Ebb
    try:
        S = _inv_pd(A)
    except SingularSystem:
        raise
    mean = S @ (calibrated.shift + etau * y * Eb)
    return mean, S


def cp_conditional_moments(y, calibrated: CalibratedGaussian, means, seconds, etau, m):
    """Moment-matched mean and covariance of factor ``m`` under the CP tilted distribution.

    ``means`` and ``seconds`` hold ``E[v^j]`` and ``E[v^j v^j^T]`` under the
    current posterior for every mode; entry ``m`` is ignored.
    """
    Eb, Ebb = hadamard_moments(means, seconds, skip=m)
    return _conditional_gaussian(y, calibrated, Eb, Ebb, etau)


def tau_tilted_params(y, alpha_cav, omega_cav, Ev, Evv):
    """Parameters of the Gamma tilted distribution of ``tau``.

    ``Ev`` and ``Evv`` are the expected full Hadamard product and its second
    moment (``R`` and ``R x R``); for Tucker pass the scalar ``E[f]`` and
    ``E[f^2]`` as 1-vectors.
    """
    Ev = np.atleast_1d(Ev)
    Evv = np.atleast_2d(Evv)
    alpha = alpha_cav + 0.5
    omega = omega_cav + 0.5 * y * y + 0.5 * Evv.sum() - y * Ev.sum()
    if not omega > 0:
        raise NonPositiveRate(f"tilted Gamma rate {omega} is not positive")
    return alpha, omega


def tucker_mode_moments(core_mean, core_second, means, seconds, m):
    """``E[b]`` and ``E[b b^T]`` for ``b = W_(m) (kron_{j != m} u^j)``."""
    ranks = [len(mu) for mu in means]
    M = len(ranks)
    others = [j for j in range(M) if j != m]
    Eu = reduce(np.kron, [means[j] for j in others], np.ones(1))
    K = reduce(np.kron, [seconds[j] for j in others], np.ones((1, 1)))
    Wm = np.moveaxis(core_mean.reshape(ranks), m, 0).reshape(ranks[m], -1)
    T = np.moveaxis(core_second.reshape(ranks + ranks), [m, M + m], [0, M])
    P = Eu.size
    T = T.reshape(ranks[m], P, ranks[m], P)
    Ebb = np.einsum("apbq,pq->ab", T, K)
    return Wm @ Eu, 0.5 * (Ebb + Ebb.T)


def tucker_core_moments(means, seconds):
    """``E[c]`` and ``E[c c^T]`` for ``c = u^1 kron ... kron u^M``."""
    return reduce(np.kron, means), reduce(np.kron, seconds)


def tucker_conditional_moments(y, calibrated, means, seconds, core, etau, target):
    """Tilted moments for a Tucker likelihood; ``target`` is a mode index or ``CORE``."""
    if target == CORE:
        Eb, Ebb = tucker_core_moments(means, seconds)
    else:
        Eb, Ebb = tucker_mode_moments(core.mean, core.second_moment, means, seconds, target)
    return _conditional_gaussian(y, calibrated, Eb, Ebb, etau)


def site_from_moments(mean, cov, calibrated: CalibratedGaussian):
    """Site natural parameters ``q* / q_cavity`` from matched moments."""
    prec = _inv_pd(cov)
    return prec - calibrated.precision, prec @ mean - calibrated.shift


def cp_predict_moments(means, seconds):
    """Mean and second moment of ``1^T (v^1 o ... o v^M)``."""
    mu, sec = hadamard_moments(means, seconds)
    return float(mu.sum()), float(sec.sum())


def tucker_predict_moments(core, means, seconds):
    Ec, Ecc = tucker_core_moments(means, seconds)
    return float(core.mean @ Ec), float((core.second_moment * Ecc).sum())


# -- batch runner ------------------------------------------------------------

def _lift(prior: StateGaussian, order, m0, C0, m_post, C_post) -> StateGaussian:
    """Posterior state given an updated factor marginal.

    Sites depend on the state only through its factor values ``v``, so
    ``q(h) = q(v) p(h | v)`` and the update is a linear-Gaussian lift.
    """
    D = prior.mean.shape[0]
    idx = np.arange(0, D, order)
    J = prior.cov[:, idx] @ _inv_pd(C0)
    mean = prior.mean + J @ (m_post - m0)
    cov = psd_clamp(prior.cov + J @ (C_post - C0) @ J.T)
    return StateGaussian(mean, cov, prior.t)


def _involved(entries, M):
    keys = sorted({(m + 1, idx[m]) for idx, _ in entries for m in range(M)})
    row = {k: i for i, k in enumerate(keys)}
    obj = np.array([[row[(m + 1, idx[m])] for m in range(M)] for idx, _ in entries], dtype=np.int64)
    return keys, obj.reshape(len(entries), M)


def run_cep_batch(entries, priors, noise: NoisePosterior, order: int, config: CepConfig | None = None,
                  form: str = "cp", core: TuckerCorePosterior | None = None) -> CepResult:
    """Approximate running posterior after absorbing one batch.

    Parameters
    ----------
    entries : sequence of (index tuple, y)
        Observations sharing one timestamp; the index tuple holds one object
        id per mode.
    priors : dict
        Prior state ``StateGaussian`` for every involved ``(mode, object)``
        key (mode 1-based).
    noise : NoisePosterior
        Running Gamma posterior of the noise precision before the batch.
    order : int
        SDE state size per factor, ``p + 1``.
    form : {"cp", "tucker"}
    core : TuckerCorePosterior, optional
        Running core posterior (Tucker only).
    """
    config = config or CepConfig()
    if not entries:
        raise ValueError("empty batch")
    M = len(entries[0][0])
    keys, obj = _involved(entries, M)
    y = np.array([float(v) for _, v in entries])
    m0, C0 = [], []
    for k in keys:
        mu, C = extract_factor(priors[k], order)
        m0.append(mu)
        C0.append(0.5 * (C + C.T))
    if form == "cp":
        out = _run_cp(y, obj, m0, C0, noise, config)
    elif form == "tucker":
        if core is None:
            raise ValueError("Tucker form needs a core posterior")
        out = _run_tucker(y, obj, m0, C0, noise, core, config)
    else:
        raise ValueError(f"unknown form {form!r}")
    means, covs, a, b, core_out, sites, iters, converged, no_progress, nat = out

    if no_progress:
        log.warning("CEP made no progress on a batch of %d entries; keeping priors", len(entries))
        posteriors = {k: priors[k] for k in keys}
        return CepResult(posteriors, noise, core, [], iters, False, True)
    posteriors = {
        k: _lift(priors[k], order, m0[i], C0[i], means[i], covs[i]) for i, k in enumerate(keys)
    }
    site_sets = []
    for e, (idx, val) in enumerate(entries):
        fs = [GaussianSite((m + 1, idx[m]), sites["prec"][e][m], sites["shift"][e][m]) for m in range(M)]
        cs = None
        if sites.get("core_prec") is not None:
            cs = GaussianSite(CORE, sites["core_prec"][e], sites["core_shift"][e])
        site_sets.append(SiteSet(tuple(idx), float(val), fs, GammaSite(sites["alpha"][e], sites["omega"][e]), cs))
    factor_natural = {k: (nat[0][i], nat[1][i]) for i, k in enumerate(keys)}
    return CepResult(posteriors, NoisePosterior(a, b), core_out, site_sets, iters, converged, False,
                     factor_natural)


def _natural(C0, m0):
    prec = np.stack([_inv_pd(C) for C in C0])
    shift = np.einsum("kij,kj->ki", prec, np.stack(m0))
    return prec, shift


def _run_cp(y, obj, m0, C0, noise, config):
    E, M = obj.shape
    R = len(m0[0])
    prior_prec, prior_shift = _natural(C0, m0)
    post_prec = prior_prec.copy()
    means = np.array(m0, dtype=float)
    covs = np.array(C0, dtype=float)
    site_prec = np.zeros((E, M, R, R))
    site_shift = np.zeros((E, M, R))
    site_omega = np.zeros(E)
    site_alpha = np.zeros(E)
    gamma_ok = np.zeros(E, dtype=np.uint8)
    a, b = noise.shape, noise.rate
    converged = no_progress = False
    it = 0
    for it in range(1, config.max_iters + 1):
        damping = 1.0 if it == 1 else config.damping
        etau = config.fixed_tau if config.fixed_tau is not None else a / b
        prev_covs = covs.copy()
        change, skipped = kernels.cp_sweep(
            y, obj, prior_prec, prior_shift, site_prec, site_shift, site_omega,
            post_prec, means, covs, b, etau, damping, gamma_ok,
        )
        site_alpha[gamma_ok == 1] = 0.5
        a = noise.shape + site_alpha.sum()
        b = noise.rate + site_omega.sum()
        if skipped == E * M + E:
            no_progress = True
            break
        change = max(change, float(np.abs(covs - prev_covs).max()))
        if change < config.tol:
            converged = True
            break
    post_shift = prior_shift.copy()
    np.add.at(post_shift, obj.reshape(-1), site_shift.reshape(-1, R))
    sites = {"prec": site_prec, "shift": site_shift, "alpha": site_alpha, "omega": site_omega}
    return means, covs, a, b, None, sites, it, converged, no_progress, (post_prec, post_shift)


def _run_tucker(y, obj, m0, C0, noise, core, config):
    E, M = obj.shape
    K = len(m0)
    prior = [( _inv_pd(C0[k]), None) for k in range(K)]
    prior_prec = [p for p, _ in prior]
    prior_shift = [prior_prec[k] @ m0[k] for k in range(K)]
    means = [np.array(mu, float) for mu in m0]
    covs = [np.array(C, float) for C in C0]
    post_prec = [P.copy() for P in prior_prec]
    learn_core = config.learn_core
    if learn_core:
        core_prior_prec = _inv_pd(core.cov)
        core_prior_shift = core_prior_prec @ core.mean
        core_post_prec = core_prior_prec.copy()
    core_mean = np.array(core.mean, float)
    core_cov = np.array(core.cov, float)
    n_core = core_mean.size

    site_prec = [[np.zeros((len(means[obj[e, m]]),) * 2) for m in range(M)] for e in range(E)]
    site_shift = [[np.zeros(len(means[obj[e, m]])) for m in range(M)] for e in range(E)]
    core_site_prec = np.zeros((E, n_core, n_core))
    core_site_shift = np.zeros((E, n_core))
    site_omega = np.zeros(E)
    site_alpha = np.zeros(E)
    a, b = noise.shape, noise.rate
    converged = no_progress = False
    it = 0
    for it in range(1, config.max_iters + 1):
        d = 1.0 if it == 1 else config.damping
        etau = config.fixed_tau if config.fixed_tau is not None else a / b
        seconds = [C + np.outer(mu, mu) for mu, C in zip(means, covs)]
        core_second = core_cov + np.outer(core_mean, core_mean)
        skipped = 0
        targets = []
        for e in range(E):
            mu_e = [means[k] for k in obj[e]]
            sec_e = [seconds[k] for k in obj[e]]
            row = []
            for m in range(M):
                k = obj[e, m]
                if not _is_pd(post_prec[k] - site_prec[e][m]):
                    row.append(None)
                    skipped += 1
                    continue
                Eb, Ebb = tucker_mode_moments(core_mean, core_second, mu_e, sec_e, m)
                row.append((etau * Ebb, etau * y[e] * Eb))
            Ec, Ecc = tucker_core_moments(mu_e, sec_e)
            if learn_core:
                if _is_pd(core_post_prec - core_site_prec[e]):
                    row.append((etau * Ecc, etau * y[e] * Ec))
                else:
                    row.append(None)
                    skipped += 1
            omega_t = 0.5 * y[e] ** 2 + 0.5 * (core_second * Ecc).sum() - y[e] * (core_mean @ Ec)
            cavity = b - site_omega[e]
            if cavity <= 0 or cavity + omega_t <= 0:
                row.append(None)
                skipped += 1
            else:
                row.append(omega_t)
            targets.append(row)
        total = E * M + E + (E if learn_core else 0)
        if skipped == total:
            no_progress = True
            break
        for e, row in enumerate(targets):
            for m in range(M):
                if row[m] is not None:
                    site_prec[e][m] = (1 - d) * site_prec[e][m] + d * row[m][0]
                    site_shift[e][m] = (1 - d) * site_shift[e][m] + d * row[m][1]
            if learn_core and row[M] is not None:
                core_site_prec[e] = (1 - d) * core_site_prec[e] + d * row[M][0]
                core_site_shift[e] = (1 - d) * core_site_shift[e] + d * row[M][1]
            if row[-1] is not None:
                site_omega[e] = (1 - d) * site_omega[e] + d * row[-1]
                site_alpha[e] = 0.5
        a = noise.shape + site_alpha.sum()
        b = noise.rate + site_omega.sum()
        post_prec = [P.copy() for P in prior_prec]
        post_shift = [s.copy() for s in prior_shift]
        for e in range(E):
            for m in range(M):
                post_prec[obj[e, m]] += site_prec[e][m]
                post_shift[obj[e, m]] += site_shift[e][m]
        change = 0.0
        for k in range(K):
            C = _inv_pd(post_prec[k])
            mu = C @ post_shift[k]
            change = max(change, float(np.abs(mu - means[k]).max()), float(np.abs(C - covs[k]).max()))
            means[k], covs[k] = mu, C
        if learn_core:
            core_post_prec = core_prior_prec + core_site_prec.sum(0)
            core_post_prec = 0.5 * (core_post_prec + core_post_prec.T)
            C = _inv_pd(core_post_prec)
            mu = C @ (core_prior_shift + core_site_shift.sum(0))
            change = max(change, float(np.abs(mu - core_mean).max()), float(np.abs(C - core_cov).max()))
            core_mean, core_cov = mu, C
        if change < config.tol:
            converged = True
            break
    post_shift = [s.copy() for s in prior_shift]
    for e in range(E):
        for m in range(M):
            post_shift[obj[e, m]] += site_shift[e][m]
    sites = {
        "prec": site_prec, "shift": site_shift, "alpha": site_alpha, "omega": site_omega,
        "core_prec": core_site_prec if learn_core else None,
        "core_shift": core_site_shift if learn_core else None,
    }
    core_out = TuckerCorePosterior(core_mean, core_cov)
    return means, covs, a, b, core_out, sites, it, converged, no_progress, (post_prec, post_shift)
