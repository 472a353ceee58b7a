"""Pure-numpy implementations of the hot loops.

These are the reference semantics for the compiled ``_kernels`` extension;
both must accept the same arguments and agree to round-off.
"""
import numpy as np

from .errors import SingularPredictCovariance

BACKEND = "python"


def _sym(C):
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def _clamp(C):
    C = _sym(C)
    w, V = np.linalg.eigh(C)
    if w[0] >= 0.0:
        return C
    C = (V * np.maximum(w, 0.0)) @ V.T
    return _sym(C)


def _cho_solve_jitter(P, B):
    """Solve ``P X = B`` for symmetric PD ``P``, with one jitter retry."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        scale = np.trace(P) / P.shape[0]
        if not scale > 0:
            raise SingularPredictCovariance("predicted covariance is singular") from None
        try:
            L = np.linalg.cholesky(P + 1e-9 * scale * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            raise SingularPredictCovariance("predicted covariance is singular") from None
    Z = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, Z)


def rts_backward(means, covs, F, Q):
    """Rauch-Tung-Striebel backward pass over filtered states.

    Parameters
    ----------
    means : (N, D) array
        Filtered means.
    covs : (N, D, D) array
        Filtered covariances.
    F, Q : (N-1, D, D) arrays
        Transition and process noise from state ``k`` to ``k+1``.

    Returns
    -------
    (N, D) and (N, D, D) arrays of smoothed means and covariances.
    """
    means = np.array(means, dtype=float)
    covs = np.array(covs, dtype=float)
    for k in range(means.shape[0] - 2, -1, -1):
        m, P = means[k], covs[k]
        Fk = F[k]
        m_pred = Fk @ m
        P_pred = _sym(Fk @ P @ Fk.T + Q[k])
        # G = P F^T P_pred^{-1}, computed as (P_pred^{-1} F P)^T
        G = _cho_solve_jitter(P_pred, Fk @ P).T
        means[k] = m + G @ (means[k + 1] - m_pred)
        covs[k] = _clamp(P + G @ (covs[k + 1] - P_pred) @ G.T)
    return means, covs


def _is_pd(A):
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def cp_sweep(y, obj, prior_prec, prior_shift, site_prec, site_shift, site_omega,
             post_prec, means, covs, rate, etau, damping, gamma_ok):
    """One parallel CEP sweep over all CP likelihood sites of a batch.

    Every site target is computed from the sweep-start posterior; sites are
    then damped in natural-parameter space and the factor posteriors rebuilt
    as prior plus the sum of sites. Arrays marked in/out are updated in place.

    Parameters
    ----------
    y : (E,) observed values.
    obj : (E, M) int array; row ``k`` of the object arrays for entry ``e``, mode ``m``.
    prior_prec, prior_shift : (K, R, R), (K, R) prior natural parameters.
    site_prec, site_shift : (E, M, R, R), (E, M, R) in/out factor sites.
    site_omega : (E,) in/out Gamma-site rate increments.
    post_prec : (K, R, R) in/out posterior precisions.
    means, covs : (K, R), (K, R, R) in/out posterior moments.
    rate : float
        Current Gamma posterior rate, used for the Gamma calibration check.
    etau : float
        Expected noise precision.
    damping : float
        Weight on the new target, in (0, 1].
    gamma_ok : (E,) uint8 out; 1 where the Gamma site was updated.

    Returns
    -------
    (max_change, n_skipped) where ``max_change`` is the largest absolute change
    in a posterior factor mean and ``n_skipped`` counts skipped site updates.
    """
    E, M = obj.shape
    K, R = means.shape
    second = covs + means[:, :, None] * means[:, None, :]
    skipped = 0
    new_prec = np.empty((E, M, R, R))
    new_shift = np.empty((E, M, R))
    upd = np.ones((E, M), dtype=bool)
    for e in range(E):
        sec_all = np.ones((R, R))
        mean_all = np.ones(R)
        for j in range(M):
            sec_all = sec_all * second[obj[e, j]]
            mean_all = mean_all * means[obj[e, j]]
        for m in range(M):
            k = obj[e, m]
            if not _is_pd(post_prec[k] - site_prec[e, m]):
                upd[e, m] = False
                skipped += 1
                continue
            sec = np.ones((R, R))
            mu = np.ones(R)
            for j in range(M):
                if j != m:
                    sec = sec * second[obj[e, j]]
                    mu = mu * means[obj[e, j]]
            new_prec[e, m] = etau * sec
            new_shift[e, m] = etau * y[e] * mu
        target = 0.5 * y[e] ** 2 + 0.5 * sec_all.sum() - y[e] * mean_all.sum()
        cavity = rate - site_omega[e]
        if cavity <= 0.0 or cavity + target <= 0.0:
            gamma_ok[e] = 0
            skipped += 1
        else:
            gamma_ok[e] = 1
            site_omega[e] = (1.0 - damping) * site_omega[e] + damping * target
    site_prec[upd] = (1.0 - damping) * site_prec[upd] + damping * new_prec[upd]
    site_shift[upd] = (1.0 - damping) * site_shift[upd] + damping * new_shift[upd]

    post_prec[:] = prior_prec
    post_shift = prior_shift.copy()
    flat = obj.reshape(-1)
    np.add.at(post_prec, flat, site_prec.reshape(-1, R, R))
    np.add.at(post_shift, flat, site_shift.reshape(-1, R))
    post_prec[:] = _sym(post_prec)
    new_covs = _sym(np.linalg.inv(post_prec))
    new_means = np.einsum("kij,kj->ki", new_covs, post_shift)
    change = float(np.abs(new_means - means).max()) if K else 0.0
    means[:] = new_means
    covs[:] = new_covs
    return change, skipped
