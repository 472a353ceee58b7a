# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``_kernels_py``.

Matrices here are tiny (state size ``R * (p + 1)``, factor size ``R``), so
plain loops with an in-place Cholesky beat calls into LAPACK.
"""
import numpy as np

from libc.math cimport sqrt, fabs

from .errors import SingularPredictCovariance

BACKEND = "compiled"


cdef int _chol(double[:, ::1] A, double[:, ::1] L, int n) noexcept nogil:
    """Lower Cholesky factor of ``A`` into ``L``; returns 0 on failure."""
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:
                    return 0
                L[i, i] = sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return 1


cdef void _chol_solve(double[:, ::1] L, double[:, ::1] B, int n, int ncol) noexcept nogil:
    """Overwrite ``B`` with ``(L L^T)^{-1} B``."""
    cdef int i, k, c
    cdef double s
    for c in range(ncol):
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * B[k, c]
            B[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = B[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * B[k, c]
            B[i, c] = s / L[i, i]


cdef int _chol_jitter(double[:, ::1] P, double[:, ::1] L, int n) noexcept nogil:
    cdef int i
    cdef double tr = 0.0, jitter
    if _chol(P, L, n):
        return 1
    for i in range(n):
        tr += P[i, i]
    if not tr > 0.0:
        return 0
    jitter = 1e-9 * tr / n
    for i in range(n):
        P[i, i] += jitter
    return _chol(P, L, n)


cdef void _symmetrize(double[:, ::1] A, int n) noexcept nogil:
    cdef int i, j
    cdef double v
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (A[i, j] + A[j, i])
            A[i, j] = v
            A[j, i] = v


def _clamp_py(C):
    w, V = np.linalg.eigh(C)
    if w[0] >= 0.0:
        return C
    C = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (C + C.T)


def rts_backward(means, covs, F, Q):
    """Rauch-Tung-Striebel backward pass; same contract as the Python version."""
    cdef double[:, ::1] mv
    cdef double[:, :, ::1] cv
    out_m = np.array(means, dtype=np.float64, order="C")
    out_c = np.array(covs, dtype=np.float64, order="C")
    cdef double[:, :, ::1] Fv = np.ascontiguousarray(F, dtype=np.float64)
    cdef double[:, :, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    mv = out_m
    cv = out_c
    cdef int N = mv.shape[0], D = mv.shape[1]
    cdef int k, i, j, l, ok
    cdef double s
    cdef double[::1] m_pred = np.empty(D)
    cdef double[::1] diff = np.empty(D)
    cdef double[:, ::1] FP = np.empty((D, D))
    cdef double[:, ::1] P_pred = np.empty((D, D))
    cdef double[:, ::1] L = np.empty((D, D))
    cdef double[:, ::1] X = np.empty((D, D))
    cdef double[:, ::1] T = np.empty((D, D))
    cdef double[:, ::1] Cnew
    cdef double[:, ::1] Lc = np.empty((D, D))
    for k in range(N - 2, -1, -1):
        with nogil:
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += Fv[k, i, j] * mv[k, j]
                m_pred[i] = s
                for j in range(D):
                    s = 0.0
                    for l in range(D):
                        s += Fv[k, i, l] * cv[k, l, j]
                    FP[i, j] = s
            for i in range(D):
                for j in range(D):
                    s = Qv[k, i, j]
                    for l in range(D):
                        s += FP[i, l] * Fv[k, j, l]
                    P_pred[i, j] = s
            _symmetrize(P_pred, D)
            for i in range(D):
                for j in range(D):
                    X[i, j] = FP[i, j]
            # keep an unjittered copy of P_pred for the covariance update
            for i in range(D):
                for j in range(D):
                    T[i, j] = P_pred[i, j]
            ok = _chol_jitter(T, L, D)
        if not ok:
            raise SingularPredictCovariance("predicted covariance is singular")
        with nogil:
            _chol_solve(L, X, D, D)
            # X = P_pred^{-1} F P, so G = X^T
            for i in range(D):
                diff[i] = mv[k + 1, i] - m_pred[i]
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += X[j, i] * diff[j]
                mv[k, i] += s
            # T = (P_{k+1} - P_pred) G^T
            for i in range(D):
                for j in range(D):
                    s = 0.0
                    for l in range(D):
                        s += (cv[k + 1, i, l] - P_pred[i, l]) * X[l, j]
                    T[i, j] = s
            for i in range(D):
                for j in range(D):
                    s = 0.0
                    for l in range(D):
                        s += X[l, i] * T[l, j]
                    cv[k, i, j] += s
        Cnew = cv[k]
        _symmetrize(Cnew, D)
        if not _chol(Cnew, Lc, D):
            out_c[k] = _clamp_py(out_c[k])
    return out_m, out_c


def cp_sweep(y, obj, prior_prec, prior_shift, site_prec, site_shift, site_omega,
             post_prec, means, covs, double rate, double etau, double damping, gamma_ok):
    """One parallel CEP sweep over CP sites; same contract as the Python version."""
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef long long[:, ::1] ob = np.ascontiguousarray(obj, dtype=np.int64)
    cdef double[:, :, ::1] pp = prior_prec
    cdef double[:, ::1] ps = prior_shift
    cdef double[:, :, :, ::1] sp = site_prec
    cdef double[:, :, ::1] ss = site_shift
    cdef double[::1] so = site_omega
    cdef double[:, :, ::1] qp = post_prec
    cdef double[:, ::1] mu = means
    cdef double[:, :, ::1] cv = covs
    cdef unsigned char[::1] gok = gamma_ok
    cdef int E = ob.shape[0], M = ob.shape[1]
    cdef int K = mu.shape[0], R = mu.shape[1]
    cdef int e, m, j, k, a, b, skipped = 0
    cdef double target, cavity, s, mall, change = 0.0, d = damping
    cdef double[:, :, ::1] second = np.empty((K, R, R))
    cdef double[:, :, :, ::1] new_prec = np.empty((E, M, R, R))
    cdef double[:, :, ::1] new_shift = np.empty((E, M, R))
    cdef unsigned char[:, ::1] upd = np.ones((E, M), dtype=np.uint8)
    cdef double[:, ::1] W = np.empty((R, R))
    cdef double[:, ::1] L = np.empty((R, R))
    cdef double[:, ::1] Inv = np.empty((R, R))
    cdef double[:, ::1] post_shift = np.empty((K, R))
    cdef double[::1] hv = np.empty(R)
    cdef double[:, ::1] sec = np.empty((R, R))
    cdef double[::1] mv = np.empty(R)
    cdef int failed = 0

    with nogil:
        for k in range(K):
            for a in range(R):
                for b in range(R):
                    second[k, a, b] = cv[k, a, b] + mu[k, a] * mu[k, b]
        for e in range(E):
            for m in range(M):
                k = ob[e, m]
                for a in range(R):
                    for b in range(R):
                        W[a, b] = qp[k, a, b] - sp[e, m, a, b]
                if not _chol(W, L, R):
                    upd[e, m] = 0
                    skipped += 1
                    continue
                for a in range(R):
                    mv[a] = 1.0
                    for b in range(R):
                        sec[a, b] = 1.0
                for j in range(M):
                    if j != m:
                        for a in range(R):
                            mv[a] *= mu[ob[e, j], a]
                            for b in range(R):
                                sec[a, b] *= second[ob[e, j], a, b]
                for a in range(R):
                    new_shift[e, m, a] = etau * yv[e] * mv[a]
                    for b in range(R):
                        new_prec[e, m, a, b] = etau * sec[a, b]
            # Gamma target from the full Hadamard product
            s = 0.0
            mall = 0.0
            for a in range(R):
                mv[a] = 1.0
                for b in range(R):
                    sec[a, b] = 1.0
            for j in range(M):
                for a in range(R):
                    mv[a] *= mu[ob[e, j], a]
                    for b in range(R):
                        sec[a, b] *= second[ob[e, j], a, b]
            for a in range(R):
                mall += mv[a]
                for b in range(R):
                    s += sec[a, b]
            target = 0.5 * yv[e] * yv[e] + 0.5 * s - yv[e] * mall
            cavity = rate - so[e]
            if cavity <= 0.0 or cavity + target <= 0.0:
                gok[e] = 0
                skipped += 1
            else:
                gok[e] = 1
                so[e] = (1.0 - d) * so[e] + d * target
        for e in range(E):
            for m in range(M):
                if upd[e, m]:
                    for a in range(R):
                        ss[e, m, a] = (1.0 - d) * ss[e, m, a] + d * new_shift[e, m, a]
                        for b in range(R):
                            sp[e, m, a, b] = (1.0 - d) * sp[e, m, a, b] + d * new_prec[e, m, a, b]
        for k in range(K):
            for a in range(R):
                post_shift[k, a] = ps[k, a]
                for b in range(R):
                    qp[k, a, b] = pp[k, a, b]
        for e in range(E):
            for m in range(M):
                k = ob[e, m]
                for a in range(R):
                    post_shift[k, a] += ss[e, m, a]
                    for b in range(R):
                        qp[k, a, b] += sp[e, m, a, b]
        for k in range(K):
            for a in range(R):
                for b in range(a + 1, R):
                    s = 0.5 * (qp[k, a, b] + qp[k, b, a])
                    qp[k, a, b] = s
                    qp[k, b, a] = s
            for a in range(R):
                for b in range(R):
                    W[a, b] = qp[k, a, b]
                    Inv[a, b] = 1.0 if a == b else 0.0
            if not _chol(W, L, R):
                failed = 1
                break
            _chol_solve(L, Inv, R, R)
            _symmetrize(Inv, R)
            for a in range(R):
                s = 0.0
                for b in range(R):
                    s += Inv[a, b] * post_shift[k, b]
                hv[a] = s
            for a in range(R):
                if fabs(hv[a] - mu[k, a]) > change:
                    change = fabs(hv[a] - mu[k, a])
                mu[k, a] = hv[a]
                for b in range(R):
                    cv[k, a, b] = Inv[a, b]
    if failed:
        raise np.linalg.LinAlgError("posterior precision is not positive definite")
    return change, skipped
