"""Matérn kernels and their linear time-invariant SDE representation.

A Matérn kernel with half-integer smoothness ``nu = p + 1/2`` has a rational
spectral density, so a GP with that kernel is the first coordinate of a
``(p+1)``-dimensional linear SDE driven by white noise::

    dz/dt = A z + eta * beta(t),   E[beta(t) beta(s)] = sigma2 * delta(t - s)

Sampling the SDE at arbitrary times gives a Gauss-Markov chain with
transition ``F = expm(dt * A)`` and process noise ``Q = P_inf - F P_inf F^T``.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from .errors import LyapunovSolveFailure

SUPPORTED_P = (0, 1, 2)


@dataclass(frozen=True)
class MaternKernel:
    """Matérn kernel ``kappa_nu`` with ``nu = p + 1/2``.

    Parameters
    ----------
    p : int
        Smoothness index, one of 0, 1, 2.
    amplitude : float
        Signal variance ``a`` (the kernel value at zero lag).
    lengthscale : float
        Length-scale ``rho`` in the same units as the timestamps.
    """

    p: int
    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if self.p not in SUPPORTED_P:
            raise ValueError(f"smoothness index p must be one of {SUPPORTED_P}, got {self.p}")
        if not (self.amplitude > 0 and math.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")

    @classmethod
    def from_nu(cls, nu: float, amplitude: float, lengthscale: float) -> "MaternKernel":
        p = nu - 0.5
        if abs(p - round(p)) > 1e-12:
            raise ValueError(f"nu must be a half-integer, got {nu}")
        return cls(int(round(p)), float(amplitude), float(lengthscale))

    @property
    def nu(self) -> float:
        return self.p + 0.5

    @property
    def alpha(self) -> float:
        return math.sqrt(2.0 * self.nu) / self.lengthscale

    @property
    def order(self) -> int:
        """State dimension of one trajectory, ``p + 1``."""
        return self.p + 1


def spectral_density_scale(kernel: MaternKernel) -> float:
    """White-noise spectral density ``sigma2`` of the equivalent SDE."""
    p, a, alpha = kernel.p, kernel.amplitude, kernel.alpha
    return a * 2.0 * math.sqrt(math.pi) * math.gamma(p + 1) / math.gamma(p + 0.5) * alpha ** (2 * p + 1)


def companion_coefficients(kernel: MaternKernel) -> np.ndarray:
    """Coefficients ``c_0..c_p`` of ``(alpha + x)^(p+1) = sum_k c_k x^k + x^(p+1)``."""
    p, alpha = kernel.p, kernel.alpha
    return np.array([math.comb(p + 1, k) * alpha ** (p + 1 - k) for k in range(p + 1)])


def solve_lyapunov(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve ``A P + P A^T = C`` by the Kronecker-vectorized linear system."""
    n = A.shape[0]
    eye = np.eye(n)
    L = np.kron(A, eye) + np.kron(eye, A)
    try:
        vec = np.linalg.solve(L, C.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise LyapunovSolveFailure(str(exc)) from exc
    P = vec.reshape(n, n)
    return 0.5 * (P + P.T)


def psd_clamp(C: np.ndarray) -> np.ndarray:
    """Symmetrize ``C`` and clamp negative eigenvalues to zero."""
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    if w[0] >= 0.0:
        return C
    w = np.maximum(w, 0.0)
    C = (V * w) @ V.T
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class Discretization:
    F: np.ndarray
    Q: np.ndarray
    dt: float


@dataclass(frozen=True, eq=False)
class LtiSde:
    """State-space form of a Matérn kernel.

    Instances are immutable; :meth:`discretize` memoizes results for repeated
    time gaps behind a lock so one instance can be shared between threads.
    """

    kernel: MaternKernel
    A: np.ndarray
    eta: np.ndarray
    sigma2: float
    P_inf: np.ndarray
    cache_size: int = 4096
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def discretize(self, dt: float) -> Discretization:
        dt = float(dt)
        with self._lock:
            hit = self._cache.get(dt)
            if hit is not None:
                self._cache.move_to_end(dt)
                return hit
        disc = discretize(self, dt)
        with self._lock:
            self._cache[dt] = disc
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return disc


def build_sde(kernel: MaternKernel) -> LtiSde:
    """Companion-form LTI-SDE whose stationary output has covariance ``kernel``."""
    n = kernel.order
    c = companion_coefficients(kernel)
    A = np.zeros((n, n))
    A[np.arange(n - 1), np.arange(1, n)] = 1.0
    A[-1, :] = -c
    eta = np.zeros(n)
    eta[-1] = 1.0
    sigma2 = spectral_density_scale(kernel)
    P_inf = solve_lyapunov(A, -sigma2 * np.outer(eta, eta))
    for arr in (A, eta, P_inf):
        arr.setflags(write=False)
    return LtiSde(kernel=kernel, A=A, eta=eta, sigma2=sigma2, P_inf=P_inf)


def discretize(sde: LtiSde, dt: float) -> Discretization:
    """Exact transition and process-noise matrices over a gap ``dt >= 0``."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    n = sde.order
    if dt == 0:
        F = np.eye(n)
        Q = np.zeros((n, n))
    else:
        F = scipy.linalg.expm(dt * sde.A)
        Q = psd_clamp(sde.P_inf - F @ sde.P_inf @ F.T)
    F.setflags(write=False)
    Q.setflags(write=False)
    return Discretization(F=F, Q=Q, dt=float(dt))


def kernel_value(kernel: MaternKernel, dt):
    """Evaluate ``kappa_nu(dt)`` through the modified Bessel function ``K_nu``.

    Accepts scalars or arrays of non-negative lags. Uses the exponentially
    scaled Bessel function so large lags decay to zero instead of ``0 * inf``.
    """
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0):
        raise ValueError("lags must be non-negative")
    nu, a = kernel.nu, kernel.amplitude
    x = kernel.alpha * dt
    with np.errstate(invalid="ignore", over="ignore"):
        val = a * x ** nu / (math.gamma(nu) * 2 ** (nu - 1)) * scipy.special.kve(nu, x) * np.exp(-x)
    # K_nu overflows for x < ~1e-123; the kernel equals a to double precision there
    val = np.where(x < 1e-100, a, val)
    return float(val) if val.ndim == 0 else val
