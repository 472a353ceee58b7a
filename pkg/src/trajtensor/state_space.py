"""Per-object factor state chains: predict, RTS smoothing and trajectory queries.

The state of one object stacks ``R`` independent SDE states of size
``n = p + 1``; factor ``r`` is coordinate ``r * n`` of the stacked vector and
the transition is block diagonal with ``R`` copies of the scalar-kernel
matrices.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, NonMonotoneTimestamp, NotSmoothed
from .kernel_sde import LtiSde, psd_clamp


@dataclass
class StateGaussian:
    mean: np.ndarray
    cov: np.ndarray
    t: float


@dataclass(frozen=True)
class BlockDiscretization:
    F_bar: np.ndarray
    Q_bar: np.ndarray
    P_inf_bar: np.ndarray


def block_diag_copies(B: np.ndarray, rank: int) -> np.ndarray:
    """``kron(I_rank, B)`` without the multiply-by-zero work."""
    n = B.shape[0]
    out = np.zeros((rank * n, rank * n))
    for r in range(rank):
        out[r * n:(r + 1) * n, r * n:(r + 1) * n] = B
    return out


def block_discretize(sde: LtiSde, rank: int, dt: float) -> BlockDiscretization:
    d = sde.discretize(dt)
    return BlockDiscretization(
        F_bar=block_diag_copies(d.F, rank),
        Q_bar=block_diag_copies(d.Q, rank),
        P_inf_bar=block_diag_copies(sde.P_inf, rank),
    )


def stationary_state(sde: LtiSde, rank: int, t: float) -> StateGaussian:
    D = rank * sde.order
    return StateGaussian(np.zeros(D), block_diag_copies(sde.P_inf, rank), float(t))


@dataclass
class FactorChain:
    """Time-ordered running posteriors of one object's factor state.

    ``mode`` and ``obj`` are 1-based, matching the event files.
    """

    mode: int
    obj: int
    rank: int
    timestamps: list = field(default_factory=list)
    filtered: list = field(default_factory=list)
    smoothed: list | None = None

    def __len__(self):
        return len(self.filtered)

    @property
    def last_t(self):
        return self.timestamps[-1] if self.timestamps else None

    def append(self, state: StateGaussian):
        if self.timestamps and not state.t > self.timestamps[-1]:
            raise NonMonotoneTimestamp(
                f"state at t={state.t} does not follow last timestamp {self.timestamps[-1]}"
            )
        self.timestamps.append(float(state.t))
        self.filtered.append(state)
        self.smoothed = None


def _propagate(state: StateGaussian, sde: LtiSde, rank: int, new_t: float) -> StateGaussian:
    blk = block_discretize(sde, rank, new_t - state.t)
    mean = blk.F_bar @ state.mean
    cov = psd_clamp(blk.F_bar @ state.cov @ blk.F_bar.T + blk.Q_bar)
    return StateGaussian(mean, cov, float(new_t))


def predict(chain: FactorChain, sde: LtiSde, new_t: float) -> StateGaussian:
    """Prior of the chain's state at ``new_t`` given its last running posterior.

    An empty chain yields the stationary prior ``N(0, P_inf_bar)``.
    """
    if not chain.filtered:
        return stationary_state(sde, chain.rank, new_t)
    if not new_t > chain.timestamps[-1]:
        raise NonMonotoneTimestamp(
            f"cannot predict to t={new_t}: chain ({chain.mode}, {chain.obj}) "
            f"already has a state at t={chain.timestamps[-1]}"
        )
    return _propagate(chain.filtered[-1], sde, chain.rank, new_t)


def _gap_matrices(timestamps, sde: LtiSde, rank: int):
    D = rank * sde.order
    n = len(timestamps)
    F = np.empty((max(n - 1, 0), D, D))
    Q = np.empty((max(n - 1, 0), D, D))
    for k in range(n - 1):
        blk = block_discretize(sde, rank, timestamps[k + 1] - timestamps[k])
        F[k] = blk.F_bar
        Q[k] = blk.Q_bar
    return F, Q


def rts_smooth(chain: FactorChain, sde: LtiSde) -> list:
    """Smoothed posteriors of every state in the chain.

    Uses only the stored running posteriors; no observation is revisited.
    """
    if not chain.filtered:
        raise ValueError("cannot smooth an empty chain")
    means = np.stack([s.mean for s in chain.filtered])
    covs = np.stack([s.cov for s in chain.filtered])
    F, Q = _gap_matrices(chain.timestamps, sde, chain.rank)
    sm_means, sm_covs = kernels.rts_backward(means, covs, F, Q)
    return [StateGaussian(sm_means[k], sm_covs[k], t) for k, t in enumerate(chain.timestamps)]


def _backward_condition(right: StateGaussian, left: StateGaussian, sde, rank) -> StateGaussian:
    """Condition a state at ``left.t`` with running posterior ``left`` on the
    smoothed state ``right`` at a later time (one RTS step)."""
    blk = block_discretize(sde, rank, right.t - left.t)
    means, covs = kernels.rts_backward(
        np.stack([left.mean, right.mean]),
        np.stack([left.cov, right.cov]),
        blk.F_bar[None],
        blk.Q_bar[None],
    )
    return StateGaussian(means[0], covs[0], left.t)


def _state_at(states, timestamps, sde, rank, t, filtered=None):
    t = float(t)
    k = bisect.bisect_left(timestamps, t)
    if k < len(timestamps) and timestamps[k] == t:
        return states[k]
    if k == len(timestamps):
        return _propagate(states[-1], sde, rank, t)
    if k == 0:
        return _backward_condition(states[0], stationary_state(sde, rank, t), sde, rank)
    left = (filtered or states)[k - 1]
    pseudo = _propagate(left, sde, rank, t)
    if filtered is None:
        # filter-only estimate: no information from the right
        return pseudo
    return _backward_condition(states[k], pseudo, sde, rank)


def interpolate(chain: FactorChain, sde: LtiSde, t: float) -> StateGaussian:
    """Posterior of the chain state at an arbitrary time ``t``.

    Past the last timestamp the last smoothed state is propagated forward;
    before the first, the first smoothed state is conditioned backward under
    the stationary prior; in between, an unobserved pseudo-state at ``t`` is
    predicted from the left running posterior and RTS-corrected against the
    smoothed state on the right.
    """
    if chain.smoothed is None:
        raise NotSmoothed(f"chain ({chain.mode}, {chain.obj}) has not been smoothed")
    return _state_at(chain.smoothed, chain.timestamps, sde, chain.rank, t, filtered=chain.filtered)


def filtered_state_at(chain: FactorChain, sde: LtiSde, t: float) -> StateGaussian:
    """Estimate at ``t`` from running posteriors only (no smoothing).

    Uses the latest running posterior at or before ``t`` propagated forward;
    before the first timestamp, conditions the first running posterior
    backward under the stationary prior.
    """
    if not chain.filtered:
        return stationary_state(sde, chain.rank, t)
    return _state_at(chain.filtered, chain.timestamps, sde, chain.rank, t)


def extract_factor(state: StateGaussian, order: int):
    """Factor-value marginal ``(mean[R], cov[R, R])`` of a stacked state."""
    D = state.mean.shape[0]
    if order < 1 or D % order:
        raise DimensionMismatch(f"state dimension {D} is not a multiple of {order}")
    idx = np.arange(0, D, order)
    return state.mean[idx], state.cov[np.ix_(idx, idx)]


def factor_selector(rank: int, order: int) -> np.ndarray:
    """``(R, D)`` matrix picking the factor values out of a stacked state."""
    H = np.zeros((rank, rank * order))
    H[np.arange(rank), np.arange(rank) * order] = 1.0
    return H
