"""Streaming posterior updates over timestamp batches.

Each batch touches only the chains of the objects it involves: their states
are predicted to the batch time, refined jointly by CEP, and the result is
appended as the new running posterior. Nothing about earlier batches is kept
beyond the chains themselves.
"""
from __future__ import annotations

import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cep import (
    CepConfig,
    NoisePosterior,
    TuckerCorePosterior,
    cp_predict_moments,
    run_cep_batch,
    tucker_predict_moments,
)
from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyModel,
    IndexOutOfRange,
    NonMonotoneTimestamp,
    UnknownObject,
)
from .kernel_sde import LtiSde, MaternKernel, build_sde
from .state_space import (
    FactorChain,
    StateGaussian,
    extract_factor,
    filtered_state_at,
    interpolate,
    predict,
    rts_smooth,
    stationary_state,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TRJTNSR\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    t: float
    entries: list


@dataclass
class BatchReport:
    t: float
    n_entries: int
    touched: list
    iterations: int
    converged: bool
    no_progress: bool = False


@dataclass
class PosteriorModel:
    """Running posterior over all factor trajectories, the noise and the core.

    ``ranks`` holds one rank per mode (all equal for CP). ``init_scale``
    controls the deterministic perturbation of a factor's prior mean on its
    first appearance, which breaks the sign symmetry of multilinear models
    (an all-zero mean is a fixed point of the updates when M >= 2).
    """

    mode_dims: tuple
    ranks: tuple
    form: str
    kernel: MaternKernel
    noise_prior: tuple = (1.0, 0.1)
    cep: CepConfig = field(default_factory=CepConfig)
    seed: int = 0
    init_scale: float = 0.1
    chains: dict = field(default_factory=dict)
    noise: NoisePosterior | None = None
    core: TuckerCorePosterior | None = None
    last_t: float | None = None
    n_batches: int = 0
    n_obs: int = 0
    sde: LtiSde | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mode_dims = tuple(int(d) for d in self.mode_dims)
        if any(d < 1 for d in self.mode_dims):
            raise ValueError(f"mode dimensions must be positive, got {self.mode_dims}")
        if self.form not in ("cp", "tucker"):
            raise ValueError(f"form must be 'cp' or 'tucker', got {self.form!r}")
        if np.isscalar(self.ranks):
            self.ranks = (int(self.ranks),) * len(self.mode_dims)
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.ranks) != len(self.mode_dims) or min(self.ranks) < 1:
            raise ValueError(f"need one positive rank per mode, got {self.ranks}")
        if self.form == "cp" and len(set(self.ranks)) != 1:
            raise ValueError("CP form needs the same rank in every mode")
        self.noise_prior = tuple(float(v) for v in self.noise_prior)
        if self.noise is None:
            self.noise = NoisePosterior(*self.noise_prior)
        if self.form == "tucker" and self.core is None:
            self.core = TuckerCorePosterior.standard(self.ranks)
        if self.sde is None:
            self.sde = build_sde(self.kernel)

    @property
    def n_modes(self):
        return len(self.mode_dims)

    @property
    def order(self):
        return self.kernel.order

    def chain(self, mode, obj) -> FactorChain:
        try:
            return self.chains[(mode, obj)]
        except KeyError:
            known = sorted(j for m, j in self.chains if m == mode)
            raise UnknownObject(f"object {obj} of mode {mode} was never observed; known objects: {known}") from None


def create_model(mode_dims, rank, form="cp", kernel=None, **kw) -> PosteriorModel:
    kernel = kernel or MaternKernel(1, 0.3, 0.3)
    return PosteriorModel(tuple(mode_dims), rank, form, kernel, **kw)


def _check_index(model, idx):
    if len(idx) != model.n_modes:
        raise DimensionMismatch(f"index {tuple(idx)} has {len(idx)} modes, model has {model.n_modes}")
    for m, (j, d) in enumerate(zip(idx, model.mode_dims)):
        if not 1 <= j <= d:
            raise IndexOutOfRange(f"index {j} of mode {m + 1} outside 1..{d}")


def _first_prior(model, mode, obj, t):
    state = stationary_state(model.sde, model.ranks[mode - 1], t)
    if model.n_modes >= 2 and model.init_scale > 0:
        rng = np.random.default_rng([model.seed, mode, obj])
        R = model.ranks[mode - 1]
        scale = model.init_scale * np.sqrt(model.kernel.amplitude)
        state.mean[:: model.order] = scale * rng.standard_normal(R)
    return state


def process_batch(model: PosteriorModel, batch: Batch) -> BatchReport:
    """Absorb one batch of entries sharing a timestamp into the running posterior."""
    t = float(batch.t)
    if model.last_t is not None and not t > model.last_t:
        raise NonMonotoneTimestamp(f"batch at t={t} does not follow last processed t={model.last_t}")
    entries = [(tuple(int(j) for j in idx), float(y)) for idx, y in batch.entries]
    if not entries:
        raise ValueError("empty batch")
    for idx, _ in entries:
        _check_index(model, idx)
    keys = sorted({(m + 1, idx[m]) for idx, _ in entries for m in range(model.n_modes)})
    priors = {}
    for key in keys:
        chain = model.chains.get(key)
        if chain is None:
            priors[key] = _first_prior(model, *key, t)
        else:
            priors[key] = predict(chain, model.sde, t)
    res = run_cep_batch(entries, priors, model.noise, model.order, model.cep, model.form, model.core)
    for key in keys:
        chain = model.chains.get(key)
        if chain is None:
            chain = model.chains[key] = FactorChain(key[0], key[1], model.ranks[key[0] - 1])
        chain.append(res.posteriors[key])
    model.noise = res.noise
    if model.form == "tucker":
        model.core = res.core
    model.last_t = t
    model.n_batches += 1
    model.n_obs += len(entries)
    return BatchReport(t, len(entries), keys, res.iterations, res.converged, res.no_progress)


def _n_threads():
    env = os.environ.get("SFTL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer SFTL_THREADS=%r", env)
    return os.cpu_count() or 1


def smooth_chain(model: PosteriorModel, mode: int, obj: int) -> FactorChain:
    chain = model.chain(mode, obj)
    chain.smoothed = rts_smooth(chain, model.sde)
    return chain


def finalize(model: PosteriorModel) -> None:
    """Smooth every chain; chains are independent and smoothed concurrently."""
    if model.n_batches == 0:
        raise EmptyModel("no batch has been processed")
    chains = list(model.chains.values())

    def run(chain):
        chain.smoothed = rts_smooth(chain, model.sde)

    n = min(_n_threads(), len(chains))
    if n <= 1:
        for c in chains:
            run(c)
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            list(pool.map(run, chains))


def factor_state(model: PosteriorModel, mode: int, obj: int, t: float, smoothed=None) -> StateGaussian:
    """Posterior state of one object at ``t``.

    Uses smoothed states when the chain has them (or ``smoothed=True``
    demands them), running posteriors otherwise. Objects that never appeared
    get the stationary prior.
    """
    chain = model.chains.get((mode, obj))
    if chain is None:
        return stationary_state(model.sde, model.ranks[mode - 1], t)
    if smoothed is None:
        smoothed = chain.smoothed is not None
    if smoothed:
        return interpolate(chain, model.sde, t)
    return filtered_state_at(chain, model.sde, t)


def factor_trajectory(model: PosteriorModel, mode: int, obj: int, times, smoothed=None):
    """Posterior mean and standard deviation of the factor values over ``times``.

    Returns two ``(len(times), R)`` arrays.
    """
    model.chain(mode, obj)
    means, stds = [], []
    for t in times:
        mu, C = extract_factor(factor_state(model, mode, obj, t, smoothed), model.order)
        means.append(mu)
        stds.append(np.sqrt(np.clip(np.diag(C), 0.0, None)))
    return np.array(means), np.array(stds)


def predict_entry(model: PosteriorModel, idx, t: float, smoothed=None):
    """Predictive mean and variance of entry ``idx`` at time ``t``.

    The variance is that of the multilinear form under the factorized
    posterior plus the expected observation noise ``1 / E[tau]``.
    """
    idx = tuple(int(j) for j in idx)
    if len(idx) != model.n_modes:
        raise DimensionMismatch(f"index {idx} has {len(idx)} modes, model has {model.n_modes}")
    for m, (j, d) in enumerate(zip(idx, model.mode_dims)):
        if not 1 <= j <= d:
            raise UnknownObject(f"index {j} of mode {m + 1} outside 1..{d}")
    means, seconds = [], []
    for m, j in enumerate(idx):
        mu, C = extract_factor(factor_state(model, m + 1, j, t, smoothed), model.order)
        means.append(mu)
        seconds.append(C + np.outer(mu, mu))
    if model.form == "cp":
        mean, second = cp_predict_moments(means, seconds)
    else:
        mean, second = tucker_predict_moments(model.core, means, seconds)
    var = max(second - mean * mean, 0.0) + 1.0 / model.noise.mean
    return mean, var


def run_stream(model: PosteriorModel, batches, callback=None) -> list:
    reports = []
    for batch in batches:
        rep = process_batch(model, batch)
        reports.append(rep)
        if callback is not None:
            callback(model, rep)
    return reports


# -- checkpointing -------------------------------------------------------

def _config_dict(model):
    k = model.kernel
    return {
        "mode_dims": list(model.mode_dims),
        "ranks": list(model.ranks),
        "form": model.form,
        "kernel": {"p": k.p, "amplitude": k.amplitude, "lengthscale": k.lengthscale},
        "noise_prior": list(model.noise_prior),
        "cep": asdict(model.cep),
        "seed": model.seed,
        "init_scale": model.init_scale,
        "last_t": model.last_t,
        "n_batches": model.n_batches,
        "n_obs": model.n_obs,
    }


def checkpoint(model: PosteriorModel) -> bytes:
    """Serialize the model to bytes (magic header, version, npz payload)."""
    arrays = {
        "config": np.array(json.dumps(_config_dict(model))),
        "noise": np.array([model.noise.shape, model.noise.rate]),
    }
    if model.core is not None:
        arrays["core_mean"] = model.core.mean
        arrays["core_cov"] = model.core.cov
    keys = sorted(model.chains)
    arrays["chain_keys"] = np.array(keys, dtype=np.int64).reshape(-1, 2)
    for i, key in enumerate(keys):
        ch = model.chains[key]
        arrays[f"c{i}_t"] = np.array(ch.timestamps)
        arrays[f"c{i}_mean"] = np.stack([s.mean for s in ch.filtered])
        arrays[f"c{i}_cov"] = np.stack([s.cov for s in ch.filtered])
        if ch.smoothed is not None:
            arrays[f"c{i}_smean"] = np.stack([s.mean for s in ch.smoothed])
            arrays[f"c{i}_scov"] = np.stack([s.cov for s in ch.smoothed])
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)) + payload


def restore(data: bytes) -> PosteriorModel:
    head = len(CHECKPOINT_MAGIC)
    if len(data) < head + 12 or data[:head] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("not a checkpoint (bad magic header)")
    version, size = struct.unpack("<IQ", data[head:head + 12])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    payload = data[head + 12:]
    if len(payload) != size:
        raise CorruptCheckpoint(f"payload is {len(payload)} bytes, header says {size}")
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        cfg = json.loads(str(arrays["config"]))
        kcfg = cfg["kernel"]
        model = PosteriorModel(
            tuple(cfg["mode_dims"]),
            tuple(cfg["ranks"]),
            cfg["form"],
            MaternKernel(kcfg["p"], kcfg["amplitude"], kcfg["lengthscale"]),
            noise_prior=tuple(cfg["noise_prior"]),
            cep=CepConfig(**cfg["cep"]),
            seed=cfg["seed"],
            init_scale=cfg["init_scale"],
            noise=NoisePosterior(*arrays["noise"].tolist()),
            last_t=cfg["last_t"],
            n_batches=cfg["n_batches"],
            n_obs=cfg["n_obs"],
        )
        if "core_mean" in arrays:
            model.core = TuckerCorePosterior(arrays["core_mean"], arrays["core_cov"])
        for i, (m, j) in enumerate(arrays["chain_keys"].tolist()):
            ts = arrays[f"c{i}_t"].tolist()
            ch = FactorChain(m, j, model.ranks[m - 1])
            ch.timestamps = ts
            ch.filtered = [StateGaussian(mu, C, t) for mu, C, t in
                           zip(arrays[f"c{i}_mean"], arrays[f"c{i}_cov"], ts)]
            if f"c{i}_smean" in arrays:
                ch.smoothed = [StateGaussian(mu, C, t) for mu, C, t in
                               zip(arrays[f"c{i}_smean"], arrays[f"c{i}_scov"], ts)]
            model.chains[(m, j)] = ch
    except CorruptCheckpoint:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint payload: {exc}") from exc
    return model


def save_checkpoint(model: PosteriorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint(model))


def load_checkpoint(path) -> PosteriorModel:
    with open(path, "rb") as fh:
        return restore(fh.read())
