"""Auxiliary particle filter (APF-BKF) and forward-backward particle smoother (APF-BKS)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    DegeneracyError,
    GrnModel,
    mmse_from_mean,
    noise_kernel,
    popcount,
    sample_noise,
    unpack_bits,
)
from .rnaseq import RnaSeqModel

_TABLE_D = 12


@dataclass
class ParticleEnsemble:
    particles: np.ndarray  # (N,) uint64 state codes
    weights: np.ndarray  # (N,) normalised

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.uint64).ravel()
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.particles.size < 1 or self.particles.shape != self.weights.shape:
            raise ValueError("need N >= 1 particles with one weight each")

    @property
    def N(self) -> int:
        return self.particles.size

    def mean(self, d: int) -> np.ndarray:
        return self.weights @ unpack_bits(self.particles, d)


@dataclass
class UniqueEnsemble:
    particles: np.ndarray  # (F,) distinct codes, ascending
    weights: np.ndarray  # (F,) aggregated weights
    inverse: np.ndarray  # (N,) raw index -> unique index

    @property
    def F(self) -> int:
        return self.particles.size


def compact(ensemble: ParticleEnsemble) -> UniqueEnsemble:
    """Merge duplicate particles, summing their weights; ordered by state code."""
    uniq, inverse = np.unique(ensemble.particles, return_inverse=True)
    weights = np.bincount(inverse, weights=ensemble.weights, minlength=uniq.size)
    return UniqueEnsemble(uniq, weights, inverse)


def resample(weights: np.ndarray, n: int, rng: np.random.Generator, method: str = "multinomial") -> np.ndarray:
    """Draw ``n`` ancestor indices from (possibly unnormalised) ``weights`` by inverse CDF.

    Zero-weight entries have empty CDF intervals and are never selected.
    """
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if not total > 0:
        raise DegeneracyError("all resampling weights are zero")
    if method == "multinomial":
        u = rng.random(n)
    elif method == "systematic":
        u = (rng.random() + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    idx = np.searchsorted(cdf, u * total, side="right")
    return np.minimum(idx, len(cdf) - 1)


def loglik_function(obs_model: RnaSeqModel, y) -> Callable[[np.ndarray], np.ndarray]:
    """``codes -> log p(y | codes)``, tabulated over the state space when d is small."""
    if obs_model.d <= _TABLE_D:
        table = obs_model.state_loglik(y, np.arange(2**obs_model.d, dtype=np.uint64))
        return lambda codes: table[codes]
    return lambda codes: obs_model.state_loglik(y, codes)


def initial_particles(d: int, N: int, rng: np.random.Generator, pi0: np.ndarray | None = None) -> np.ndarray:
    if pi0 is not None:
        pi0 = np.asarray(pi0, dtype=float)
        return resample(pi0, N, rng).astype(np.uint64)
    return rng.integers(0, 2**d - 1, size=N, dtype=np.uint64, endpoint=True)


@dataclass
class ApfStep:
    ensemble: ParticleEnsemble
    log_v: np.ndarray  # log first-stage weights
    log_beta: float  # log of the unbiased estimate of p(y_k | y_{1:k-1})
    z: np.ndarray  # approximate conditional mean
    ancestors: np.ndarray


def apf_bkf_step(
    model: GrnModel,
    obs_model: RnaSeqModel,
    y,
    ensemble: ParticleEnsemble,
    rng: np.random.Generator,
    resampling: str = "multinomial",
    loglik: Callable | None = None,
) -> ApfStep:
    """Advance the auxiliary particle filter by one observation."""
    loglik = loglik or loglik_function(obs_model, y)
    N = ensemble.N
    mode = model.apply(ensemble.particles)
    ll_mode = loglik(mode)
    with np.errstate(divide="ignore"):
        log_v = ll_mode + np.log(ensemble.weights)
    top = log_v.max()
    if not np.isfinite(top):
        raise DegeneracyError("observation incompatible with every propagated particle")
    v = np.exp(log_v - top)
    anc = resample(v, N, rng, resampling)
    x_new = mode[anc] ^ sample_noise(N, model.d, model.p, rng)
    log_w2 = loglik(x_new) - ll_mode[anc]
    w2_top = log_w2.max()
    w2 = np.exp(log_w2 - w2_top)
    # sum V_i (prior weights normalised) times mean second-stage weight
    log_beta = float(top + np.log(v.sum()) + w2_top + np.log(w2.mean()))
    weights = w2 / w2.sum()
    new = ParticleEnsemble(x_new, weights)
    return ApfStep(new, log_v, log_beta, new.mean(model.d), anc)


@dataclass
class ApfTrace:
    """Forward APF output; row ``k`` of ``particles``/``weights`` is time ``k = 0..T``."""

    particles: np.ndarray  # (T+1, N)
    weights: np.ndarray  # (T+1, N)
    log_v: np.ndarray  # (T, N)
    log_beta: np.ndarray  # (T,)
    mean: np.ndarray  # (T, d), k = 1..T
    estimates: np.ndarray
    mse: np.ndarray
    d: int
    _unique: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> int:
        return self.log_beta.size

    @property
    def N(self) -> int:
        return self.particles.shape[1]

    @property
    def log_likelihood(self) -> float:
        return float(self.log_beta.sum())

    def ensemble(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.particles[k], self.weights[k])

    def unique(self, k: int) -> UniqueEnsemble:
        if k not in self._unique:
            self._unique[k] = compact(self.ensemble(k))
        return self._unique[k]

    @property
    def unique_counts(self) -> np.ndarray:
        """``F_k`` for ``k = 1..T``."""
        return np.array([self.unique(k).F for k in range(1, self.T + 1)])


def run_apf_bkf(
    model: GrnModel,
    obs_model: RnaSeqModel,
    ys,
    N: int,
    rng: np.random.Generator,
    pi0: np.ndarray | None = None,
    resampling: str = "multinomial",
) -> ApfTrace:
    """APF approximation of the Boolean Kalman filter."""
    if N < 1:
        raise ValueError("need at least one particle")
    d = model.d
    ys = np.asarray(ys)
    if ys.ndim != 2 or ys.shape[1] != d or len(ys) < 1:
        raise ValueError(f"observations must have shape (T>=1, {d})")
    T = len(ys)
    particles = np.empty((T + 1, N), dtype=np.uint64)
    weights = np.empty((T + 1, N))
    log_v = np.empty((T, N))
    log_beta = np.empty(T)
    mean = np.empty((T, d))
    ens = ParticleEnsemble(initial_particles(d, N, rng, pi0), np.full(N, 1.0 / N))
    particles[0], weights[0] = ens.particles, ens.weights
    for k, y in enumerate(ys):
        step = apf_bkf_step(model, obs_model, y, ens, rng, resampling)
        ens = step.ensemble
        particles[k + 1], weights[k + 1] = ens.particles, ens.weights
        log_v[k], log_beta[k], mean[k] = step.log_v, step.log_beta, step.z
    est, mse = mmse_from_mean(np.clip(mean, 0.0, 1.0))
    return ApfTrace(particles, weights, log_v, log_beta, mean, est, np.atleast_1d(mse), d)


@dataclass
class ApfSmootherResult:
    uniques: list[UniqueEnsemble]  # index s = 0..T
    smoothed_weights: list[np.ndarray]  # W_{s|T}, s = 0..T
    mean: np.ndarray  # (T, d), s = 1..T
    estimates: np.ndarray
    mse: np.ndarray
    initial_mean: np.ndarray  # z_0
    forward: ApfTrace


def _kernel_lookup(model: GrnModel) -> np.ndarray:
    return noise_kernel(np.arange(model.d + 1), model.d, model.p)


def _pair_transition(model: GrnModel, kernel: np.ndarray, nxt: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """``P[i, j] = P(nxt_i | prev_j)``."""
    return kernel[popcount(nxt[:, None] ^ model.apply(prev)[None, :])]


def smooth_trace(trace: ApfTrace, model: GrnModel, naive: bool = False) -> ApfSmootherResult:
    """Backward reweighting of a forward APF trace.

    With ``naive=True`` the recursion runs over the raw N particles instead of
    the compacted unique ones (reference path, O(N^2) per step).
    """
    T = trace.T
    kernel = _kernel_lookup(model)
    if naive:
        uniques = [
            UniqueEnsemble(trace.particles[k], trace.weights[k], np.arange(trace.N)) for k in range(T + 1)
        ]
    else:
        uniques = [trace.unique(k) for k in range(T + 1)]
    smoothed: list[np.ndarray] = [None] * (T + 1)  # type: ignore[list-item]
    smoothed[T] = uniques[T].weights.copy()
    for s in range(T - 1, -1, -1):
        cur, nxt = uniques[s], uniques[s + 1]
        P = _pair_transition(model, kernel, nxt.particles, cur.particles)
        denom = P @ cur.weights
        live = smoothed[s + 1] > 0
        if np.any(denom[live] <= 0):
            raise DegeneracyError(f"smoothed particle at step {s + 1} unreachable from step {s}")
        ratio = np.zeros_like(denom)
        ratio[live] = smoothed[s + 1][live] / denom[live]
        smoothed[s] = cur.weights * (P.T @ ratio)
    means = np.array([w @ unpack_bits(u.particles, trace.d) for u, w in zip(uniques, smoothed)])
    mean = np.clip(means[1:], 0.0, 1.0)
    est, mse = mmse_from_mean(mean)
    return ApfSmootherResult(uniques, smoothed, mean, est, np.atleast_1d(mse), means[0], trace)


def apf_bks(
    model: GrnModel,
    obs_model: RnaSeqModel,
    ys,
    N: int,
    rng: np.random.Generator,
    pi0: np.ndarray | None = None,
    naive: bool = False,
) -> ApfSmootherResult:
    """APF approximation of the fixed-interval Boolean Kalman smoother."""
    trace = run_apf_bkf(model, obs_model, ys, N, rng, pi0)
    return smooth_trace(trace, model, naive=naive)
