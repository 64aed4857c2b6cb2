"""Maximum-likelihood adaptive estimation.

Two estimators share the APF machinery:

* a bank of auxiliary particle filters, one per candidate model, selected by
  running log-likelihood (discrete parameter sets);
* Monte-Carlo EM for continuous parameters, whose E-step draws whole state
  trajectories by forward-filtering backward-simulation over the compacted
  forward particles, and whose M-step maximises the trajectory-averaged
  complete-data log-likelihood on a box.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import digamma

from .core import (
    P_FLOOR,
    DegeneracyError,
    GrnModel,
    clamp_p,
    noise_kernel,
    popcount,
    state_matrix,
    unpack_bits,
)
from .exact import build_transition_matrix, run_bkf, run_bks
from .particle import (
    ApfSmootherResult,
    ApfTrace,
    ParticleEnsemble,
    apf_bkf_step,
    initial_particles,
    resample,
    run_apf_bkf,
    smooth_trace,
)
from .rnaseq import RnaSeqModel, nb_logpmf

DEFAULT_BOUNDS = {
    "p": (0.0, 0.5),
    "s": (0.1, 10.0),
    "mu": (0.0, 2.0),
    "delta": (0.1, 10.0),
    "phi": (0.1, 50.0),
}
CONTINUOUS = ("p", "s", "mu", "delta", "phi")
OBS_PARAMS = ("s", "mu", "delta", "phi")


class LineSearchError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class ParameterVector:
    """Continuous model parameters with per-component boxes."""

    p: float
    s: float
    mu: float
    delta: np.ndarray
    phi: np.ndarray
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))

    def __post_init__(self):
        self.delta = np.array(self.delta, dtype=float).ravel()
        self.phi = np.array(self.phi, dtype=float).ravel()
        self.p, self.s, self.mu = float(self.p), float(self.s), float(self.mu)
        self.bounds = {**DEFAULT_BOUNDS, **self.bounds}

    @classmethod
    def from_models(cls, grn: GrnModel, obs: RnaSeqModel, bounds: dict | None = None) -> "ParameterVector":
        return cls(grn.p, obs.s, obs.mu, obs.delta, obs.phi, bounds or {})

    @property
    def d(self) -> int:
        return self.delta.size

    def models(self, network: GrnModel) -> tuple[GrnModel, RnaSeqModel]:
        return network.replace(p=self.p), RnaSeqModel(self.s, self.mu, self.delta, self.phi)

    def get(self, name: str) -> np.ndarray:
        return np.atleast_1d(np.asarray(getattr(self, name), dtype=float))

    def flat(self, names: Sequence[str]) -> np.ndarray:
        return np.concatenate([self.get(n) for n in names]) if names else np.empty(0)

    def with_flat(self, names: Sequence[str], x: np.ndarray) -> "ParameterVector":
        new = replace(self, delta=self.delta.copy(), phi=self.phi.copy(), bounds=dict(self.bounds))
        i = 0
        for n in names:
            size = self.get(n).size
            chunk = x[i : i + size]
            setattr(new, n, float(chunk[0]) if n in ("p", "s", "mu") else np.array(chunk))
            i += size
        return new

    def box(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([np.full(self.get(n).size, self.bounds[n][0]) for n in names])
        hi = np.concatenate([np.full(self.get(n).size, self.bounds[n][1]) for n in names])
        return lo, hi

    def check_in_box(self):
        for n in CONTINUOUS:
            lo, hi = self.bounds[n]
            v = self.get(n)
            if np.any(v < lo) or np.any(v > hi):
                raise ValueError(f"parameter {n}={v} outside its box [{lo}, {hi}]")

    def as_dict(self) -> dict:
        return {"p": self.p, "s": self.s, "mu": self.mu, "delta": self.delta.tolist(), "phi": self.phi.tolist()}


def relative_distance(theta_hat, theta_star, box: tuple[float, float]) -> np.ndarray:
    """``|theta_hat - theta_star| / (hi - lo)``, componentwise."""
    lo, hi = box
    width = hi - lo
    if not width > 0:
        raise ValueError("zero-width parameter box")
    return np.abs(np.asarray(theta_hat, dtype=float) - np.asarray(theta_star, dtype=float)) / width


def relative_distances(theta_hat: ParameterVector, theta_star: ParameterVector, names: Iterable[str]) -> dict:
    return {n: relative_distance(theta_hat.get(n), theta_star.get(n), theta_hat.bounds[n]) for n in names}


# --------------------------------------------------------------------------
# discrete parameters: filter bank
# --------------------------------------------------------------------------


def apply_overrides(grn: GrnModel, obs: RnaSeqModel, overrides: dict) -> tuple[GrnModel, RnaSeqModel]:
    """Apply a candidate spec such as ``{"a": [[4, 2, -1]]}`` (1-based gene indices)."""
    a, b = grn.a.copy(), grn.b.copy()
    gkw, okw = {}, {}
    for key, val in overrides.items():
        if key == "a":
            for i, j, v in val:
                a[i - 1, j - 1] = v
            gkw["a"] = a
        elif key == "b":
            for i, v in val:
                b[i - 1] = v
            gkw["b"] = b
        elif key == "p":
            gkw["p"] = val
        elif key in ("s", "mu"):
            okw[key] = val
        elif key in ("delta", "phi"):
            okw[key] = np.broadcast_to(np.asarray(val, dtype=float), (obs.d,))
        else:
            raise ValueError(f"unknown override key {key!r}")
    return grn.replace(**gkw), obs.replace(**okw)


@dataclass
class CandidateBank:
    """M particle filters run side by side, one per candidate model.

    Every candidate draws from its own generator seeded identically, so
    candidates see common random numbers and identical candidates produce
    identical likelihood paths.
    """

    candidates: list[tuple[GrnModel, RnaSeqModel]]
    ensembles: list[ParticleEnsemble | None]
    rngs: list[np.random.Generator]
    loglik: np.ndarray
    estimates: list[np.ndarray | None]

    @classmethod
    def create(cls, candidates, N: int, seed, initial_loglik: float = 0.0) -> "CandidateBank":
        candidates = list(candidates)
        if not candidates:
            raise ValueError("need at least one candidate")
        d = candidates[0][0].d
        if any(g.d != d or o.d != d for g, o in candidates):
            raise ValueError("all candidates must share the same gene count")
        rngs = [np.random.default_rng(seed) for _ in candidates]
        ensembles = [ParticleEnsemble(initial_particles(d, N, r), np.full(N, 1.0 / N)) for r in rngs]
        M = len(candidates)
        return cls(candidates, ensembles, rngs, np.full(M, float(initial_loglik)), [None] * M)

    @property
    def M(self) -> int:
        return len(self.candidates)

    def best(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest index wins ties
        return int(np.argmax(self.loglik))


def dpmla_step(bank: CandidateBank, y) -> tuple[CandidateBank, int, np.ndarray]:
    """Advance every candidate filter by one observation and select the ML candidate."""
    new = copy.copy(bank)
    new.ensembles = list(bank.ensembles)
    new.estimates = list(bank.estimates)
    new.loglik = bank.loglik.copy()
    for i, (grn, obs) in enumerate(bank.candidates):
        if new.ensembles[i] is None:
            continue
        try:
            step = apf_bkf_step(grn, obs, y, new.ensembles[i], bank.rngs[i])
        except DegeneracyError:
            new.ensembles[i] = None
            new.loglik[i] = -np.inf
            continue
        new.ensembles[i] = step.ensemble
        new.loglik[i] += step.log_beta
        new.estimates[i] = (np.clip(step.z, 0, 1) > 0.5).astype(np.uint8)
    if not np.isfinite(new.loglik).any():
        raise DegeneracyError("every candidate filter has lost support")
    best = new.best()
    return new, best, new.estimates[best]


@dataclass
class DpmlaResult:
    loglik: np.ndarray  # (T, M) running log-likelihoods
    selected: np.ndarray  # (T,) argmax index at each step
    estimates: np.ndarray  # (T, d) state estimate of the selected candidate


def run_dpmla(candidates, ys, N: int, seed, initial_loglik: float = 0.0) -> DpmlaResult:
    bank = CandidateBank.create(candidates, N, seed, initial_loglik)
    T = len(ys)
    loglik = np.empty((T, bank.M))
    selected = np.empty(T, dtype=np.int64)
    estimates = np.empty((T, candidates[0][0].d), dtype=np.uint8)
    for k, y in enumerate(ys):
        bank, selected[k], estimates[k] = dpmla_step(bank, y)
        loglik[k] = bank.loglik
    return DpmlaResult(loglik, selected, estimates)


# --------------------------------------------------------------------------
# continuous parameters: FFBSi + Monte-Carlo EM
# --------------------------------------------------------------------------


@dataclass
class SmoothedTrajectorySet:
    paths: np.ndarray  # (N, T+1) state codes, column s is time s
    network: GrnModel  # network (with noise level) the paths were drawn under

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    @property
    def T(self) -> int:
        return self.paths.shape[1] - 1


def _rowwise_categorical(weights: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each entry of ``rows`` draw a column index from that row of ``weights``."""
    S, F = weights.shape
    totals = weights.sum(axis=1, keepdims=True)
    cdf = np.cumsum(weights, axis=1) / totals
    cdf[:, -1] = 1.0
    # shift row r into [r, r+1] so one flat search serves every row
    flat = (cdf + np.arange(S)[:, None]).ravel()
    idx = np.searchsorted(flat, rows + rng.random(rows.size), side="right") - rows * F
    return np.minimum(idx, F - 1)


def ffbsi(forward: ApfTrace, model: GrnModel, N: int, rng: np.random.Generator) -> SmoothedTrajectorySet:
    """Draw ``N`` state trajectories from the joint smoothing distribution.

    Backward draws are made per unique smoothed successor against the unique
    forward particles, so the step-``s`` cost is O(S_s F_s).
    """
    T = forward.T
    kernel = noise_kernel(np.arange(model.d + 1), model.d, model.p)
    paths = np.empty((N, T + 1), dtype=np.uint64)
    last = forward.unique(T)
    paths[:, T] = last.particles[resample(last.weights, N, rng)]
    for s in range(T - 1, -1, -1):
        succ, inv = np.unique(paths[:, s + 1], return_inverse=True)
        cur = forward.unique(s)
        D = cur.weights[None, :] * kernel[popcount(succ[:, None] ^ model.apply(cur.particles)[None, :])]
        if np.any(D.sum(axis=1) <= 0):
            raise DegeneracyError(f"smoothed particle at step {s + 1} has no forward ancestor")
        paths[:, s] = cur.particles[_rowwise_categorical(D, inv, rng)]
    return SmoothedTrajectorySet(paths, model)


@dataclass
class SufficientStats:
    """Everything the M-step needs: mean flip count and per-step activity frequencies."""

    flips: float  # average over paths of sum_s ||x_s xor f(x_{s-1})||_1
    active: np.ndarray  # (T, d) fraction of paths with gene j active at step s = 1..T
    ys: np.ndarray  # (T, d)

    @property
    def T(self) -> int:
        return self.active.shape[0]

    @property
    def d(self) -> int:
        return self.active.shape[1]


def trajectory_stats(trajs: SmoothedTrajectorySet, ys) -> SufficientStats:
    ys = np.asarray(ys, dtype=float)
    paths = trajs.paths
    if ys.shape != (trajs.T, trajs.network.d):
        raise ValueError(f"observations shape {ys.shape} does not match trajectories")
    flips = popcount(paths[:, 1:] ^ trajs.network.apply(paths[:, :-1])).sum() / trajs.N
    active = unpack_bits(paths[:, 1:], trajs.network.d).mean(axis=0)
    return SufficientStats(float(flips), active, ys)


def exact_stats(grn: GrnModel, obs: RnaSeqModel, ys, pi0=None) -> SufficientStats:
    """Sufficient statistics under the exact smoothing distribution (small d only)."""
    ys = np.asarray(ys, dtype=float)
    sm = run_bks(grn, obs, ys, pi0)
    M = build_transition_matrix(grn)
    n = 2**grn.d
    H = popcount(np.arange(n, dtype=np.uint64)[:, None] ^ grn.apply(np.arange(n, dtype=np.uint64))[None, :])
    flips = 0.0
    prev = sm.filter.prior
    for k in range(len(ys)):
        joint = sm.backward[k][:, None] * M * prev[None, :]
        flips += float((joint * H).sum() / joint.sum())
        prev = sm.filter.posterior[k]
    return SufficientStats(flips, sm.smoothed @ state_matrix(grn.d), ys)


def _obs_terms(stats: SufficientStats, theta: ParameterVector):
    lam = theta.s * np.exp(theta.mu + np.outer([0.0, 1.0], theta.delta))  # (2, d)
    return lam[:, None, :]  # (2, 1, d) broadcast against (T, d)


def q_from_stats(stats: SufficientStats, theta: ParameterVector) -> float:
    d, T = stats.d, stats.T
    p = clamp_p(theta.p)
    trans = stats.flips * np.log(p) + (T * d - stats.flips) * np.log1p(-p)
    lam = _obs_terms(stats, theta)
    ll = nb_logpmf(stats.ys[None], lam, theta.phi)  # (2, T, d)
    obs = ((1.0 - stats.active) * ll[0] + stats.active * ll[1]).sum()
    return float(-d * np.log(2.0) + trans + obs)


def q_hat(trajs: SmoothedTrajectorySet, theta: ParameterVector, ys) -> float:
    """Trajectory-averaged complete-data log-likelihood at ``theta``.

    The initial-state term uses the fixed uniform prior; the network topology
    is taken from ``trajs.network`` and the noise level from ``theta``.
    """
    theta.check_in_box()
    return q_from_stats(trajectory_stats(trajs, ys), theta)


def gradient_from_stats(stats: SufficientStats, theta: ParameterVector, names: Sequence[str] = CONTINUOUS) -> dict:
    d, T = stats.d, stats.T
    p = theta.p
    if "p" in names and not P_FLOOR <= p < 0.5:
        raise ValueError(f"gradient in p needs p strictly inside (0, 0.5), got {p}")
    y = stats.ys[None]
    a = stats.active
    lam = _obs_terms(stats, theta)
    phi = theta.phi
    g = phi * (y - lam) / (phi + lam)  # d/dlog(lambda) of the NB log-pmf, (2, T, d)
    g_mix = (1.0 - a) * g[0] + a * g[1]
    h = digamma(y + phi) - digamma(phi) + (lam - y) / (lam + phi) + np.log(phi / (lam + phi))
    out = {
        "s": g_mix.sum() / theta.s,
        "mu": g_mix.sum(),
        "delta": (a * g[1]).sum(axis=0),
        "phi": ((1.0 - a) * h[0] + a * h[1]).sum(axis=0),
    }
    if "p" in names:
        out["p"] = (stats.flips - T * d * p) / (p * (1.0 - p))
    return {n: out[n] for n in names}


def q_hat_gradient(trajs: SmoothedTrajectorySet, theta: ParameterVector, ys) -> dict:
    """Analytic gradient of :func:`q_hat` with respect to p, s, mu, delta and phi."""
    theta.check_in_box()
    return gradient_from_stats(trajectory_stats(trajs, ys), theta)


def projected_gradient_ascent(
    fun,
    grad,
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    xtol: float = 1e-10,
    max_iter: int = 2000,
    armijo: float = 1e-4,
) -> np.ndarray:
    """Maximise ``fun`` on the box ``[lo, hi]`` with Barzilai-Borwein steps and Armijo backtracking."""
    x = np.clip(x0, lo, hi)
    f, g = fun(x), grad(x)
    step = 1.0 / max(1.0, np.abs(g).max())
    for _ in range(max_iter):
        if np.abs(np.clip(x + g, lo, hi) - x).max() < xtol:
            return x
        for _ in range(60):
            x_new = np.clip(x + step * g, lo, hi)
            f_new = fun(x_new)
            if f_new >= f + armijo * g @ (x_new - x):
                break
            step *= 0.5
        else:
            raise LineSearchError("backtracking failed to find an ascent step")
        g_new = grad(x_new)
        dx, dg = x_new - x, g_new - g
        if np.abs(dx).max() < xtol:
            return x_new
        curv = -(dx @ dg)
        step = (dx @ dx) / curv if curv > 0 else step * 2.0
        x, f, g = x_new, f_new, g_new
    return x


def m_step(stats: SufficientStats, theta: ParameterVector, estimate: Sequence[str]) -> ParameterVector:
    """Maximise the surrogate over the components named in ``estimate``."""
    new = theta.with_flat([], np.empty(0))
    if "p" in estimate:
        lo, hi = theta.bounds["p"]
        new.p = float(np.clip(stats.flips / (stats.T * stats.d), max(lo, P_FLOOR), hi))
    names = [n for n in OBS_PARAMS if n in estimate]
    if not names:
        return new
    lo, hi = new.box(names)

    def fun(x):
        return q_from_stats(stats, new.with_flat(names, x))

    def grad(x):
        gd = gradient_from_stats(stats, new.with_flat(names, x), names)
        return np.concatenate([np.atleast_1d(gd[n]) for n in names])

    x = projected_gradient_ascent(fun, grad, new.flat(names), lo, hi)
    return new.with_flat(names, x)


@dataclass
class EmIteration:
    theta: ParameterVector  # theta^(n+1)
    q_hat: float
    max_change: float
    log_likelihood: float  # APF estimate of log p(Y_{1:T}) at theta^(n)


@dataclass
class EmResult:
    theta: ParameterVector
    history: list[EmIteration]
    converged: bool
    smoother: ApfSmootherResult | None

    @property
    def iterations(self) -> int:
        return len(self.history)


def em_fit(
    ys,
    theta0: ParameterVector,
    network: GrnModel,
    N: int,
    rng: np.random.Generator,
    epsilon: float = 1e-4,
    estimate: Sequence[str] = ("p", "mu", "delta"),
    max_iters: int = 200,
    smooth: bool = True,
) -> EmResult:
    """Monte-Carlo EM with FFBSi E-steps, then an APF smoother at the fitted parameters.

    Stops when the largest absolute parameter change falls below ``epsilon``.
    Without convergence the iterate with the highest APF log-likelihood is
    returned and ``converged`` is False.
    """
    ys = np.asarray(ys)
    unknown = set(estimate) - set(CONTINUOUS)
    if unknown:
        raise ValueError(f"cannot estimate {sorted(unknown)}")
    theta0.check_in_box()
    names = [n for n in CONTINUOUS if n in estimate]
    theta = theta0
    history: list[EmIteration] = []
    visited: list[tuple[float, ParameterVector]] = []
    converged = False
    for _ in range(max_iters):
        grn, obs = theta.models(network)
        trace = run_apf_bkf(grn, obs, ys, N, rng)
        visited.append((trace.log_likelihood, theta))
        stats = trajectory_stats(ffbsi(trace, grn, N, rng), ys)
        new = m_step(stats, theta, names)
        change = float(np.abs(new.flat(names) - theta.flat(names)).max())
        history.append(EmIteration(new, q_from_stats(stats, new), change, trace.log_likelihood))
        theta = new
        if change < epsilon:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM did not converge in {max_iters} iterations", RuntimeWarning, stacklevel=2)
        theta = max(visited, key=lambda t: t[0])[1]
    smoother = None
    if smooth:
        grn, obs = theta.models(network)
        smoother = smooth_trace(run_apf_bkf(grn, obs, ys, N, rng), grn)
    return EmResult(theta, history, converged, smoother)


def exact_em(ys, theta0: ParameterVector, network: GrnModel, estimate=("p", "mu", "delta"), iters: int = 20):
    """EM with the exact smoother as E-step; returns the iterates and exact log-likelihoods."""
    names = [n for n in CONTINUOUS if n in estimate]
    theta = theta0
    thetas, logliks = [theta], []
    for _ in range(iters):
        grn, obs = theta.models(network)
        logliks.append(run_bkf(grn, obs, ys).log_likelihood)
        theta = m_step(exact_stats(grn, obs, ys), theta, names)
        thetas.append(theta)
    grn, obs = theta.models(network)
    logliks.append(run_bkf(grn, obs, ys).log_likelihood)
    return thetas, np.array(logliks)
