"""Synthetic-data experiments: state tracking, discrete identification and EM.

Every run draws its randomness from ``SeedSequence([seed, cell, run])`` so
results do not depend on scheduling; set ``POBDS_WORKERS`` to run the
independent runs of an experiment in a process pool.  All estimators of a
cell consume the same simulated data, which makes comparisons paired.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adaptive import DEFAULT_BOUNDS, ParameterVector, apply_overrides, em_fit, relative_distances, run_dpmla
from .core import GrnModel, cell_cycle_network, load_network, unpack_bits
from .exact import run_bkf, run_bks
from .particle import run_apf_bkf, smooth_trace
from .rnaseq import RnaSeqModel, load_obs_model

log = logging.getLogger(__name__)

ESTIMATORS = ("bkf", "bks", "apf-bkf", "apf-bks")
INVALID_FRACTION = 0.01


def simulate(model: GrnModel, obs_model: RnaSeqModel, T: int, rng: np.random.Generator):
    """Sample a state path ``X_0..X_T`` (uniform ``X_0``) and counts ``Y_1..Y_T``.

    Returns
    -------
    states : (T+1,) uint64 state codes
    ys : (T, d) int64 read counts
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    d = model.d
    states = np.empty(T + 1, dtype=np.uint64)
    states[0] = rng.integers(0, 2**d - 1, dtype=np.uint64, endpoint=True)
    for k in range(1, T + 1):
        states[k] = model.propagate(states[k - 1 : k], rng)[0]
    ys = obs_model.sample(states[1:], rng)
    return states, ys


def correct_state_rate(truth, estimates, metric: str = "gene") -> float:
    """Percentage of correct state decisions.

    ``truth`` and ``estimates`` are 0/1 arrays of shape ``(..., T, d)``.
    With ``metric="gene"`` every gene at every step counts once; with
    ``metric="vector"`` a step counts as correct only if all d genes match.
    Leading axes (runs) are averaged over.
    """
    truth = np.asarray(truth)
    estimates = np.asarray(estimates)
    if truth.shape != estimates.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimates.shape}")
    hit = truth == estimates
    if metric == "gene":
        return float(100.0 * hit.mean())
    if metric == "vector":
        return float(100.0 * hit.all(axis=-1).mean())
    raise ValueError(f"unknown metric {metric!r}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    network: str | None = None  # JSON path; None selects the bundled cell-cycle network
    obs_model: str | None = None  # JSON path; None selects the uniform default model
    T: int = 100
    N: list = field(default_factory=lambda: [1000])
    runs: int = 10
    seed: int = 0
    estimators: list = field(default_factory=lambda: list(ESTIMATORS))
    p: list = field(default_factory=lambda: [0.01])
    phi: list = field(default_factory=lambda: [5.0])
    out: str = "results"
    # discrete identification
    lengths: list = field(default_factory=lambda: [30, 60])
    candidates: list = field(default_factory=lambda: [{"a": [[4, 2, v]]} for v in (-1, 0, 1)])
    truth: int = 0  # index of the generating candidate
    # EM
    T_values: list = field(default_factory=lambda: [50, 100])
    estimate: list = field(default_factory=lambda: ["p", "mu", "delta"])
    theta0: dict | None = None  # None starts at the centre of every box
    epsilon: float = 1e-4
    max_iters: int = 200

    def __post_init__(self):
        self.N = [int(n) for n in np.atleast_1d(self.N)]
        self.p = [float(v) for v in np.atleast_1d(self.p)]
        self.phi = [float(v) for v in np.atleast_1d(self.phi)]
        self.lengths = [int(v) for v in np.atleast_1d(self.lengths)]
        self.T_values = [int(v) for v in np.atleast_1d(self.T_values)]
        if isinstance(self.estimators, str):
            self.estimators = [e.strip() for e in self.estimators.split(",")]
        if isinstance(self.estimate, str):
            self.estimate = [e.strip() for e in self.estimate.split(",")]
        self.validate()

    def validate(self):
        if self.T < 1 or self.runs < 1 or min(self.N) < 1:
            raise ValueError("T, N and runs must all be at least 1")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        for path in (self.network, self.obs_model):
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(path)

    @classmethod
    def from_json(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            spec = json.load(fh)
        return cls(**{**overrides, **spec})

    def base_models(self) -> tuple[GrnModel, RnaSeqModel]:
        grn = load_network(self.network) if self.network else cell_cycle_network()
        obs = load_obs_model(self.obs_model) if self.obs_model else RnaSeqModel.uniform(grn.d)
        if obs.d != grn.d:
            raise ValueError("network and observation model disagree on the gene count")
        return grn, obs


def run_seed(seed: int, cell: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(cell), int(run)])


def _workers() -> int:
    return max(1, int(os.environ.get("POBDS_WORKERS", "1")))


def _map_runs(fn, args: list) -> list:
    if _workers() == 1 or len(args) < 2:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(_workers()) as pool:
        return list(pool.map(fn, *zip(*args)))


def _guarded(fn, *args):
    """Run one experiment replicate; any estimator failure excludes the run."""
    try:
        return fn(*args)
    except Exception:  # noqa: BLE001 - the harness logs and counts every failure
        log.exception("run excluded (args=%s)", args[-1:])
        return None


def _write_csv(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _exclusion_summary(excluded: int, runs: int) -> dict:
    return {"excluded": excluded, "valid": excluded <= INVALID_FRACTION * runs}


# --------------------------------------------------------------------------
# experiment 1: state tracking
# --------------------------------------------------------------------------


def _tracking_run(grn, obs, T, Ns, estimators, seq):
    sim_seq, *apf_seqs = seq.spawn(1 + len(Ns))
    states, ys = simulate(grn, obs, T, np.random.default_rng(sim_seq))
    truth = unpack_bits(states[1:], grn.d)
    out = {}  # (estimator, N) -> (estimates, seconds)
    if "bkf" in estimators or "bks" in estimators:
        t0 = time.perf_counter()
        if "bks" in estimators:
            sm = run_bks(grn, obs, ys)
            fwd = sm.filter
        else:
            fwd = run_bkf(grn, obs, ys)
        t1 = time.perf_counter()
        if "bkf" in estimators:
            out[("bkf", 0)] = (fwd.estimates, t1 - t0)
        if "bks" in estimators:
            out[("bks", 0)] = (sm.estimates, t1 - t0)
    if "apf-bkf" in estimators or "apf-bks" in estimators:
        for N, s in zip(Ns, apf_seqs):
            t0 = time.perf_counter()
            trace = run_apf_bkf(grn, obs, ys, N, np.random.default_rng(s))
            t1 = time.perf_counter()
            out[("apf-bkf", N)] = (trace.estimates, t1 - t0)
            if "apf-bks" in estimators:
                res = smooth_trace(trace, grn)
                out[("apf-bks", N)] = (res.estimates, time.perf_counter() - t0)
    return truth, out


def experiment1(config: ExperimentConfig, write: bool = True) -> list[dict]:
    """Correct-state rates of the exact and particle estimators per (p, phi) cell.

    Writes ``experiment1.csv`` (one row per cell, estimator and N),
    ``experiment1_runtime.csv`` (machine-local timings, kept apart so the
    main table is reproducible byte for byte) and ``experiment1_plot.csv``
    (particle-estimator runtime against N).
    """
    grn0, obs0 = config.base_models()
    rows, timing_rows = [], []
    for cell, (p, phi) in enumerate((p, phi) for p in config.p for phi in config.phi):
        grn, obs = grn0.replace(p=p), obs0.replace(phi=np.full(obs0.d, phi))
        args = [(_tracking_run, grn, obs, config.T, config.N, config.estimators, run_seed(config.seed, cell, r))
                for r in range(config.runs)]
        results = _map_runs(_guarded, args)
        ok = [r for r in results if r is not None]
        summary = _exclusion_summary(len(results) - len(ok), config.runs)
        keys = sorted(ok[0][1], key=lambda k: (ESTIMATORS.index(k[0]), k[1])) if ok else []
        for est, N in keys:
            gene = np.array([correct_state_rate(t, o[(est, N)][0]) for t, o in ok])
            vec = np.array([correct_state_rate(t, o[(est, N)][0], "vector") for t, o in ok])
            secs = np.array([o[(est, N)][1] for _, o in ok])
            se = gene.std(ddof=1) / np.sqrt(gene.size) if gene.size > 1 else 0.0
            rows.append({"p": p, "phi": phi, "estimator": est, "N": N,
                         "rate_gene": float(gene.mean()), "rate_gene_se": float(se),
                         "rate_vector": float(vec.mean()), "runs_used": len(ok), **summary,
                         "gene_runs": gene, "vector_runs": vec})
            timing_rows.append([p, phi, est, N, float(secs.mean())])
    if write:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["p", "phi", "estimator", "N", "rate_gene", "rate_gene_se", "rate_vector", "runs_used", "excluded", "valid"]
        _write_csv(out / "experiment1.csv", cols, ([_fmt(r[c]) for c in cols] for r in rows))
        _write_csv(out / "experiment1_runtime.csv", ["p", "phi", "estimator", "N", "seconds"],
                   ([_fmt(v) for v in r] for r in timing_rows))
        _write_csv(out / "experiment1_plot.csv", ["x", "y", "series"],
                   ([r[3], _fmt(r[4]), f"{r[2]} p={r[0]} phi={r[1]}"] for r in timing_rows if r[3] > 0))
    return rows


# --------------------------------------------------------------------------
# experiment 2: discrete identification with a filter bank
# --------------------------------------------------------------------------


def _bank_run(grn, obs, candidates, truth, T, N, seq):
    sim_seq, bank_seq = seq.spawn(2)
    states, ys = simulate(*candidates[truth], T, np.random.default_rng(sim_seq))
    res = run_dpmla(candidates, ys, N, bank_seq)
    return res.selected, res.loglik


def experiment2(config: ExperimentConfig, write: bool = True) -> list[dict]:
    """Selection accuracy of the candidate bank per (p, phi, n) cell.

    One series of length ``max(lengths)`` is simulated per run and the
    selection after the first ``n`` observations is scored, so different
    lengths are compared on the same data.
    """
    grn0, obs0 = config.base_models()
    T = max(config.lengths)
    N = config.N[0]
    rows, plot_rows, trace_rows = [], [], []
    for cell, (p, phi) in enumerate((p, phi) for p in config.p for phi in config.phi):
        grn, obs = grn0.replace(p=p), obs0.replace(phi=np.full(obs0.d, phi))
        candidates = [apply_overrides(grn, obs, c) for c in config.candidates]
        args = [(_bank_run, grn, obs, candidates, config.truth, T, N, run_seed(config.seed, cell, r))
                for r in range(config.runs)]
        results = _map_runs(_guarded, args)
        ok = [r for r in results if r is not None]
        summary = _exclusion_summary(len(results) - len(ok), config.runs)
        hits = np.array([sel == config.truth for sel, _ in ok]).reshape(len(ok), T)
        for n in config.lengths:
            rows.append({"p": p, "phi": phi, "n": n, "N": N, "accuracy": float(hits[:, n - 1].mean()),
                         "runs_used": len(ok), **summary})
        label = f"p={p} phi={phi}"
        plot_rows += [[k + 1, _fmt(float(v)), label] for k, v in enumerate(hits.mean(axis=0))]
        if ok:
            sel, ll = ok[0]
            trace_rows += [[p, phi, k + 1, *(_fmt(float(v)) for v in ll[k]), int(sel[k])] for k in range(T)]
    if write:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["p", "phi", "n", "N", "accuracy", "runs_used", "excluded", "valid"]
        _write_csv(out / "experiment2.csv", cols, ([_fmt(r[c]) for c in cols] for r in rows))
        _write_csv(out / "experiment2_plot.csv", ["x", "y", "series"], plot_rows)
        M = len(config.candidates)
        _write_csv(out / "experiment2_trace.csv",
                   ["p", "phi", "k", *(f"loglik_{i}" for i in range(M)), "selected"], trace_rows)
    return rows


# --------------------------------------------------------------------------
# experiment 3: continuous parameters by EM
# --------------------------------------------------------------------------


def default_theta0(d: int, base: ParameterVector, estimate: Sequence[str]) -> ParameterVector:
    """Start every estimated component at the centre of its box, others at ``base``."""
    centre = {n: 0.5 * (lo + hi) for n, (lo, hi) in DEFAULT_BOUNDS.items()}
    kw = base.as_dict()
    for n in estimate:
        kw[n] = np.full(d, centre[n]) if n in ("delta", "phi") else centre[n]
    return ParameterVector(**kw, bounds=dict(base.bounds))


def _em_run(grn, obs, T_values, N, estimate, theta0, epsilon, max_iters, seq):
    sim_seq, *fit_seqs = seq.spawn(1 + len(T_values))
    _, ys = simulate(grn, obs, max(T_values), np.random.default_rng(sim_seq))
    star = ParameterVector.from_models(grn, obs)
    fits = []
    for T, s in zip(T_values, fit_seqs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = em_fit(ys[:T], theta0, grn, N, np.random.default_rng(s), epsilon=epsilon,
                         estimate=estimate, max_iters=max_iters, smooth=False)
        fits.append((res.theta, relative_distances(res.theta, star, estimate), res.iterations, res.converged))
    return fits


def experiment3(config: ExperimentConfig, write: bool = True) -> list[dict]:
    """Relative distance of EM estimates from the truth as a function of T.

    Shorter series are prefixes of the longest one, so the T comparison is
    paired within a run.
    """
    grn, obs = config.base_models()
    grn = grn.replace(p=config.p[0])
    obs = obs.replace(phi=np.full(obs.d, config.phi[0]))
    star = ParameterVector.from_models(grn, obs)
    theta0 = (ParameterVector(**{**star.as_dict(), **config.theta0}) if config.theta0
              else default_theta0(grn.d, star, config.estimate))
    rows, plot_rows, run_rows = [], [], []
    for cell, N in enumerate(config.N):
        args = [(_em_run, grn, obs, config.T_values, N, config.estimate, theta0, config.epsilon, config.max_iters,
                 run_seed(config.seed, cell, r)) for r in range(config.runs)]
        results = _map_runs(_guarded, args)
        ok = [r for r in results if r is not None]
        summary = _exclusion_summary(len(results) - len(ok), config.runs)
        for i, T in enumerate(config.T_values):
            for name in config.estimate:
                dist = np.array([fits[i][1][name] for fits in ok])  # (runs, size)
                comps = [("", dist.mean(axis=1))]
                if dist.shape[1] > 1:
                    comps += [(f"_{j + 1}", dist[:, j]) for j in range(dist.shape[1])]
                for suffix, v in comps:
                    rows.append({"N": N, "T": T, "parameter": name + suffix, "relative_distance": float(v.mean()),
                                 "runs_used": len(ok), **summary, "runs": v})
                    if not suffix:
                        plot_rows.append([T, _fmt(float(v.mean())), f"{name} N={N}"])
            for r, fits in enumerate(ok):
                theta, _, iters, conv = fits[i]
                run_rows.append([N, T, r, iters, int(conv), json.dumps(theta.as_dict())])
    if write:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["N", "T", "parameter", "relative_distance", "runs_used", "excluded", "valid"]
        _write_csv(out / "experiment3.csv", cols, ([_fmt(r[c]) for c in cols] for r in rows))
        _write_csv(out / "experiment3_plot.csv", ["x", "y", "series"], plot_rows)
        _write_csv(out / "experiment3_runs.csv", ["N", "T", "run", "iterations", "converged", "theta"], run_rows)
    return rows


EXPERIMENTS = {1: experiment1, 2: experiment2, 3: experiment3}


def config_dict(config: ExperimentConfig) -> dict:
    return asdict(config)
