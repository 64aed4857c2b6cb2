"""Exact Boolean Kalman filter and fixed-interval smoother over the full 2^d state space."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from .core import (
    DegeneracyError,
    GrnModel,
    mmse_from_mean,
    noise_kernel,
    pack_bits,
    popcount,
    state_matrix,
)
from .rnaseq import RnaSeqModel

MAX_DENSE_D = 14
DENSE_AUTO_D = 10


def build_transition_matrix(model: GrnModel) -> np.ndarray:
    """Dense column-stochastic matrix ``M[i, j] = P(X_k = x^i | X_{k-1} = x^j)``."""
    d = model.d
    if d > MAX_DENSE_D:
        raise ValueError(f"dense transition matrix limited to d <= {MAX_DENSE_D}, got {d}")
    n = 2**d
    f = model.apply(np.arange(n, dtype=np.uint64))
    h = popcount(np.arange(n, dtype=np.uint64)[:, None] ^ f[None, :])
    return noise_kernel(h, d, model.p)


def _flip_mix(v: np.ndarray, d: int, p: float) -> np.ndarray:
    """Convolve a state vector with the i.i.d. bit-flip kernel, one gene at a time."""
    if p == 0.0:
        return v.copy()
    out = v
    for i in range(d):
        blocks = out.reshape(-1, 2, 2**i)
        out = ((1.0 - p) * blocks + p * blocks[:, ::-1, :]).reshape(-1)
    return out


class TransitionOperator:
    """Applies ``M`` and ``M^T`` either with a stored dense matrix or matrix-free.

    The matrix-free path pushes mass through the network function and then
    applies the bit-flip kernel gene by gene, costing O(d 2^d) per product.
    """

    def __init__(self, model: GrnModel, method: str = "auto"):
        if method not in ("auto", "dense", "kernel"):
            raise ValueError(f"unknown method {method!r}")
        if method == "auto":
            method = "dense" if model.d <= DENSE_AUTO_D else "kernel"
        self.model = model
        self.method = method
        self.n = 2**model.d
        self.f = model.apply(np.arange(self.n, dtype=np.uint64)).astype(np.int64)
        self.matrix = build_transition_matrix(model) if method == "dense" else None

    def predict(self, pi: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix @ pi
        pushed = np.bincount(self.f, weights=pi, minlength=self.n)
        return _flip_mix(pushed, self.model.d, self.model.p)

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix.T @ v
        return _flip_mix(v, self.model.d, self.model.p)[self.f]


def _as_operator(transition) -> TransitionOperator:
    if isinstance(transition, TransitionOperator):
        return transition
    if isinstance(transition, GrnModel):
        return TransitionOperator(transition)
    raise TypeError("expected a GrnModel or TransitionOperator")


def update_diagonal(obs_model: RnaSeqModel, y) -> tuple[np.ndarray, float]:
    """Likelihood of ``y`` under every state, as ``(exp(loglik - m), m)``."""
    ll = obs_model.state_loglik(y, np.arange(2**obs_model.d, dtype=np.uint64))
    m = float(ll.max())
    return np.exp(ll - m), m


def uniform_prior(d: int) -> np.ndarray:
    return np.full(2**d, 2.0**-d)


def _normalized_update(pred: np.ndarray, lik: np.ndarray, offset: float) -> tuple[np.ndarray, float]:
    beta = lik * pred
    total = beta.sum()
    if not total > 0 or not np.isfinite(total):
        raise DegeneracyError("observation has zero probability under the predicted distribution")
    return beta / total, float(np.log(total) + offset)


def bkf_step(transition, obs_model: RnaSeqModel, y, prior: np.ndarray) -> tuple[np.ndarray, float]:
    """One prediction/update/normalisation step.

    Returns the posterior ``Pi_{k|k}`` and ``log ||beta_k||_1 = log p(y_k | y_{1:k-1})``.
    """
    op = _as_operator(transition)
    lik, offset = update_diagonal(obs_model, y)
    return _normalized_update(op.predict(prior), lik, offset)


@dataclass
class FilterTrace:
    predicted: np.ndarray  # (T, 2^d) Pi_{k|k-1}
    posterior: np.ndarray  # (T, 2^d) Pi_{k|k}
    log_beta: np.ndarray  # (T,) log ||beta_k||_1
    mean: np.ndarray  # (T, d)
    estimates: np.ndarray  # (T, d) uint8
    mse: np.ndarray  # (T,)
    prior: np.ndarray  # Pi_{0|0}

    @property
    def log_likelihood(self) -> float:
        return float(self.log_beta.sum())


@dataclass
class SmootherTrace:
    smoothed: np.ndarray  # (T, 2^d) Pi_{k|T}, k = 1..T
    initial: np.ndarray  # Pi_{0|T}
    backward: np.ndarray  # (T, 2^d) Delta_{k|k-1}, each rescaled to unit sum
    mean: np.ndarray
    estimates: np.ndarray
    mse: np.ndarray
    filter: FilterTrace


def _check_series(ys, d: int) -> np.ndarray:
    ys = np.asarray(ys)
    if ys.ndim != 2 or ys.shape[0] < 1 or ys.shape[1] != d:
        raise ValueError(f"observations must have shape (T>=1, {d}), got {ys.shape}")
    return ys


def run_bkf(
    model: GrnModel,
    obs_model: RnaSeqModel,
    ys,
    pi0: np.ndarray | None = None,
    method: str = "auto",
) -> FilterTrace:
    """Boolean Kalman filter over an observation series ``ys`` of shape ``(T, d)``."""
    d = model.d
    ys = _check_series(ys, d)
    op = TransitionOperator(model, method)
    pi = uniform_prior(d) if pi0 is None else np.asarray(pi0, dtype=float)
    prior = pi
    T = len(ys)
    predicted = np.empty((T, 2**d))
    posterior = np.empty((T, 2**d))
    log_beta = np.empty(T)
    for k, y in enumerate(ys):
        predicted[k] = op.predict(pi)
        lik, offset = update_diagonal(obs_model, y)
        pi, log_beta[k] = _normalized_update(predicted[k], lik, offset)
        posterior[k] = pi
    mean = posterior @ state_matrix(d)
    est, mse = mmse_from_mean(np.clip(mean, 0.0, 1.0))
    return FilterTrace(predicted, posterior, log_beta, mean, est, np.atleast_1d(mse), prior)


def run_bks(
    model: GrnModel,
    obs_model: RnaSeqModel,
    ys,
    pi0: np.ndarray | None = None,
    method: str = "auto",
) -> SmootherTrace:
    """Fixed-interval Boolean Kalman smoother."""
    d = model.d
    ys = _check_series(ys, d)
    fwd = run_bkf(model, obs_model, ys, pi0, method)
    op = TransitionOperator(model, method)
    T = len(ys)
    n = 2**d
    backward = np.empty((T, n))
    smoothed = np.empty((T, n))
    delta = np.ones(n)
    for k in range(T - 1, -1, -1):
        lik, _ = update_diagonal(obs_model, ys[k])
        msg = lik * delta
        # the backward messages are only needed up to scale
        msg /= msg.sum()
        backward[k] = msg
        joint = fwd.predicted[k] * msg
        total = joint.sum()
        if not total > 0:
            raise DegeneracyError(f"smoothed distribution vanishes at step {k + 1}")
        smoothed[k] = joint / total
        delta = op.adjoint(msg)
        delta /= delta.sum()
    initial = fwd.prior * delta
    initial /= initial.sum()
    mean = smoothed @ state_matrix(d)
    est, mse = mmse_from_mean(np.clip(mean, 0.0, 1.0))
    return SmootherTrace(smoothed, initial, backward, mean, est, np.atleast_1d(mse), fwd)


def write_trace_csv(
    path: str | PathLike,
    estimates: np.ndarray,
    mse: Sequence[float],
    log_beta: Sequence[float],
    extra: dict[str, Sequence] | None = None,
):
    """Write a per-step trace: ``k, log_beta_norm, mse, estimate_bits`` (+ extra columns)."""
    extra = extra or {}
    codes = pack_bits(np.asarray(estimates))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "log_beta_norm", "mse", "estimate_bits", *extra])
        for k in range(len(codes)):
            row = [k + 1, repr(float(log_beta[k])), repr(float(mse[k])), format(int(codes[k]), "x")]
            row += [v[k] for v in extra.values()]
            w.writerow(row)
