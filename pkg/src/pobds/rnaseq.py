"""Negative-binomial RNA-seq observation model.

Read counts are conditionally independent across genes given the Boolean
state, with mean ``lambda_j = s * exp(mu + delta_j * x_j)`` and inverse
dispersion ``phi_j``.  All likelihood arithmetic is done in log-space.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .core import BooleanState, unpack_bits


def nb_logpmf(y, lam, phi) -> np.ndarray:
    """Log negative-binomial pmf parameterised by mean ``lam`` and inverse dispersion ``phi``."""
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    phi = np.asarray(phi, dtype=float)
    log_denom = np.log(lam + phi)
    return (
        gammaln(y + phi)
        - gammaln(y + 1.0)
        - gammaln(phi)
        + y * (np.log(lam) - log_denom)
        + phi * (np.log(phi) - log_denom)
    )


@dataclass(frozen=True, eq=False)
class RnaSeqModel:
    """Single-lane RNA-seq count model.

    Parameters
    ----------
    s : float
        Sequencing depth, ``s > 0``.
    mu : float
        Baseline log-expression of an inactive gene, ``mu >= 0``.
    delta : (d,) array_like
        Differential expression of each gene when active, all ``> 0``.
    phi : (d,) array_like
        Inverse dispersion of each gene, all ``> 0``.
    """

    s: float
    mu: float
    delta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float).ravel()
        phi = np.array(self.phi, dtype=float).ravel()
        if delta.shape != phi.shape or delta.size == 0:
            raise ValueError("delta and phi must be non-empty vectors of equal length")
        if not float(self.s) > 0:
            raise ValueError(f"sequencing depth must be positive, got {self.s}")
        if not float(self.mu) >= 0:
            raise ValueError(f"baseline expression must be non-negative, got {self.mu}")
        if not (np.all(delta > 0) and np.all(phi > 0)):
            raise ValueError("delta and phi entries must be positive")
        delta.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def uniform(cls, d: int, s=1.02, mu=0.1, delta=2.0, phi=5.0) -> "RnaSeqModel":
        return cls(s, mu, np.full(d, float(delta)), np.full(d, float(phi)))

    @property
    def d(self) -> int:
        return self.delta.size

    def replace(self, **changes) -> "RnaSeqModel":
        kw = dict(s=self.s, mu=self.mu, delta=self.delta, phi=self.phi)
        kw.update(changes)
        return RnaSeqModel(**kw)

    def means(self) -> np.ndarray:
        """``(2, d)`` array of expected counts: row 0 inactive, row 1 active."""
        return self.s * np.exp(self.mu + np.outer([0.0, 1.0], self.delta))

    def gene_loglik(self, y) -> np.ndarray:
        """``(2, d)`` per-gene log-likelihoods of counts ``y`` for inactive/active genes."""
        y = self._check_counts(y)
        return nb_logpmf(y[None, :], self.means(), self.phi[None, :])

    def state_loglik(self, y, codes) -> np.ndarray:
        """``log p(y | x)`` for every state code in ``codes``."""
        table = self.gene_loglik(y)
        bits = unpack_bits(codes, self.d)
        return table[0].sum() + bits @ (table[1] - table[0])

    def _check_counts(self, y) -> np.ndarray:
        y = np.asarray(y)
        if y.shape != (self.d,):
            raise ValueError(f"expected {self.d} counts, got shape {y.shape}")
        if np.any(y < 0) or np.any(np.floor(y) != y):
            raise ValueError("read counts must be non-negative integers")
        return y.astype(float)

    def sample(self, codes, rng: np.random.Generator) -> np.ndarray:
        """Draw one count vector per state code, via the Gamma-Poisson mixture."""
        bits = unpack_bits(np.atleast_1d(codes), self.d)
        lam = self.s * np.exp(self.mu + bits * self.delta)
        rate = rng.gamma(self.phi, lam / self.phi)
        return rng.poisson(rate)

    def to_dict(self) -> dict:
        return {"s": self.s, "mu": self.mu, "delta": self.delta.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, spec: dict) -> "RnaSeqModel":
        return cls(spec["s"], spec["mu"], spec["delta"], spec["phi"])


def _check_gene(model: RnaSeqModel, gene: int):
    if not 0 <= gene < model.d:
        raise IndexError(f"gene index {gene} out of range for d={model.d}")


def mean_count(model: RnaSeqModel, gene: int, active: int) -> float:
    """Expected read count of ``gene`` (0-based) in the given activity state."""
    _check_gene(model, gene)
    return model.s * float(np.exp(model.mu + model.delta[gene] * int(active)))


def log_pmf(model: RnaSeqModel, gene: int, y: int, active: int) -> float:
    if y < 0:
        raise ValueError("read counts must be non-negative")
    lam = mean_count(model, gene, active)
    return float(nb_logpmf(y, lam, model.phi[gene]))


def log_likelihood(model: RnaSeqModel, y: Sequence[int], x: BooleanState) -> float:
    if x.d != model.d:
        raise ValueError(f"dimension mismatch: {x.d} != {model.d}")
    return float(model.state_loglik(y, np.uint64(x.code)))


def sample_observation(model: RnaSeqModel, x: BooleanState, rng: np.random.Generator) -> np.ndarray:
    if x.d != model.d:
        raise ValueError(f"dimension mismatch: {x.d} != {model.d}")
    return model.sample(np.uint64(x.code), rng)[0]


def load_obs_model(path: str | PathLike) -> RnaSeqModel:
    with open(path) as fh:
        return RnaSeqModel.from_dict(json.load(fh))


def save_obs_model(model: RnaSeqModel, path: str | PathLike):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def read_counts(path: str | PathLike) -> tuple[list[str], np.ndarray]:
    """Read a counts CSV (header of gene names, one row per time step k = 1..T)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    counts = np.array([[int(v) for v in row] for row in body], dtype=np.int64).reshape(-1, len(header))
    if np.any(counts < 0):
        raise ValueError(f"{path}: negative read count")
    return header, counts


def write_counts(path: str | PathLike, genes: Sequence[str], counts: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(genes)
        w.writerows(np.asarray(counts, dtype=np.int64).tolist())
