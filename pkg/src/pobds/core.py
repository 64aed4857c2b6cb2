"""Boolean state representation and the threshold gene-network state model.

States are stored as unsigned 64-bit integer codes with gene 1 in the
least-significant bit, so the canonical enumeration of ``{0,1}^d`` is simply
``0, 1, ..., 2**d - 1``.  XOR and popcount on the codes give the noise vector
and its Hamming weight in O(1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike
from typing import Sequence

import numpy as np

MAX_EXACT_D = 20
MAX_D = 64
P_FLOOR = 1e-9

_U64 = np.uint64


class DegeneracyError(RuntimeError):
    """The observations have (numerically) zero probability under the model or particle cloud."""


def pack_bits(bits) -> np.ndarray:
    """Pack an ``(n, d)`` 0/1 array into ``n`` integer codes (gene 1 = LSB)."""
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits[None, :]
    d = bits.shape[-1]
    if d > MAX_D:
        raise ValueError(f"at most {MAX_D} genes are supported, got {d}")
    shifts = np.arange(d, dtype=_U64)
    return np.bitwise_or.reduce(bits.astype(_U64) << shifts, axis=-1)


def unpack_bits(codes, d: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns a uint8 array of shape ``codes.shape + (d,)``."""
    codes = np.asarray(codes, dtype=_U64)
    shifts = np.arange(d, dtype=_U64)
    return ((codes[..., None] >> shifts) & _U64(1)).astype(np.uint8)


def popcount(codes) -> np.ndarray:
    return np.bitwise_count(np.asarray(codes, dtype=_U64)).astype(np.int64)


@dataclass(frozen=True)
class BooleanState:
    """A single d-bit Boolean state keyed by its canonical integer code."""

    code: int
    d: int

    def __post_init__(self):
        if not 1 <= self.d <= MAX_D:
            raise ValueError(f"d must be in [1, {MAX_D}], got {self.d}")
        if not 0 <= self.code < 2**self.d:
            raise ValueError(f"code {self.code} does not fit in {self.d} bits")

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "BooleanState":
        bits = np.asarray(bits)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ValueError("bits must be a 1-d vector of 0/1 values")
        return cls(int(pack_bits(bits)[0]), len(bits))

    @property
    def bits(self) -> np.ndarray:
        return unpack_bits(self.code, self.d)

    def __xor__(self, other: "BooleanState") -> "BooleanState":
        _check_dim(self.d, other.d)
        return BooleanState(self.code ^ other.code, self.d)

    def hamming(self, other: "BooleanState") -> int:
        _check_dim(self.d, other.d)
        return (self.code ^ other.code).bit_count()

    def __int__(self) -> int:
        return self.code

    def hex(self) -> str:
        return format(self.code, "x")


def _check_dim(d1: int, d2: int):
    if d1 != d2:
        raise ValueError(f"dimension mismatch: {d1} != {d2}")


def encode(bits: Sequence[int]) -> int:
    return BooleanState.from_bits(bits).code


def decode(code: int, d: int) -> np.ndarray:
    return BooleanState(int(code), d).bits


def enumerate_states(d: int) -> list[BooleanState]:
    """All ``2**d`` states in canonical order (state ``i`` has the bit pattern of ``i``)."""
    _check_exact_d(d)
    return [BooleanState(i, d) for i in range(2**d)]


def state_matrix(d: int) -> np.ndarray:
    """``(2**d, d)`` 0/1 matrix whose row ``i`` is state ``i``.

    Its transpose is the ``d x 2**d`` matrix of stacked state vectors, so the
    conditional mean of a state distribution ``pi`` is ``state_matrix(d).T @ pi``.
    """
    _check_exact_d(d)
    return unpack_bits(np.arange(2**d, dtype=_U64), d)


def _check_exact_d(d: int):
    if not 1 <= d <= MAX_EXACT_D:
        raise ValueError(f"state-space enumeration needs 1 <= d <= {MAX_EXACT_D}, got {d}")


@dataclass(frozen=True, eq=False)
class GrnModel:
    """Threshold Boolean network with i.i.d. Bernoulli(p) bit-flip noise.

    Parameters
    ----------
    a : (d, d) array_like
        Interaction matrix, ``a[i, j]`` in {-1, 0, +1} is the regulation of gene i by gene j.
    b : (d,) array_like
        Biases in {-1/2, +1/2}.
    p : float
        Noise intensity, ``0 <= p <= 1/2``.
    genes : sequence of str, optional
        Gene names, used for CSV headers.
    """

    a: np.ndarray
    b: np.ndarray
    p: float
    genes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        a = np.array(self.a, dtype=np.int64)
        b = np.array(self.b, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"a must be a square matrix, got shape {a.shape}")
        d = a.shape[0]
        if not 1 <= d <= MAX_D:
            raise ValueError(f"d must be in [1, {MAX_D}], got {d}")
        if not np.isin(a, (-1, 0, 1)).all():
            raise ValueError("interaction entries must be -1, 0 or +1")
        if b.shape != (d,) or not np.isin(b, (-0.5, 0.5)).all():
            raise ValueError("biases must be a length-d vector of -0.5/+0.5")
        p = float(self.p)
        if not 0.0 <= p <= 0.5:
            raise ValueError(f"noise intensity must lie in [0, 0.5], got {p}")
        genes = tuple(self.genes) if self.genes else tuple(f"g{i + 1}" for i in range(d))
        if len(genes) != d:
            raise ValueError("need one gene name per gene")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "genes", genes)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    def replace(self, **changes) -> "GrnModel":
        kw = dict(a=self.a, b=self.b, p=self.p, genes=self.genes)
        kw.update(changes)
        return GrnModel(**kw)

    @cached_property
    def f_table(self) -> np.ndarray | None:
        """Network function tabulated over all states (``None`` when d is too large)."""
        if self.d > 16:
            return None
        return self._apply_direct(np.arange(2**self.d, dtype=_U64))

    def _apply_direct(self, codes: np.ndarray) -> np.ndarray:
        x = unpack_bits(codes, self.d).astype(np.int64)
        # sum_j a_ij x_j + b_i > 0  <=>  2 sum_j a_ij x_j + 2 b_i > 0, all integers
        drive = 2 * (x @ self.a.T) + (2 * self.b).astype(np.int64)
        return pack_bits(drive > 0)

    def apply(self, codes) -> np.ndarray:
        """Vectorised network function on an array of state codes."""
        codes = np.asarray(codes, dtype=_U64)
        table = self.f_table
        if table is not None:
            return table[codes]
        return self._apply_direct(codes.ravel()).reshape(codes.shape)

    def log_transition(self, x_next, x_prev) -> np.ndarray:
        """Elementwise ``log P(x_next | x_prev)``, with p clamped to ``[1e-9, 0.5]``."""
        h = popcount(self.apply(x_prev) ^ np.asarray(x_next, dtype=_U64))
        p = clamp_p(self.p)
        return h * np.log(p) + (self.d - h) * np.log1p(-p)

    def transition_prob(self, x_next, x_prev) -> np.ndarray:
        """Elementwise ``P(x_next | x_prev)`` (exact, p = 0 allowed)."""
        h = popcount(self.apply(x_prev) ^ np.asarray(x_next, dtype=_U64))
        return noise_kernel(h, self.d, self.p)

    def propagate(self, codes, rng: np.random.Generator) -> np.ndarray:
        codes = np.asarray(codes, dtype=_U64)
        return self.apply(codes) ^ sample_noise(codes.shape, self.d, self.p, rng)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "genes": list(self.genes),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "p": self.p,
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "GrnModel":
        model = cls(a=spec["a"], b=spec["b"], p=spec["p"], genes=tuple(spec.get("genes", ())))
        if "d" in spec and int(spec["d"]) != model.d:
            raise ValueError(f"declared d={spec['d']} but a is {model.d}x{model.d}")
        return model


def clamp_p(p: float) -> float:
    return min(max(float(p), P_FLOOR), 0.5)


def noise_kernel(h, d: int, p: float) -> np.ndarray:
    """Probability of a particular noise vector of Hamming weight ``h``."""
    h = np.asarray(h)
    return np.power(p, h) * np.power(1.0 - p, d - h)


def sample_noise(shape, d: int, p: float, rng: np.random.Generator) -> np.ndarray:
    shape = (int(shape),) if np.ndim(shape) == 0 else tuple(shape)
    if p == 0.0:
        return np.zeros(shape, dtype=_U64)
    flips = rng.random(shape + (d,)) < p
    return pack_bits(flips.reshape(-1, d)).reshape(shape)


def network_function(model: GrnModel, x: BooleanState) -> BooleanState:
    _check_dim(model.d, x.d)
    return BooleanState(int(model.apply(x.code)), model.d)


def transition_probability(model: GrnModel, x_next: BooleanState, x_prev: BooleanState) -> float:
    _check_dim(model.d, x_next.d)
    _check_dim(model.d, x_prev.d)
    return float(model.transition_prob(x_next.code, x_prev.code))


def sample_transition(model: GrnModel, x_prev: BooleanState, rng: np.random.Generator) -> BooleanState:
    _check_dim(model.d, x_prev.d)
    return BooleanState(int(model.propagate(np.uint64(x_prev.code), rng)), model.d)


def _check_unit_interval(v: np.ndarray):
    if np.any(~np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError("entries must lie in [0, 1]")


def binarize(v) -> np.ndarray:
    """Threshold at 1/2 (strict): entries equal to 1/2 map to 0."""
    v = np.asarray(v, dtype=float)
    _check_unit_interval(v)
    return (v > 0.5).astype(np.uint8)


def mmse_from_mean(z) -> tuple[np.ndarray, np.ndarray | float]:
    """Boolean MMSE estimate and its conditional MSE from a conditional mean vector.

    Works on a single ``(d,)`` vector or a stack ``(T, d)``; the MSE is summed
    over the last axis.
    """
    z = np.asarray(z, dtype=float)
    est = binarize(z)
    mse = np.minimum(z, 1.0 - z).sum(axis=-1)
    return est, (float(mse) if np.ndim(mse) == 0 else mse)


def load_network(path: str | PathLike) -> GrnModel:
    with open(path) as fh:
        return GrnModel.from_dict(json.load(fh))


def save_network(model: GrnModel, path: str | PathLike):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def cell_cycle_network(p: float = 0.01) -> GrnModel:
    """The bundled 10-gene mammalian cell-cycle network."""
    from importlib.resources import files

    spec = json.loads(files("pobds.data").joinpath("cell_cycle.json").read_text())
    spec["p"] = p
    return GrnModel.from_dict(spec)
