"""Randomized Hadamard rotation along the input dimension plus per-output-channel scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NonPowerOfTwoDim, ZeroColumn

# Sign diagonal generator; bump the tag if the derivation ever changes.
SIGN_PRNG = "philox4x64-seedsequence-v1"


@dataclass
class IncoherenceState:
    seed: int
    dim: int
    scales: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32)
        if not _is_pow2(self.dim):
            raise NonPowerOfTwoDim(f"dimension {self.dim} is not a power of two")
        if not np.all(self.scales > 0):
            raise InvalidInput("incoherence scales must be strictly positive")

    @classmethod
    def from_quantized(cls, q) -> "IncoherenceState | None":
        if q.rotation_seed is None:
            return None
        return cls(q.rotation_seed, q.rows, q.scales)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def sign_diagonal(seed: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return 1.0 - 2.0 * rng.integers(0, 2, size=dim)


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform (Sylvester order) along axis 0."""
    x = np.array(x, dtype=np.float64)
    n = x.shape[0]
    if not _is_pow2(n):
        raise NonPowerOfTwoDim(f"{n} rows is not a power of two")
    rest = x.shape[1:]
    h = 1
    while h < n:
        y = x.reshape(n // (2 * h), 2, h, *rest)
        a = y[:, 0].copy()
        y[:, 0] += y[:, 1]
        y[:, 1] = a - y[:, 1]
        h *= 2
    return x


def randomized_hadamard(m, seed: int | None = None, signs=None) -> np.ndarray:
    """``(1/sqrt(n)) H D m`` with ``D`` the seed-derived (or given) sign diagonal."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if not _is_pow2(n):
        raise NonPowerOfTwoDim(f"{n} rows is not a power of two")
    d = sign_diagonal(seed, n) if signs is None else np.asarray(signs, dtype=np.float64)
    return (fwht(d.reshape(-1, *[1] * (m.ndim - 1)) * m) / np.sqrt(n)).astype(np.float32)


def inverse_randomized_hadamard(m, seed: int | None = None, signs=None) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    d = sign_diagonal(seed, n) if signs is None else np.asarray(signs, dtype=np.float64)
    return (d.reshape(-1, *[1] * (m.ndim - 1)) * fwht(m) / np.sqrt(n)).astype(np.float32)


def rotate_hessian(h, seed: int) -> np.ndarray:
    """``R h R^T`` for the rotation ``R`` that ``gaussianize`` applies to the rows.

    Computed in float64 and re-symmetrized, so the result stays a valid
    proxy Hessian for the rotated matrix.
    """
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"Hessian must be square, got {h.shape}")
    if not _is_pow2(n):
        raise NonPowerOfTwoDim(f"{n} rows is not a power of two")
    d = sign_diagonal(seed, n)[:, None]
    half = fwht(d * h) / np.sqrt(n)
    full = fwht(d * half.T) / np.sqrt(n)
    return 0.5 * (full + full.T)


def gaussianize(m, seed: int) -> tuple[np.ndarray, IncoherenceState]:
    """Rotate, then scale each column to unit (biased) standard deviation."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInput(f"expected a matrix, got shape {m.shape}")
    zero = np.flatnonzero(~np.any(m != 0, axis=0))
    if zero.size:
        raise ZeroColumn(f"column(s) {zero[:8].tolist()} are identically zero")
    r = randomized_hadamard(m, seed).astype(np.float64)
    scales = r.std(axis=0).astype(np.float32)
    if np.any(scales <= 0):
        bad = np.flatnonzero(scales <= 0)
        raise ZeroColumn(f"column(s) {bad[:8].tolist()} are constant after rotation")
    out = (r / scales.astype(np.float64)).astype(np.float32)
    return out, IncoherenceState(seed, m.shape[0], scales)


def degaussianize(m, state: IncoherenceState) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] != state.dim or m.shape[1] != state.scales.size:
        raise InvalidInput(f"matrix {m.shape} does not match state ({state.dim}, {state.scales.size})")
    return inverse_randomized_hadamard(m * state.scales.astype(np.float64), state.seed)
