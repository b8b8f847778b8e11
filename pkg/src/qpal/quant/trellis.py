"""Bitshift trellis coding: tail-biting Viterbi encoder and sliding-window decoder.

A trellis vector of length ``T`` is coded as a bit string ``r`` of ``s*T/V``
bits.  Step ``i`` reconstructs ``V`` values from ``lut[window_i]`` where
``window_i`` is the ``L``-bit integer formed by ``r[i*s : i*s+L]`` read
MSB-first, indices wrapping modulo ``len(r)``.  Consecutive windows overlap
in ``L-s`` bits, so the windows are the states of a shift-register trellis:

    window_{i+1} = ((window_i << s) & (2**L - 1)) | next_s_bits

and tail-biting closes the loop (the step after the last is step 0).  Small
trellises are solved exactly by sweeping every wrap state.  Larger ones pin
the wrap state with a first sweep over the half-rotated input, then run an
exact Viterbi pass under that constraint.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import ConfigMismatch, InvalidInput, LengthMismatch


# tail-biting is solved exactly (one sweep per wrap state) up to this many states
EXACT_WRAP_STATES = 256


@dataclass(frozen=True)
class TrellisConfig:
    """Parameters of a bitshift trellis quantizer.

    ``L`` window bits, ``V`` values per step, ``s`` shift bits per step,
    ``T`` trellis (vector) length, ``tlut_bits`` bits of the small codebook
    expanded into the ``2**L`` window LUT.
    """

    L: int = 16
    V: int = 2
    s: int = 4
    T: int = 256
    tlut_bits: int = 9

    def __post_init__(self):
        if not (1 <= self.s <= self.L <= 24):
            raise InvalidInput(f"need 1 <= s <= L <= 24, got s={self.s}, L={self.L}")
        if self.V < 1 or self.T % self.V:
            raise InvalidInput(f"T={self.T} must be divisible by V={self.V}")
        if not 0 <= self.tlut_bits <= self.L - 1:
            raise InvalidInput(f"tlut_bits={self.tlut_bits} must be <= L-1")
        if self.n_bits < self.L:
            raise InvalidInput(f"bit string ({self.n_bits} bits) shorter than the window L={self.L}")

    @property
    def steps(self) -> int:
        return self.T // self.V

    @property
    def n_bits(self) -> int:
        return self.s * self.steps

    @property
    def bitwidth(self) -> float:
        return self.s / self.V


@dataclass
class TrellisPath:
    bits: np.ndarray  # uint8 0/1, length s*T/V
    per_step_states: np.ndarray  # window index per step
    reconstruction: np.ndarray
    sq_error: float


def windows_to_bits(windows: np.ndarray, cfg: TrellisConfig) -> np.ndarray:
    """Bit string of a window sequence: each step contributes its top ``s`` bits."""
    chunks = np.asarray(windows, dtype=np.int64) >> (cfg.L - cfg.s)
    shifts = np.arange(cfg.s - 1, -1, -1)
    return ((chunks[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def bits_to_windows(bits: np.ndarray, cfg: TrellisConfig) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size != cfg.n_bits:
        raise LengthMismatch(f"expected {cfg.n_bits} bits, got {bits.size}")
    weights = 1 << np.arange(cfg.s - 1, -1, -1, dtype=np.int64)
    return chunks_to_windows(bits.reshape(cfg.steps, cfg.s) @ weights, cfg.L, cfg.s)


def chunks_to_windows(chunks: np.ndarray, L: int, s: int) -> np.ndarray:
    """Windows from per-step ``s``-bit chunks (the packed code stream).

    Works on the last axis, so a ``(n_vectors, steps)`` array decodes in one go.
    """
    chunks = np.asarray(chunks, dtype=np.int64)
    steps = chunks.shape[-1]
    shifts = np.arange(s - 1, -1, -1)
    bits = ((chunks[..., None] >> shifts) & 1).reshape(*chunks.shape[:-1], steps * s)
    idx = (np.arange(steps)[:, None] * s + np.arange(L)[None, :]) % (steps * s)
    weights = 1 << np.arange(L - 1, -1, -1, dtype=np.int64)
    return bits[..., idx] @ weights


def tcq_decode(bits: np.ndarray, cfg: TrellisConfig, lut: np.ndarray) -> np.ndarray:
    lut = _check_lut(lut, cfg)
    return lut[bits_to_windows(bits, cfg)].reshape(cfg.T)


def _check_lut(lut, cfg: TrellisConfig) -> np.ndarray:
    lut = np.asarray(lut, dtype=np.float64)
    if lut.ndim == 1:
        lut = lut[:, None]
    if lut.shape != (1 << cfg.L, cfg.V):
        raise ConfigMismatch(f"LUT shape {lut.shape} != ({1 << cfg.L}, {cfg.V})")
    return lut


@numba.njit(cache=True)
def _viterbi_pass(x, lut, L, s, wrap, back, cur, nxt, mins):
    """One Viterbi sweep over ``x`` (steps, V).

    ``wrap < 0``: free start and end.  Otherwise the first window's high
    ``L-s`` bits and the last window's low ``L-s`` bits are both pinned to
    ``wrap``.  Returns (best final window, cost).
    """
    steps, V = x.shape
    n_win = 1 << L
    n_state = 1 << (L - s)
    n_in = 1 << s
    low_mask = n_state - 1
    inf = np.inf

    for w in range(n_win):
        if wrap >= 0 and (w >> s) != wrap:
            cur[w] = inf
            continue
        d = 0.0
        for c in range(V):
            lv = np.float64(lut[w, c])
            d += lv * (lv - 2.0 * x[0, c])
        cur[w] = d

    for i in range(1, steps):
        # best predecessor for each overlap value u = low L-s bits of the
        # previous window; h runs outermost so the reads stay contiguous
        bi = back[i]
        for u in range(n_state):
            mins[u] = cur[u]
            bi[u] = 0
        for h in range(1, n_in):
            base = h << (L - s)
            for u in range(n_state):
                val = cur[base + u]
                if val < mins[u]:  # strict: lowest predecessor wins ties
                    mins[u] = val
                    bi[u] = h
        xi = x[i]
        if V == 2:
            x0 = 2.0 * xi[0]
            x1 = 2.0 * xi[1]
            for u in range(n_state):
                m = mins[u]
                for w in range(u << s, (u + 1) << s):
                    l0 = np.float64(lut[w, 0])
                    l1 = np.float64(lut[w, 1])
                    nxt[w] = m + (l0 * (l0 - x0) + l1 * (l1 - x1))
        else:
            for w in range(n_win):
                d = 0.0
                for c in range(V):
                    lv = np.float64(lut[w, c])
                    d += lv * (lv - 2.0 * xi[c])
                nxt[w] = mins[w >> s] + d
        cur, nxt = nxt, cur

    best = inf
    arg = 0
    for w in range(n_win):
        if wrap >= 0 and (w & low_mask) != wrap:
            continue
        if cur[w] < best:
            best = cur[w]
            arg = w
    return arg, best


@numba.njit(cache=True)
def _traceback(back, last, L, s, out):
    steps = out.shape[0]
    w = last
    out[steps - 1] = w
    for i in range(steps - 1, 0, -1):
        u = w >> s
        w = (back[i, u] << (L - s)) | u
        out[i - 1] = w


@numba.njit(cache=True, nogil=True)
def _encode_one(x, lut, L, s, back, cur, nxt, mins, tmp, out):
    steps = x.shape[0]
    n_state = 1 << (L - s)
    if n_state <= EXACT_WRAP_STATES:
        # few enough wrap states to solve tail-biting exactly: one pinned
        # sweep per state, lowest state wins ties
        best = np.inf
        for wrap in range(n_state):
            last, cost = _viterbi_pass(x, lut, L, s, wrap, back, cur, nxt, mins)
            if cost < best:
                best = cost
                _traceback(back, last, L, s, out)
        return
    h = steps // 2
    # pass 1: free sweep over the half-rotated sequence, so the wrap boundary
    # sits mid-path where the survivor is settled
    rolled = np.empty_like(x)
    for i in range(steps):
        rolled[i] = x[(i + h) % steps]
    last, _ = _viterbi_pass(rolled, lut, L, s, -1, back, cur, nxt, mins)
    _traceback(back, last, L, s, tmp)
    wrap = tmp[steps - 1 - h] & ((1 << (L - s)) - 1)
    # pass 2: exact Viterbi with the wrap state pinned
    last, _ = _viterbi_pass(x, lut, L, s, wrap, back, cur, nxt, mins)
    _traceback(back, last, L, s, out)


@numba.njit(cache=True, nogil=True)
def _encode_range(xs, lut, L, s, out, lo, hi):
    steps = xs.shape[1]
    back = np.zeros((steps, 1 << (L - s)), dtype=np.int32)
    cur = np.empty(1 << L)
    nxt = np.empty(1 << L)
    mins = np.empty(1 << (L - s))
    tmp = np.empty(steps, dtype=np.int64)
    for k in range(lo, hi):
        _encode_one(xs[k], lut, L, s, back, cur, nxt, mins, tmp, out[k])


def encode_windows(vectors: np.ndarray, cfg: TrellisConfig, lut: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Tail-biting Viterbi over a batch of length-``T`` vectors.

    Returns window indices, shape ``(n, T/V)``.  Each vector is encoded
    independently (survivor ties go to the lowest predecessor), so the result
    does not depend on batching or on ``threads``.
    """
    lut = np.ascontiguousarray(_check_lut(lut, cfg))
    xs = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64).reshape(-1, cfg.steps, cfg.V))
    n = xs.shape[0]
    out = np.empty((n, cfg.steps), dtype=np.int64)
    if not n:
        return out
    # float32 LUTs halve the memory traffic of the sweep; only used when exact
    lut32 = lut.astype(np.float32)
    if np.array_equal(lut32, lut):
        lut = lut32
    threads = min(n, threads or get_threads())
    if threads <= 1:
        _encode_range(xs, lut, cfg.L, cfg.s, out, 0, n)
        return out
    edges = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        jobs = [pool.submit(_encode_range, xs, lut, cfg.L, cfg.s, out, lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
        for j in jobs:
            j.result()
    return out


_THREADS = [None]


def set_threads(n: int | None) -> None:
    """Worker count for trellis encoding (``None``: all cores)."""
    _THREADS[0] = n


def get_threads() -> int:
    return _THREADS[0] or os.cpu_count() or 1


def tcq_encode(v: np.ndarray, cfg: TrellisConfig, lut: np.ndarray) -> TrellisPath:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != cfg.T:
        raise LengthMismatch(f"expected a length-{cfg.T} vector, got {v.size}")
    lut = _check_lut(lut, cfg)
    windows = encode_windows(v, cfg, lut)[0]
    recon = lut[windows].reshape(cfg.T)
    return TrellisPath(
        bits=windows_to_bits(windows, cfg),
        per_step_states=windows,
        reconstruction=recon,
        sq_error=float(np.sum((v - recon) ** 2)),
    )
