"""Gaussian-optimized codebooks.

NUQ uses a sorted 1D k-means LUT, VQ a 2D k-means LUT, and TCQ a small 2D
k-means table (``tlut``) expanded to ``2**L`` entries by :func:`quantlut_sym`.
All builders are deterministic in ``seed``; entries are rounded to float32 at
the end so the in-memory codebook equals its serialized form bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .quant.rtn import nearest
from .quant.trellis import TrellisConfig
from .tensor_store import CodebookFile, CodebookKind, Scheme, check_width, half_split

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 10**6
TLUT_SAMPLES = 1 << 20


@dataclass
class KMeansResult:
    centroids: np.ndarray
    counts: np.ndarray
    objective: float  # mean squared distance per sample
    history: list
    n_iter: int


def kmeans(samples: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once the relative objective decrease drops below ``tol``.  Empty
    clusters are re-seeded at the samples farthest from their centroids.
    The objective history is checked to be non-increasing.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1 or n < k:
        raise InvalidInput(f"need at least k={k} samples, got {n}")
    if d == 1:
        return _kmeans_1d(x[:, 0], k, rng, max_iter, tol)

    c = _kmeanspp(x, k, rng)
    history = []
    for it in range(max_iter):
        labels, dist2 = _assign(x, c)
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            c, labels, dist2 = _repair_empty(x, c, labels, dist2, counts)
            counts = np.bincount(labels, minlength=k)
        obj = float(dist2.mean())
        _check_monotone(history, obj)
        history.append(obj)
        for j in range(d):
            c[:, j] = np.bincount(labels, weights=x[:, j], minlength=k) / counts
        if len(history) > 1 and history[-2] - obj <= tol * history[-2]:
            break
    labels, dist2 = _assign(x, c)
    counts = np.bincount(labels, minlength=k)
    obj = float(dist2.mean())
    _check_monotone(history, obj)
    history.append(obj)
    return KMeansResult(c, counts, obj, history, it + 1)


def _assign(x: np.ndarray, c: np.ndarray):
    # brute force is faster for small k, a KD-tree for large k
    if c.shape[0] <= 128:
        labels = nearest(x, c)
    else:
        labels = cKDTree(c).query(x)[1]
    return labels, np.sum((x - c[labels]) ** 2, axis=1)


def _kmeans_1d(x: np.ndarray, k: int, rng, max_iter: int, tol: float) -> KMeansResult:
    # sorted samples + prefix sums: each Lloyd step costs O(k log n)
    xs = np.sort(x)
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
    n = xs.size
    c = np.sort(_kmeanspp(xs[:, None], k, rng)[:, 0])
    history = []

    def partition(c):
        bounds = np.searchsorted(xs, (c[:-1] + c[1:]) / 2, side="right")
        return np.concatenate([[0], bounds, [n]])

    def cost(c, edges):
        lo, hi = edges[:-1], edges[1:]
        cnt = hi - lo
        tot = s2[hi] - s2[lo] - 2 * c * (s1[hi] - s1[lo]) + cnt * c * c
        return float(max(tot.sum(), 0.0) / n), cnt

    for it in range(max_iter):
        edges = partition(c)
        obj, cnt = cost(c, edges)
        if np.any(cnt == 0):
            c = _repair_empty_1d(xs, c, edges, cnt)
            edges = partition(c)
            obj, cnt = cost(c, edges)
        _check_monotone(history, obj)
        history.append(obj)
        lo, hi = edges[:-1], edges[1:]
        nz = cnt > 0
        c = c.copy()
        c[nz] = (s1[hi] - s1[lo])[nz] / cnt[nz]
        c.sort()
        if len(history) > 1 and history[-2] - obj <= tol * history[-2]:
            break
    edges = partition(c)
    obj, cnt = cost(c, edges)
    _check_monotone(history, obj)
    history.append(obj)
    return KMeansResult(c[:, None], cnt, obj, history, it + 1)


def _check_monotone(history: list, obj: float) -> None:
    if history and obj > history[-1] * (1 + 1e-9) + 1e-15:
        raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # seeding on a subsample keeps the O(n k) cost bounded for large k
    n = x.shape[0]
    m = min(n, 32 * k + 4096)
    pool = x[rng.choice(n, size=m, replace=False)] if m < n else x
    centers = np.empty((k, x.shape[1]))
    centers[0] = pool[rng.integers(m)]
    d2 = np.sum((pool - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(m)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centers[j] = pool[idx]
        d2 = np.minimum(d2, np.sum((pool - centers[j]) ** 2, axis=1))
    return centers


def _repair_empty(x, c, labels, dist2, counts):
    c = c.copy()
    order = np.argsort(-dist2, kind="stable")
    taken = 0
    for j in np.flatnonzero(counts == 0):
        c[j] = x[order[taken]]
        taken += 1
    labels, dist2 = _assign(x, c)
    return c, labels, dist2


def _repair_empty_1d(xs, c, edges, cnt):
    c = c.copy()
    lo, hi = edges[:-1], edges[1:]
    owner = np.repeat(np.arange(c.size), hi - lo)
    far = np.argsort(-np.abs(xs - c[owner]), kind="stable")
    used = set(c.tolist())
    pick = iter(far)
    for j in np.flatnonzero(cnt == 0):
        for i in pick:
            if xs[i] not in used:
                c[j] = xs[i]
                used.add(xs[i])
                break
    return np.sort(c)


# --------------------------------------------------------------- builders ---


def build_nuq_codebook(bits: int, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, max_iter: int = 1000, tol: float = 1e-9) -> CodebookFile:
    if not 1 <= bits <= 8:
        raise InvalidInput(f"NUQ bits must be in 1..8, got {bits}")
    k = 1 << bits
    _check_samples(n_samples, k)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_samples)
    res = kmeans(x, k, rng, max_iter=max_iter, tol=tol)
    entries = np.sort(res.centroids[:, 0]).astype(np.float32)
    cb = CodebookFile(CodebookKind.LUT1D, 4 * bits, entries, seed, n_samples)
    cb.meta.update(objective=res.objective, n_iter=res.n_iter)
    return cb


def build_vq_codebook(bits_x4: int, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> CodebookFile:
    if bits_x4 % 2 or not 2 <= bits_x4 <= 24:
        raise InvalidInput(f"VQ bitwidth must be a multiple of 0.5 in 0.5..6, got {bits_x4 / 4}")
    k = 1 << (bits_x4 // 2)
    _check_samples(n_samples, k)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, 2))
    res = kmeans(x, k, rng, max_iter=max_iter, tol=tol)
    order = np.lexsort((res.centroids[:, 1], res.centroids[:, 0]))
    cb = CodebookFile(CodebookKind.LUT2D, bits_x4, res.centroids[order].astype(np.float32), seed, n_samples)
    cb.meta.update(objective=res.objective, n_iter=res.n_iter, counts=res.counts[order])
    return cb


def quantlut_sym(tlut: np.ndarray, L: int, tlut_bits: int) -> np.ndarray:
    """Hybrid codebook expansion of a ``(2**tlut_bits, 2)`` table to ``2**L`` rows.

    Index ``i`` maps through ``p = (i + 1) * i``: bit 15 of ``p`` flips the sign
    of the first coordinate, bits ``16-tlut_bits-1 ..`` select the tlut row.
    """
    tlut = np.asarray(tlut)
    if tlut.shape != (1 << tlut_bits, 2):
        raise InvalidInput(f"tlut shape {tlut.shape} does not match tlut_bits={tlut_bits}")
    i = np.arange(1 << L, dtype=np.int64)
    p = (i + 1) * i
    sign = 1 - ((p >> 15) & 1) * 2
    idx = (p >> (16 - tlut_bits - 1)) & ((1 << tlut_bits) - 1)
    lut = tlut[idx].copy()
    lut[:, 0] = lut[:, 0] * sign
    return lut


def trellis_config(bits_x4: int) -> TrellisConfig:
    """Standard TCQ configuration for a whole-TCQ bitwidth (V=2, L=16, T=256)."""
    check_width(Scheme.TCQ, bits_x4)
    tlut_bits = {18: 10, 20: 11}.get(bits_x4, 9)
    return TrellisConfig(L=16, V=2, s=bits_x4 // 2, T=256, tlut_bits=tlut_bits)


def codebook_width(scheme: Scheme, bits_x4: int) -> int:
    """Bitwidth (x4) whose codebook a scheme/bitwidth pair decodes with."""
    check_width(scheme, bits_x4)
    if scheme == Scheme.HALF_TCQ:
        return half_split(bits_x4)[1]
    return bits_x4


def build_trellis_lut(cfg: TrellisConfig, n_samples: int = TLUT_SAMPLES, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, bits_x4: int | None = None) -> CodebookFile:
    """Cluster 2D Gaussians into ``2**tlut_bits`` centroids and expand them.

    The tlut is rescaled after clustering so that the expanded LUT has unit
    mean second moment per coordinate under uniform window indices.
    """
    if cfg.V != 2:
        raise InvalidInput("the hybrid trellis codebook is two-dimensional (V=2)")
    k = 1 << cfg.tlut_bits
    _check_samples(n_samples, k)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, 2))
    res = kmeans(x, k, rng, max_iter=max_iter, tol=tol)
    tlut = res.centroids
    lut = quantlut_sym(tlut, cfg.L, cfg.tlut_bits)
    tlut = (tlut / np.sqrt(np.mean(lut * lut))).astype(np.float32)
    lut = quantlut_sym(tlut, cfg.L, cfg.tlut_bits)
    if bits_x4 is None:
        bits_x4 = 2 * cfg.s // cfg.V if (2 * cfg.s) % cfg.V == 0 else 0
    cb = CodebookFile(CodebookKind.TRELLIS, bits_x4, lut, seed, n_samples, tlut=tlut, L=cfg.L, tlut_bits=cfg.tlut_bits)
    cb.meta.update(objective=res.objective, n_iter=res.n_iter)
    return cb


def build_codebook(scheme: "Scheme | str", bits_x4: int, n_samples: int | None = None, seed: int = 0) -> CodebookFile:
    """Build the codebook that ``quantize_matrix`` needs for ``scheme``/``bits_x4``."""
    scheme = Scheme.parse(scheme)
    width = codebook_width(scheme, bits_x4)
    if scheme == Scheme.NUQ:
        return build_nuq_codebook(width // 4, n_samples or DEFAULT_SAMPLES, seed)
    if scheme == Scheme.VQ2:
        return build_vq_codebook(width, n_samples or DEFAULT_SAMPLES, seed)
    return build_trellis_lut(trellis_config(width), n_samples or TLUT_SAMPLES, seed, bits_x4=width)


def _check_samples(n_samples: int, k: int) -> None:
    if n_samples < 64 * k:
        raise InvalidInput(f"need at least {64 * k} samples for {k} clusters, got {n_samples}")
