"""Block LDLQ: sequential row-block quantization with Hessian-weighted error feedback.

For a proxy Hessian ``H`` over the input rows the factorization is taken as
``H = L^T D L`` with ``L`` unit lower block-triangular and ``D`` block diagonal.
Quantizing blocks first-to-last with targets

    target_k = W_k - sum_{j<k} L[k, j] (What_j - W_j)

makes the weighted error ``tr(E^T H E)`` equal to the ``D``-weighted rounding
residual, which is what the feedback is meant to minimize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimMismatch, InvalidInput, NonPsdHessian
from ..tensor_store import CodebookFile, QuantizedTensor, Scheme
from .engine import BLOCK_ROWS, _container, _standardized, make_coder

PSD_TOL = 1e-8
ZERO_PIVOT = 1e-10


@dataclass
class HessianFactor:
    dim: int
    L_unit_lower: np.ndarray
    D: np.ndarray  # block diagonal, stored dense
    block: int = 1

    def reconstruct(self) -> np.ndarray:
        return self.L_unit_lower.T @ self.D @ self.L_unit_lower

    @property
    def d_blocks(self) -> list[np.ndarray]:
        b = self.block
        return [self.D[i : i + b, i : i + b] for i in range(0, self.dim, b)]


def factor_hessian(h, block: int = 1) -> HessianFactor:
    """Block ``L^T D L`` factorization of a symmetric PSD matrix.

    Runs a Schur-complement sweep from the last block upward; singular pivot
    blocks use a pseudo-inverse, so semidefinite inputs are accepted.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise DimMismatch(f"Hessian must be square, got {h.shape}")
    n = h.shape[0]
    if block < 1 or n % block:
        raise DimMismatch(f"Hessian dim {n} is not a multiple of block size {block}")
    if not np.all(np.isfinite(h)):
        raise InvalidInput("Hessian contains non-finite values")
    scale = max(1.0, float(np.abs(h).max(initial=0.0)))
    if not np.allclose(h, h.T, rtol=1e-8, atol=1e-10 * scale):
        raise NonPsdHessian("Hessian is not symmetric")
    s = 0.5 * (h + h.T)
    u = np.eye(n)
    d = np.zeros((n, n))
    for k in range(n - block, -1, -block):
        blk = slice(k, k + block)
        dk = s[blk, blk].copy()
        dk = 0.5 * (dk + dk.T)
        w, v = np.linalg.eigh(dk)
        if w.min() < -PSD_TOL * scale:
            raise NonPsdHessian(f"pivot block at row {k} has eigenvalue {w.min():.3e}")
        d[blk, blk] = dk
        if k == 0:
            break
        # pivots at round-off level count as zero; inverting them would
        # amplify noise into huge feedback weights
        keep = w > ZERO_PIVOT * scale
        col = s[:k, blk]
        uk = col @ (v[:, keep] / w[keep]) @ v[:, keep].T
        u[:k, blk] = uk
        s[:k, :k] -= uk @ col.T
    return HessianFactor(n, u.T.copy(), d, block)


def block_ldlq(
    m,
    hessian,
    scheme,
    bits_x4: int,
    codebook: CodebookFile,
    seed: int | None = None,
    scales=None,
    threads: int | None = None,
) -> QuantizedTensor:
    """Data-aware quantization of a column-standardized matrix.

    ``hessian`` is a :class:`HessianFactor` or a raw PSD matrix (factored here
    with the scheme's block size).
    """
    scheme = Scheme.parse(scheme)
    w = _standardized(m)
    rows, cols = w.shape
    block = BLOCK_ROWS[scheme]
    if not isinstance(hessian, HessianFactor):
        hessian = factor_hessian(hessian, block)
    if hessian.dim != rows:
        raise DimMismatch(f"Hessian dim {hessian.dim} != matrix rows {rows}")
    if hessian.block != block:
        hessian = factor_hessian(hessian.reconstruct(), block)
    coder = make_coder(scheme, bits_x4, codebook, rows, cols, threads=threads)
    lower = hessian.L_unit_lower
    err = np.zeros_like(w)
    grids = []
    for k in range(0, rows, block):
        blk = slice(k, k + block)
        target = w[blk] - lower[blk, :k] @ err[:k]
        codes, rec = coder.encode(target, k)
        err[blk] = rec - w[blk]
        grids.append(codes)
    codes = np.concatenate(grids)
    return _container(scheme, bits_x4, codebook, rows, cols, coder.pack(codes), seed, scales)
