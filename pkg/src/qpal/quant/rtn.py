"""Round-to-nearest operators for scalar (NUQ) and 2D vector (VQ) LUTs."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..errors import InvalidInput


@dataclass
class RtnResult:
    code: int
    reconstruction: np.ndarray
    sq_error: float

    def code_bits(self, width: int) -> str:
        return format(self.code, f"0{width}b")


@numba.njit(cache=True, nogil=True)
def _nearest(x, c, out):
    n, d = x.shape
    k = c.shape[0]
    for a in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            dd = 0.0
            for t in range(d):
                diff = x[a, t] - c[j, t]
                dd += diff * diff
            if dd < best:  # strict: ties keep the lowest index
                best = dd
                arg = j
        out[a] = arg


def nearest(x: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Index of the nearest LUT row for every row of ``x`` (lowest index on ties)."""
    lut = np.asarray(lut, dtype=np.float64)
    if lut.ndim == 1:
        lut = lut[:, None]
    x = np.asarray(x, dtype=np.float64).reshape(-1, lut.shape[1])
    if lut.shape[0] == 0:
        raise InvalidInput("empty LUT")
    out = np.empty(x.shape[0], dtype=np.int64)
    _nearest(np.ascontiguousarray(x), np.ascontiguousarray(lut), out)
    return out


def nuq_rtn(v: float, lut: np.ndarray) -> RtnResult:
    lut = np.asarray(lut, dtype=np.float64).ravel()
    code = int(nearest(np.array([[v]]), lut)[0])
    rec = lut[code]
    return RtnResult(code, np.array(rec), float((v - rec) ** 2))


def vq_rtn(v: np.ndarray, lut: np.ndarray) -> RtnResult:
    v = np.asarray(v, dtype=np.float64).reshape(2)
    lut = np.asarray(lut, dtype=np.float64)
    if lut.ndim != 2 or lut.shape[1] != 2:
        raise InvalidInput(f"VQ LUT must be (n, 2), got {lut.shape}")
    code = int(nearest(v[None], lut)[0])
    rec = lut[code]
    return RtnResult(code, rec.copy(), float(np.sum((v - rec) ** 2)))
