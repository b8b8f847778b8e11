"""LSB-first bit packing of variable-width codes.

Code ``i`` occupies ``widths[i]`` bits starting right after code ``i-1``; its
least significant bit comes first, and bytes fill from their least
significant bit.  The final byte is zero-padded.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInput, LengthMismatch


def _widths(widths, n: int) -> np.ndarray:
    w = np.asarray(widths, dtype=np.int64)
    if w.ndim == 0:
        w = np.full(n, int(w), dtype=np.int64)
    if w.shape != (n,):
        raise InvalidInput(f"got {w.size} widths for {n} codes")
    if np.any(w < 0) or np.any(w > 63):
        raise InvalidInput("code widths must be in 0..63")
    return w


def pack_bits(codes, widths) -> bytes:
    codes = np.asarray(codes, dtype=np.uint64).ravel()
    w = _widths(widths, codes.size)
    if codes.size == 0:
        return b""
    if np.any(codes >> w.astype(np.uint64) != 0):
        raise InvalidInput("a code does not fit in its width")
    if np.all(w == w[0]):
        shifts = np.arange(w[0], dtype=np.uint64)
        bits = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel()
    else:
        offsets = np.cumsum(w) - w
        rep = np.repeat(codes, w)
        pos = (np.arange(rep.size) - np.repeat(offsets, w)).astype(np.uint64)
        bits = ((rep >> pos) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_bits(data: bytes, widths, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_bits`.  ``count`` is required for a scalar width."""
    if np.ndim(widths) == 0:
        if count is None:
            raise InvalidInput("count is required when widths is a scalar")
        w = _widths(widths, count)
    else:
        w = _widths(widths, len(widths))
    total = int(w.sum())
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size != -(-total // 8):
        raise LengthMismatch(f"{raw.size} bytes cannot hold exactly {total} bits")
    bits = np.unpackbits(raw, bitorder="little")[:total].astype(np.uint64)
    if w.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if np.all(w == w[0]):
        if w[0] == 0:
            return np.zeros(w.size, dtype=np.uint64)
        shifts = np.arange(w[0], dtype=np.uint64)
        return (bits.reshape(-1, w[0]) << shifts).sum(axis=1, dtype=np.uint64)
    offsets = np.cumsum(w) - w
    pos = (np.arange(total) - np.repeat(offsets, w)).astype(np.uint64)
    owner = np.repeat(np.arange(w.size), w)
    out = np.zeros(w.size, dtype=np.uint64)
    np.add.at(out, owner, bits << pos)
    return out
