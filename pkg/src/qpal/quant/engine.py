"""Matrix-level quantize / dequantize for every scheme.

Matrices are ``(d_in, d_out)``; quantization units run along rows:

* NUQ: one scalar per code, codes stored column-major.
* VQ: rows ``(2k, 2k+1)`` of one column form a pair, pairs stored column-major.
* TCQ: each trellis vector is a tile of 16 rows x ``T/16`` columns, flattened
  column by column (so the ``V=2`` sub-vectors are row pairs).  Tiles are
  stored column-block major; each contributes ``T/V`` chunks of ``s`` bits.
* Half-TCQ: TCQ tiles with the leading ``d_in/2`` rows at the lower width and
  the trailing rows at the higher one, as two independently padded streams.

A coder produces a "code grid" whose leading axis is the row-unit index, so
block LDLQ can fill it block by block and end up with exactly the codes the
data-free path would produce for the same targets.
"""

from __future__ import annotations

import numpy as np

from ..codebooks import codebook_width, trellis_config
from ..incoherence import degaussianize
from ..errors import ConfigMismatch, InvalidInput, PartitionMismatch
from ..tensor_store import CodebookFile, CodebookKind, QuantizedTensor, Scheme, check_width, half_split, stream_lengths
from .bitpack import pack_bits, unpack_bits
from .rtn import nearest
from .trellis import TrellisConfig, chunks_to_windows, encode_windows

TILE_ROWS = 16

# rows per LDLQ block: scalar, pair, trellis tile height
BLOCK_ROWS = {Scheme.NUQ: 1, Scheme.VQ2: 2, Scheme.TCQ: TILE_ROWS, Scheme.HALF_TCQ: TILE_ROWS}


class _ScalarCoder:
    unit_rows = 1

    def __init__(self, bits_x4, lut, rows, cols):
        self.width = bits_x4 // 4
        self.lut = np.asarray(lut, dtype=np.float64).ravel()

    def encode(self, z, row0=0):
        codes = nearest(z.reshape(-1, 1), self.lut).reshape(z.shape)
        return codes, self.lut[codes]

    def decode(self, codes):
        return self.lut[codes]

    def pack(self, codes):
        return pack_bits(codes.T.ravel(), self.width)

    def unpack(self, data, rows, cols):
        return unpack_bits(data, self.width, rows * cols).astype(np.int64).reshape(cols, rows).T


class _PairCoder:
    unit_rows = 2

    def __init__(self, bits_x4, lut, rows, cols):
        if rows % 2:
            raise PartitionMismatch(f"VQ pairs rows, {rows} rows is odd")
        self.width = bits_x4 // 2
        self.lut = np.asarray(lut, dtype=np.float64)

    def encode(self, z, row0=0):
        r, c = z.shape
        pairs = z.reshape(r // 2, 2, c).transpose(0, 2, 1)  # (pair, col, 2)
        codes = nearest(pairs.reshape(-1, 2), self.lut).reshape(r // 2, c)
        return codes, self.decode(codes)

    def decode(self, codes):
        p, c = codes.shape
        return self.lut[codes].transpose(0, 2, 1).reshape(2 * p, c)

    def pack(self, codes):
        return pack_bits(codes.T.ravel(), self.width)

    def unpack(self, data, rows, cols):
        n = (rows // 2) * cols
        return unpack_bits(data, self.width, n).astype(np.int64).reshape(cols, rows // 2).T


class _TrellisCoder:
    unit_rows = TILE_ROWS

    def __init__(self, cfgs, lut, rows, cols, split=None):
        # cfgs: one config, or (low, high) for half-TCQ with the row split
        self.cfgs = cfgs
        self.split = split
        self.lut = np.asarray(lut, dtype=np.float64)
        cfg = cfgs[0]
        if cfg.T % TILE_ROWS:
            raise InvalidInput(f"trellis length {cfg.T} is not a multiple of {TILE_ROWS}")
        self.tile_cols = cfg.T // TILE_ROWS
        unit = 2 * TILE_ROWS if split is not None else TILE_ROWS
        if rows % unit or cols % self.tile_cols:
            raise PartitionMismatch(f"{rows}x{cols} does not tile into {TILE_ROWS}x{self.tile_cols} trellis blocks" + (" per half" if split is not None else ""))
        self.threads = None

    def _cfg(self, row0):
        if self.split is None or row0 < self.split:
            return self.cfgs[0]
        return self.cfgs[1]

    def _tiles(self, z):
        r, c = z.shape
        t = z.reshape(r // TILE_ROWS, TILE_ROWS, c // self.tile_cols, self.tile_cols)
        return t.transpose(0, 2, 3, 1).reshape(r // TILE_ROWS, c // self.tile_cols, -1)

    def _untile(self, t):
        rb, cb, _ = t.shape
        t = t.reshape(rb, cb, self.tile_cols, TILE_ROWS).transpose(0, 3, 1, 2)
        return t.reshape(rb * TILE_ROWS, cb * self.tile_cols)

    def encode(self, z, row0=0):
        if self.split is not None and row0 < self.split < row0 + z.shape[0]:
            top = self.split - row0
            c1, r1 = self.encode(z[:top], row0)
            c2, r2 = self.encode(z[top:], self.split)
            return np.concatenate([c1, c2]), np.concatenate([r1, r2])
        cfg = self._cfg(row0)
        tiles = self._tiles(z)
        windows = encode_windows(tiles.reshape(-1, cfg.T), cfg, self.lut, self.threads)
        chunks = (windows >> (cfg.L - cfg.s)).reshape(tiles.shape[0], tiles.shape[1], cfg.steps)
        return chunks, self._untile(self.lut[windows].reshape(tiles.shape))

    def decode(self, codes):
        out = []
        for rb in range(codes.shape[0]):
            cfg = self._cfg(rb * TILE_ROWS)
            w = chunks_to_windows(codes[rb], cfg.L, cfg.s)
            out.append(self.lut[w].reshape(codes.shape[1], -1))
        return self._untile(np.stack(out))

    def _streams(self, codes):
        if self.split is None:
            return [(codes, self.cfgs[0])]
        k = self.split // TILE_ROWS
        return [(codes[:k], self.cfgs[0]), (codes[k:], self.cfgs[1])]

    def pack(self, codes):
        # the trailing half is padded independently, hence one pack per stream
        return b"".join(pack_bits(part.transpose(1, 0, 2).ravel(), cfg.s) for part, cfg in self._streams(codes))

    def unpack(self, data, rows, cols, lengths):
        steps = self.cfgs[0].steps
        cb = cols // self.tile_cols
        rbs = [rows // TILE_ROWS] if self.split is None else [self.split // TILE_ROWS, (rows - self.split) // TILE_ROWS]
        parts, pos = [], 0
        for n_rb, cfg, n_bytes in zip(rbs, self.cfgs, lengths):
            flat = unpack_bits(data[pos : pos + n_bytes], cfg.s, n_rb * cb * steps)
            parts.append(flat.astype(np.int64).reshape(cb, n_rb, steps).transpose(1, 0, 2))
            pos += n_bytes
        return np.concatenate(parts)


def check_codebook(scheme: Scheme, bits_x4: int, codebook: CodebookFile) -> None:
    width = codebook_width(scheme, bits_x4)
    if scheme == Scheme.NUQ:
        ok = codebook.kind == CodebookKind.LUT1D and codebook.entries.shape == (1 << (width // 4),)
    elif scheme == Scheme.VQ2:
        ok = codebook.kind == CodebookKind.LUT2D and codebook.entries.shape == (1 << (width // 2), 2)
    else:
        cfg = trellis_config(width)
        ok = codebook.kind == CodebookKind.TRELLIS and codebook.L == cfg.L and codebook.tlut_bits == cfg.tlut_bits
    if not ok:
        raise ConfigMismatch(
            f"{codebook.kind.name} codebook (bits {codebook.bits_x4 / 4:g}, tlut_bits {codebook.tlut_bits}) "
            f"cannot code {scheme.label} at {bits_x4 / 4:g} bits"
        )


def make_coder(scheme, bits_x4: int, codebook: CodebookFile, rows: int, cols: int, threads: int | None = None):
    scheme = Scheme.parse(scheme)
    check_width(scheme, bits_x4)
    check_codebook(scheme, bits_x4, codebook)
    if scheme == Scheme.NUQ:
        return _ScalarCoder(bits_x4, codebook.entries, rows, cols)
    if scheme == Scheme.VQ2:
        return _PairCoder(bits_x4, codebook.entries, rows, cols)
    tl = codebook.tlut_bits
    if scheme == Scheme.TCQ:
        coder = _TrellisCoder([trellis_config(bits_x4)], codebook.entries, rows, cols)
    else:
        lo, hi = half_split(bits_x4)
        cfgs = [TrellisConfig(L=16, V=2, s=w // 2, T=256, tlut_bits=tl) for w in (lo, hi)]
        coder = _TrellisCoder(cfgs, codebook.entries, rows, cols, split=rows // 2)
    coder.threads = threads
    return coder


def _standardized(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInput(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix contains non-finite values")
    return m


def encode_matrix(m, scheme, bits_x4: int, codebook: CodebookFile, threads: int | None = None):
    """Data-free quantization: returns ``(code grid, reconstruction)``."""
    z = _standardized(m)
    coder = make_coder(scheme, bits_x4, codebook, *z.shape, threads=threads)
    return coder.encode(z, 0)


def pack_codes(scheme, bits_x4: int, codebook: CodebookFile, rows: int, cols: int, codes) -> bytes:
    return make_coder(scheme, bits_x4, codebook, rows, cols).pack(codes)


def quantize_matrix(m, scheme, bits_x4: int, codebook: CodebookFile, seed: int | None = None, scales=None, threads: int | None = None) -> QuantizedTensor:
    """Quantize a column-standardized matrix (run ``gaussianize`` first).

    ``seed`` and ``scales`` describe the incoherence transform that produced
    ``m``; they are recorded in the container so ``dequantize`` can undo it.
    """
    scheme = Scheme.parse(scheme)
    z = _standardized(m)
    rows, cols = z.shape
    coder = make_coder(scheme, bits_x4, codebook, rows, cols, threads=threads)
    codes, _ = coder.encode(z, 0)
    return _container(scheme, bits_x4, codebook, rows, cols, coder.pack(codes), seed, scales)


def _container(scheme, bits_x4, codebook, rows, cols, packed, seed, scales) -> QuantizedTensor:
    scales = np.ones(cols, np.float32) if scales is None else np.asarray(scales, np.float32)
    q = QuantizedTensor(scheme, bits_x4, rows, cols, codebook.codebook_id, scales, packed, seed)
    q.validate()
    return q


def decode_codes(q: QuantizedTensor, codebook: CodebookFile) -> np.ndarray:
    """Standardized-domain reconstruction of ``q`` (no scaling, no rotation)."""
    if q.codebook_id != codebook.codebook_id:
        raise ConfigMismatch(f"tensor was coded with codebook {q.codebook_id}, got {codebook.codebook_id}")
    q.validate()
    coder = make_coder(q.scheme, q.bits_x4, codebook, q.rows, q.cols)
    if isinstance(coder, _TrellisCoder):
        codes = coder.unpack(q.packed, q.rows, q.cols, stream_lengths(q.scheme, q.bits_x4, q.rows, q.cols))
    else:
        codes = coder.unpack(q.packed, q.rows, q.cols)
    return coder.decode(codes)


def dequantize(q: QuantizedTensor, codebook: CodebookFile, state=None) -> np.ndarray:
    """Decode ``q``; with an incoherence ``state``, also undo scaling and rotation.

    Without a state the per-channel scales stored in ``q`` are still applied.
    """
    z = decode_codes(q, codebook)
    if state is not None:
        return degaussianize(z, state)
    return (z * q.scales.astype(np.float64)[None, :]).astype(np.float32)
