"""Data model and binary container formats.

Three little-endian, versioned containers:

* ``QPTF`` dense float32 matrix (row-major),
* ``QPQW`` quantized tensor (packed codes + per-channel scales + rotation seed),
* ``QPCB`` codebook (1D LUT, 2D LUT, or trellis tlut + expanded LUT).

Pad bits at the end of a packed stream are always zero and ignored on read.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CorruptContainer,
    DimensionOverflow,
    InvalidInput,
    TruncatedPayload,
    UnsupportedVersion,
    UnsupportedWidth,
)

VERSION = 1
MAX_ELEMENTS = 1 << 40

DENSE_MAGIC = b"QPTF"
QUANT_MAGIC = b"QPQW"
CODEBOOK_MAGIC = b"QPCB"


class Scheme(enum.IntEnum):
    NUQ = 0
    VQ2 = 1
    TCQ = 2
    HALF_TCQ = 3

    @classmethod
    def parse(cls, name: "str | Scheme") -> "Scheme":
        if isinstance(name, Scheme):
            return name
        key = name.strip().upper().replace("-", "_")
        aliases = {"VQ": "VQ2", "HALF": "HALF_TCQ", "HALFTCQ": "HALF_TCQ"}
        try:
            return cls[aliases.get(key, key)]
        except KeyError:
            raise InvalidInput(f"unknown scheme {name!r}; expected nuq, vq, tcq or half-tcq") from None

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-").replace("vq2", "vq")


# Supported widths, in quarter bits.
SUPPORTED_BITS_X4 = {
    Scheme.NUQ: frozenset(range(8, 33, 4)),  # 2..8
    Scheme.VQ2: frozenset(range(6, 25, 2)),  # 1.5..6 step 0.5
    Scheme.TCQ: frozenset(range(6, 21, 2)),  # 1.5..5 step 0.5
    Scheme.HALF_TCQ: frozenset(range(7, 20, 2)),  # 1.75..4.75 step 0.5
}


def bits_to_x4(bits: float) -> int:
    x4 = bits * 4
    if abs(x4 - round(x4)) > 1e-9:
        raise UnsupportedWidth(f"{bits} is not a multiple of 0.25 bits")
    return int(round(x4))


def check_width(scheme: Scheme, bits_x4: int) -> None:
    if bits_x4 not in SUPPORTED_BITS_X4[scheme]:
        allowed = ", ".join(f"{b / 4:g}" for b in sorted(SUPPORTED_BITS_X4[scheme]))
        raise UnsupportedWidth(f"{scheme.label} does not support {bits_x4 / 4:g} bits (allowed: {allowed})")


def half_split(bits_x4: int) -> tuple[int, int]:
    """Half-TCQ widths (x4) of the leading and trailing row halves."""
    return bits_x4 - 1, bits_x4 + 1


def stream_lengths(scheme: Scheme, bits_x4: int, rows: int, cols: int) -> list[int]:
    """Byte length of each independently padded code stream."""
    if scheme == Scheme.HALF_TCQ:
        half = (rows // 2) * cols
        lo, hi = half_split(bits_x4)
        return [math.ceil(half * lo / 32), math.ceil((rows * cols - half) * hi / 32)]
    return [math.ceil(rows * cols * bits_x4 / 32)]


# ---------------------------------------------------------------- dense ---


def save_dense(path: "str | os.PathLike", m: np.ndarray) -> None:
    m = np.asarray(m)
    if m.ndim != 2 or m.dtype != np.float32:
        raise InvalidInput(f"dense matrices are 2-D float32, got {m.dtype} with shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("dense matrix contains non-finite values")
    rows, cols = m.shape
    header = struct.pack("<4sHHQQ", DENSE_MAGIC, VERSION, 0, rows, cols)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_dense(path: "str | os.PathLike") -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, DENSE_MAGIC)
    _flags, rows, cols = r.unpack("<HQQ")
    _check_dims(rows, cols)
    data = r.array("<f4", rows * cols)
    r.finish()
    return data.astype(np.float32).reshape(rows, cols)


# ------------------------------------------------------------ quantized ---


@dataclass
class QuantizedTensor:
    scheme: Scheme
    bits_x4: int
    rows: int
    cols: int
    codebook_id: str
    scales: np.ndarray
    packed: bytes
    rotation_seed: int | None = None

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.packed = bytes(self.packed)

    @property
    def bits(self) -> float:
        return self.bits_x4 / 4

    def validate(self) -> None:
        check_width(self.scheme, self.bits_x4)
        _check_dims(self.rows, self.cols)
        if self.scheme == Scheme.HALF_TCQ and self.rows % 2:
            raise CorruptContainer("half-TCQ needs an even row count")
        if self.scales.shape != (self.cols,):
            raise CorruptContainer(f"expected {self.cols} scales, got {self.scales.shape}")
        if not (np.all(np.isfinite(self.scales)) and np.all(self.scales > 0)):
            raise CorruptContainer("scales must be finite and positive")
        if self.rotation_seed is not None and not 0 <= self.rotation_seed < 1 << 64:
            raise InvalidInput("rotation seed must fit in 64 unsigned bits")
        expected = sum(stream_lengths(self.scheme, self.bits_x4, self.rows, self.cols))
        if len(self.packed) != expected:
            raise CorruptContainer(f"packed payload is {len(self.packed)} bytes, expected {expected}")

    def streams(self) -> list[bytes]:
        out, pos = [], 0
        for n in stream_lengths(self.scheme, self.bits_x4, self.rows, self.cols):
            out.append(self.packed[pos : pos + n])
            pos += n
        return out

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            (self.scheme, self.bits_x4, self.rows, self.cols, self.codebook_id, self.rotation_seed, self.packed)
            == (other.scheme, other.bits_x4, other.rows, other.cols, other.codebook_id, other.rotation_seed, other.packed)
            and self.scales.tobytes() == other.scales.tobytes()
        )


def write_quantized(path: "str | os.PathLike", q: QuantizedTensor) -> None:
    q.validate()
    cid = q.codebook_id.encode()
    parts = [
        struct.pack(
            "<4sHBBQQB7xQH",
            QUANT_MAGIC,
            VERSION,
            int(q.scheme),
            q.bits_x4,
            q.rows,
            q.cols,
            q.rotation_seed is not None,
            q.rotation_seed or 0,
            len(cid),
        ),
        cid,
        q.scales.astype("<f4").tobytes(),
        struct.pack("<Q", len(q.packed)),
        q.packed,
    ]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_quantized(path: "str | os.PathLike") -> QuantizedTensor:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, QUANT_MAGIC)
    scheme, bits_x4, rows, cols, has_seed, seed, id_len = r.unpack("<BBQQB7xQH")
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise CorruptContainer(f"unknown scheme tag {scheme}") from None
    check_width(scheme, bits_x4)
    _check_dims(rows, cols)
    cid = r.take(id_len).decode()
    scales = r.array("<f4", cols).astype(np.float32)
    (n_packed,) = r.unpack("<Q")
    expected = sum(stream_lengths(scheme, bits_x4, rows, cols))
    if n_packed != expected:
        raise CorruptContainer(f"header declares {n_packed} packed bytes, layout requires {expected}")
    packed = r.take(n_packed)
    r.finish()
    q = QuantizedTensor(scheme, bits_x4, rows, cols, cid, scales, packed, seed if has_seed else None)
    q.validate()
    return q


# ------------------------------------------------------------- codebook ---


class CodebookKind(enum.IntEnum):
    LUT1D = 0
    LUT2D = 1
    TRELLIS = 2


@dataclass
class CodebookFile:
    """A built codebook.

    ``entries`` is the decode table: ``(2**b,)`` for LUT1D, ``(2**(2b), 2)`` for
    LUT2D, ``(2**L, 2)`` for TRELLIS (with the clustered ``tlut`` kept alongside).
    """

    kind: CodebookKind
    bits_x4: int
    entries: np.ndarray
    build_seed: int
    sample_count: int
    tlut: np.ndarray | None = None
    L: int = 0
    tlut_bits: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.kind = CodebookKind(self.kind)
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.tlut is not None:
            self.tlut = np.asarray(self.tlut, dtype=np.float32)

    @property
    def codebook_id(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<BBBB", self.kind, self.bits_x4, self.L, self.tlut_bits))
        h.update(self.entries.astype("<f4").tobytes())
        if self.tlut is not None:
            h.update(self.tlut.astype("<f4").tobytes())
        return h.hexdigest()[:16]

    def expected_shape(self) -> tuple:
        if self.kind == CodebookKind.LUT1D:
            return (1 << (self.bits_x4 // 4),)
        if self.kind == CodebookKind.LUT2D:
            return (1 << (self.bits_x4 // 2), 2)
        return (1 << self.L, 2)

    def validate(self) -> None:
        if self.kind == CodebookKind.LUT1D and self.bits_x4 % 4:
            raise CorruptContainer("1D LUT needs an integer bitwidth")
        if self.kind == CodebookKind.LUT2D and self.bits_x4 % 2:
            raise CorruptContainer("2D LUT needs a half-integer bitwidth")
        if self.entries.shape != self.expected_shape():
            raise CorruptContainer(f"entries shape {self.entries.shape} != {self.expected_shape()}")
        if not np.all(np.isfinite(self.entries)):
            raise CorruptContainer("codebook entries must be finite")
        if self.kind == CodebookKind.LUT1D and np.any(np.diff(self.entries) <= 0):
            raise CorruptContainer("1D LUT entries must be strictly increasing")
        if self.kind == CodebookKind.TRELLIS:
            if self.tlut is None or self.tlut.shape != (1 << self.tlut_bits, 2):
                raise CorruptContainer("trellis codebook needs a (2**tlut_bits, 2) tlut")


def write_codebook(path: "str | os.PathLike", cb: CodebookFile) -> None:
    cb.validate()
    entries = cb.entries.reshape(cb.entries.shape[0], -1)
    tlut = cb.tlut if cb.tlut is not None else np.zeros((0, 2), np.float32)
    header = struct.pack(
        "<4sHBBBB2xQQQQQ",
        CODEBOOK_MAGIC,
        VERSION,
        int(cb.kind),
        cb.bits_x4,
        cb.L,
        cb.tlut_bits,
        cb.build_seed,
        cb.sample_count,
        entries.shape[0],
        entries.shape[1],
        tlut.shape[0],
    )
    with open(path, "wb") as f:
        f.write(header + entries.astype("<f4").tobytes() + tlut.astype("<f4").tobytes())


def read_codebook(path: "str | os.PathLike") -> CodebookFile:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, CODEBOOK_MAGIC)
    kind, bits_x4, L, tlut_bits, seed, n_samples, n, dim, n_tlut = r.unpack("<BBBB2xQQQQQ")
    if dim not in (1, 2) or n > MAX_ELEMENTS or n_tlut > MAX_ELEMENTS:
        raise DimensionOverflow(f"implausible codebook shape ({n}, {dim})")
    try:
        kind = CodebookKind(kind)
    except ValueError:
        raise CorruptContainer(f"unknown codebook kind {kind}") from None
    entries = r.array("<f4", n * dim).reshape(n, dim)
    if kind == CodebookKind.LUT1D:
        entries = entries.ravel()
    tlut = r.array("<f4", n_tlut * 2).reshape(n_tlut, 2) if kind == CodebookKind.TRELLIS else None
    r.finish()
    cb = CodebookFile(kind, bits_x4, entries, seed, n_samples, tlut, L, tlut_bits)
    cb.validate()
    return cb


# -------------------------------------------------------------- helpers ---


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1 or rows * cols > MAX_ELEMENTS:
        raise DimensionOverflow(f"dimensions {rows}x{cols} out of range")


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        if len(buf) < 6:
            raise TruncatedPayload("file shorter than its header")
        if buf[:4] != magic:
            raise BadMagic(f"expected magic {magic!r}, found {buf[:4]!r}")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != VERSION:
            raise UnsupportedVersion(f"container version {version}, this reader handles {VERSION}")
        self.buf = buf
        self.pos = 6

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * np.dtype(dtype).itemsize), dtype=dtype)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptContainer(f"{len(self.buf) - self.pos} trailing bytes after payload")
