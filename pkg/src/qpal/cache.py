"""On-disk cache for codebooks and distortion measurements (``QPAL_CACHE_DIR``)."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from .codebooks import build_codebook, codebook_width, trellis_config
from .errors import FormatError
from .tensor_store import CodebookFile, Scheme, read_codebook, write_codebook

ENV_VAR = "QPAL_CACHE_DIR"


def cache_dir() -> Path | None:
    d = os.environ.get(ENV_VAR)
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _codebook_key(scheme: Scheme, bits_x4: int, seed: int, n_samples: int | None) -> str:
    width = codebook_width(scheme, bits_x4)
    n = "default" if n_samples is None else str(n_samples)
    if scheme in (Scheme.TCQ, Scheme.HALF_TCQ):
        # every width with the same small codebook shares one trellis LUT
        cfg = trellis_config(width)
        return f"trellis-L{cfg.L}-t{cfg.tlut_bits}-s{seed}-n{n}"
    return f"{scheme.label}-{width}-s{seed}-n{n}"


def cached_codebook(scheme, bits_x4: int, seed: int = 0, n_samples: int | None = None) -> CodebookFile:
    """``build_codebook`` with a disk cache when ``QPAL_CACHE_DIR`` is set."""
    scheme = Scheme.parse(scheme)
    width = codebook_width(scheme, bits_x4)
    d = cache_dir()
    path = d / f"{_codebook_key(scheme, bits_x4, seed, n_samples)}.qpcb" if d else None
    cb = None
    if path is not None and path.exists():
        try:
            cb = read_codebook(path)
        except FormatError:
            cb = None
    if cb is None:
        cb = build_codebook(scheme, bits_x4, n_samples, seed)
        if path is not None:
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            write_codebook(tmp, cb)
            os.replace(tmp, path)
    if scheme in (Scheme.TCQ, Scheme.HALF_TCQ) and cb.bits_x4 != width:
        cb = dataclasses.replace(cb, bits_x4=width, meta=dict(cb.meta))
    return cb


def load_json(name: str) -> dict | None:
    d = cache_dir()
    if d is None or not (d / name).exists():
        return None
    try:
        return json.loads((d / name).read_text())
    except (OSError, ValueError):
        return None


def store_json(name: str, obj: dict) -> None:
    d = cache_dir()
    if d is None:
        return
    tmp = d / f"{name}.tmp{os.getpid()}"
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, d / name)
