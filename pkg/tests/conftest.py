import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Codebooks are deterministic, so a persistent cache only saves rebuild time.
os.environ.setdefault("QPAL_CACHE_DIR", str(Path(tempfile.gettempdir()) / "qpal-test-cache"))

from qpal.cache import cached_codebook  # noqa: E402
from qpal.codebooks import quantlut_sym  # noqa: E402
from qpal.tensor_store import CodebookFile, CodebookKind  # noqa: E402


@pytest.fixture(scope="session")
def nuq2():
    return cached_codebook("nuq", 8)


@pytest.fixture(scope="session")
def vq2():
    return cached_codebook("vq", 8)


@pytest.fixture(scope="session")
def tlut9():
    """Production trellis codebook (L=16, tlut_bits=9), shared by TCQ widths up to 4 bits."""
    return cached_codebook("tcq", 8)


@pytest.fixture(scope="session")
def toy_trellis():
    """Cheap stand-in trellis codebook for structural tests (random tlut)."""
    rng = np.random.default_rng(1234)
    tlut = rng.standard_normal((512, 2)).astype(np.float32)
    return CodebookFile(CodebookKind.TRELLIS, 8, quantlut_sym(tlut, 16, 9), 0, 0, tlut=tlut, L=16, tlut_bits=9)
