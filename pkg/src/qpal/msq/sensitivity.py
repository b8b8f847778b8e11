"""Per-layer sensitivity coefficients from (noise norm, loss increase) probes."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import DegenerateFit, InvalidInput


@dataclass
class SensitivityMeasurement:
    layer: str
    noise_norm: float
    loss_delta: float

    def __post_init__(self):
        if not (self.noise_norm > 0 and math.isfinite(self.noise_norm)):
            raise InvalidInput(f"layer {self.layer}: noise norm must be positive and finite")
        if not math.isfinite(self.loss_delta):
            raise InvalidInput(f"layer {self.layer}: loss delta must be finite")


@dataclass
class SensitivityFit:
    layer: str
    a: float
    clamped: bool
    n_points: int


def probe_norms(scale: float, count: int = 16) -> list[float]:
    """Probe grid ``sqrt(i)/16 * scale`` for ``i = 1..count``."""
    return [math.sqrt(i) / 16.0 * scale for i in range(1, count + 1)]


def fit_sensitivity(measurements) -> dict[str, SensitivityFit]:
    """Least squares of ``dL = a * n^2`` through the origin, per layer.

    Negative slopes are clamped to zero and flagged.
    """
    by_layer: dict[str, list[SensitivityMeasurement]] = {}
    for m in measurements:
        by_layer.setdefault(m.layer, []).append(m)
    out = {}
    for name, pts in by_layer.items():
        if len(pts) < 2:
            raise DegenerateFit(f"layer {name}: need at least 2 measurements, got {len(pts)}")
        n2 = [p.noise_norm**2 for p in pts]
        num = math.fsum(x * p.loss_delta for x, p in zip(n2, pts))
        den = math.fsum(x * x for x in n2)
        a = num / den
        out[name] = SensitivityFit(name, max(a, 0.0), a < 0, len(pts))
    return out
