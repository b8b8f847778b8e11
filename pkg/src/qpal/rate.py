"""Distortion measurement, the Gaussian distortion-rate floor, and water-filling bit allocation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cache import cached_codebook, load_json, store_json
from .errors import InfeasibleBudget, InvalidInput
from .quant.engine import encode_matrix
from .tensor_store import CodebookFile, Scheme, check_width

BISECT_ITERS = 200
BISECT_PAD = 64.0


def measure_distortion(original, reconstructed) -> float:
    """Normalized squared error ``||R - W||^2 / ||W||^2``."""
    w = np.asarray(original, dtype=np.float64)
    r = np.asarray(reconstructed, dtype=np.float64)
    if w.shape != r.shape:
        raise InvalidInput(f"shape mismatch {w.shape} vs {r.shape}")
    den = float(np.sum(w * w))
    if den <= 0:
        raise InvalidInput("original matrix has zero norm")
    d = r - w
    return float(np.sum(d * d)) / den


def rd_bound(bits: float) -> float:
    """Distortion-rate floor of a unit Gaussian source at ``bits`` per sample."""
    return 2.0 ** (-2.0 * bits)


def measure_scheme_distortion(
    scheme,
    bits_x4: int,
    dims: tuple[int, int] = (1024, 1024),
    seed: int = 0,
    codebook: CodebookFile | None = None,
    threads: int | None = None,
) -> float:
    """Distortion of a scheme on a fresh N(0,1) matrix drawn from ``seed``.

    Results are cached under ``QPAL_CACHE_DIR`` keyed by scheme, width,
    dims, seed and the codebook id.
    """
    scheme = Scheme.parse(scheme)
    check_width(scheme, bits_x4)
    rows, cols = dims
    if codebook is None:
        codebook = cached_codebook(scheme, bits_x4)
    name = f"distortion-{scheme.label}-{bits_x4}-{rows}x{cols}-{seed}-{codebook.codebook_id}.json"
    hit = load_json(name)
    if hit is not None and "err" in hit:
        return float(hit["err"])
    w = np.random.default_rng(seed).standard_normal((rows, cols))
    _, rec = encode_matrix(w, scheme, bits_x4, codebook, threads=threads)
    err = measure_distortion(w, rec)
    store_json(
        name,
        {
            "scheme": scheme.label,
            "bits_x4": bits_x4,
            "err": err,
            "sample_dims": [rows, cols],
            "seed": seed,
            "codebook_id": codebook.codebook_id,
        },
    )
    return err


@dataclass
class LayerSpec:
    name: str
    d_in: int
    d_out: int
    sensitivity: float

    def __post_init__(self):
        if int(self.d_in) < 1 or int(self.d_out) < 1:
            raise InvalidInput(f"layer {self.name}: dims must be positive")
        self.d_in, self.d_out = int(self.d_in), int(self.d_out)
        self.sensitivity = float(self.sensitivity)
        if not (self.sensitivity >= 0 and math.isfinite(self.sensitivity)):
            raise InvalidInput(f"layer {self.name}: sensitivity must be finite and >= 0")

    @property
    def size(self) -> int:
        return self.d_in * self.d_out


@dataclass
class AllocationResult:
    bitwidths: np.ndarray
    water_level: float
    eta: float
    budget_used: float
    objective: float
    names: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "bitwidths": {n: float(b) for n, b in zip(self.names, self.bitwidths)},
            "water_level": self.water_level,
            "eta": self.eta,
            "budget_used": self.budget_used,
            "objective": self.objective,
        }


def _allocation(offsets, sizes, eta, c):
    return np.maximum(eta, offsets + c)


def allocate_bits(layers: list[LayerSpec], budget: float, eta: float) -> AllocationResult:
    """Optimal fractional bitwidths ``b_l = max(eta, log2(a_l/size_l)/2 + C)``.

    ``C`` is bracketed by bisection and then solved exactly on the resulting
    active set, so the budget constraint holds with equality.
    """
    if not layers:
        raise InvalidInput("no layers")
    sizes = np.array([l.size for l in layers], dtype=np.float64)
    a = np.array([l.sensitivity for l in layers], dtype=np.float64)
    total = float(sizes.sum())
    budget = float(budget)
    eta = float(eta)
    if not (math.isfinite(budget) and math.isfinite(eta)):
        raise InvalidInput("budget and eta must be finite")
    if budget < eta * total * (1 - 1e-12):
        raise InfeasibleBudget(f"budget {budget:g} bits < eta * total size = {eta * total:g}")
    live = a > 0
    if not live.any():
        raise InvalidInput("at least one layer needs a positive sensitivity")

    offsets = np.full(a.size, -np.inf)
    offsets[live] = 0.5 * np.log2(a[live] / sizes[live])

    def used(c):
        return float(np.dot(sizes, _allocation(offsets, sizes, eta, c)))

    lo = float(np.min(eta - offsets[live])) - BISECT_PAD
    hi = float(np.max(eta - offsets[live])) + budget / float(sizes[live].min()) + BISECT_PAD
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if used(mid) > budget:
            hi = mid
        else:
            lo = mid
    c = lo
    # exact water level on the active set found by bisection
    for _ in range(a.size + 1):
        active = offsets + c > eta
        if not active.any():
            break
        s_act = float(sizes[active].sum())
        c_new = (budget - eta * float(sizes[~active].sum()) - float(np.dot(sizes[active], offsets[active]))) / s_act
        if np.array_equal(offsets + c_new > eta, active):
            c = c_new
            break
        c = c_new
    b = _allocation(offsets, sizes, eta, c)
    return AllocationResult(
        bitwidths=b,
        water_level=float(c),
        eta=eta,
        budget_used=math.fsum(sizes * b),
        objective=math.fsum(a * np.exp2(-2.0 * b)),
        names=[l.name for l in layers],
    )


@dataclass
class GapReport:
    distortion_gap: float
    bit_alloc_gap: float
    total_gap: float
    per_layer: list[dict]

    def to_json(self) -> dict:
        return {
            "distortion_gap": self.distortion_gap,
            "bit_alloc_gap": self.bit_alloc_gap,
            "total_gap": self.total_gap,
            "per_layer": self.per_layer,
        }


def gap_report(chosen, layers: list[LayerSpec], allocation: AllocationResult, budget: float | None = None) -> GapReport:
    """Split ``sum a_l (err_l - 2^{-2 b_l*})`` into quantizer and granularity parts.

    ``chosen`` holds one ``(bits, measured_err)`` pair per layer.
    """
    chosen = [(float(b), float(e)) for b, e in chosen]
    if len(chosen) != len(layers) or len(layers) != len(allocation.bitwidths):
        raise InvalidInput(f"{len(chosen)} choices for {len(layers)} layers / {len(allocation.bitwidths)} allocations")
    used = math.fsum(b * l.size for (b, _), l in zip(chosen, layers))
    limit = allocation.budget_used if budget is None else float(budget)
    if used > limit * (1 + 1e-9):
        raise InfeasibleBudget(f"chosen assignment uses {used:g} bits > budget {limit:g}")
    per_layer, dist_terms, alloc_terms = [], [], []
    for (bits, err), layer, bstar in zip(chosen, layers, allocation.bitwidths):
        a = layer.sensitivity
        dg = a * (err - rd_bound(bits))
        bg = a * (rd_bound(bits) - rd_bound(float(bstar)))
        dist_terms.append(dg)
        alloc_terms.append(bg)
        per_layer.append({"name": layer.name, "bits": bits, "optimal_bits": float(bstar), "distortion_gap": dg, "bit_alloc_gap": bg})
    dist = math.fsum(dist_terms)
    alloc = math.fsum(alloc_terms)
    return GapReport(dist, alloc, dist + alloc, per_layer)
