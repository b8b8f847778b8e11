"""Quantizer catalogs: per-layer (quantizer, bits, loss, cost) options and their JSON form.

File schema::

    {"layers":  [{"name", "d_in", "d_out", "sensitivity"}],
     "options": [{"layer", "quantizer", "bits", "loss", "cost"}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from ..errors import FormatError, InvalidInput
from ..rate import LayerSpec


@dataclass(frozen=True)
class CatalogEntry:
    layer: str
    quantizer_id: str
    bits: float
    loss: float
    cost: float

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise InvalidInput(f"{self.layer}/{self.quantizer_id}: loss must be finite")
        if not (self.cost > 0 and math.isfinite(self.cost)):
            raise InvalidInput(f"{self.layer}/{self.quantizer_id}: cost must be positive and finite")


def data_free_catalog(layers: list[LayerSpec], distortions: dict[str, tuple[float, float]]) -> list[CatalogEntry]:
    """Loss ``a_l * err(Q)`` and memory cost ``bits * d_in * d_out``.

    ``distortions`` maps quantizer id to ``(bits, measured err)``.
    """
    out = []
    for layer in layers:
        for qid, (bits, err) in distortions.items():
            out.append(CatalogEntry(layer.name, qid, float(bits), layer.sensitivity * float(err), float(bits) * layer.size))
    return out


def group_by_layer(entries) -> dict[str, list[CatalogEntry]]:
    groups: dict[str, list[CatalogEntry]] = {}
    for e in entries:
        groups.setdefault(e.layer, []).append(e)
    return groups


def catalog_to_json(layers: list[LayerSpec], entries: list[CatalogEntry]) -> dict:
    return {
        "layers": [{"name": l.name, "d_in": l.d_in, "d_out": l.d_out, "sensitivity": l.sensitivity} for l in layers],
        "options": [{"layer": e.layer, "quantizer": e.quantizer_id, "bits": e.bits, "loss": e.loss, "cost": e.cost} for e in entries],
    }


def catalog_from_json(obj: dict) -> tuple[list[LayerSpec], list[CatalogEntry]]:
    try:
        layers = [LayerSpec(d["name"], d["d_in"], d["d_out"], d.get("sensitivity", 0.0)) for d in obj.get("layers", [])]
        entries = [CatalogEntry(str(o["layer"]), str(o["quantizer"]), float(o["bits"]), float(o["loss"]), float(o["cost"])) for o in obj["options"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed catalog: {exc!r}") from exc
    known = {l.name for l in layers}
    if known:
        stray = sorted({e.layer for e in entries} - known)
        if stray:
            raise FormatError(f"options reference undeclared layers: {stray[:5]}")
        empty = sorted(known - {e.layer for e in entries})
        if empty:
            raise FormatError(f"layers without options: {empty[:5]}")
    return layers, entries


def read_catalog(path) -> tuple[list[LayerSpec], list[CatalogEntry]]:
    with open(path) as f:
        try:
            obj = json.load(f)
        except ValueError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return catalog_from_json(obj)


def write_catalog(path, layers: list[LayerSpec], entries: list[CatalogEntry]) -> None:
    with open(path, "w") as f:
        json.dump(catalog_to_json(layers, entries), f, indent=1)
