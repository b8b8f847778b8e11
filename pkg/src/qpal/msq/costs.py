"""Cost tables for fusion-aware planning, keyed by (block, layer group, quantizer)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from ..errors import FormatError, InvalidInput, MissingCost
from .groups import ROLE_ORDER, fusion_group_sets


@dataclass
class CostTable:
    units: str = "seconds"
    entries: dict[tuple[str, tuple[str, ...], str], float] = field(default_factory=dict)

    def set(self, block: str, group, quantizer: str, cost: float) -> None:
        cost = float(cost)
        if not (cost > 0 and math.isfinite(cost)):
            raise InvalidInput(f"cost for {block}/{'+'.join(group)}/{quantizer} must be positive and finite")
        self.entries[(str(block), _canon(group), str(quantizer))] = cost

    def get(self, block: str, group, quantizer: str) -> float:
        key = (str(block), _canon(group), str(quantizer))
        try:
            return self.entries[key]
        except KeyError:
            raise MissingCost(f"no cost for block {block}, group {'+'.join(group)}, quantizer {quantizer}") from None

    def __len__(self) -> int:
        return len(self.entries)


def _canon(group) -> tuple[str, ...]:
    group = tuple(group)
    bad = [r for r in group if r not in ROLE_ORDER]
    if bad:
        raise InvalidInput(f"unknown layer roles {bad}")
    return tuple(sorted(group, key=ROLE_ORDER.__getitem__))


def group_data_bits(dims, bits: float) -> float:
    return sum(bits * d_in * d_out for d_in, d_out in dims)


def synth_cost_model(blocks, quantizers: dict[str, float], params: dict) -> CostTable:
    """Memory-bound kernel model: ``launch_overhead + sum(bits*d_in*d_out/8) / bytes_per_sec``.

    ``blocks`` are :class:`~qpal.msq.groups.BlockCatalog` objects; costs are
    produced for every group any of their partitions can form.
    """
    try:
        bps = float(params["bytes_per_sec"])
        overhead = float(params.get("launch_overhead", 0.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"cost model needs bytes_per_sec and launch_overhead: {exc!r}") from exc
    if not bps > 0 or overhead < 0:
        raise InvalidInput("bytes_per_sec must be > 0 and launch_overhead >= 0")
    table = CostTable(units=str(params.get("units", "seconds")))
    for blk in blocks:
        groups = sorted({g for gs in fusion_group_sets(blk.roles) for g in gs.groups})
        for g in groups:
            dims = [blk.dims[r] for r in g]
            for qid, bits in quantizers.items():
                table.set(blk.block_id, g, qid, overhead + group_data_bits(dims, bits) / 8.0 / bps)
    return table


def ingest_cost_profile(path, blocks=None) -> CostTable:
    """Read a measured cost profile.

    Schema: ``{"units": str, "costs": [{"block", "members": [roles], "quantizer", "cost"}]}``.
    With ``blocks`` given, every (group, quantizer) pair their partitions need
    must be present.
    """
    try:
        with open(path) as f:
            obj = json.load(f)
    except ValueError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        table = CostTable(units=str(obj.get("units", "")))
        for row in obj["costs"]:
            table.set(str(row["block"]), tuple(row["members"]), str(row["quantizer"]), row["cost"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed cost profile ({exc!r})") from exc
    if blocks is not None:
        check_coverage(table, blocks)
    return table


def check_coverage(table: CostTable, blocks) -> None:
    for blk in blocks:
        for gs in fusion_group_sets(blk.roles):
            for g in gs.groups:
                for qid in blk.quantizers:
                    table.get(blk.block_id, g, qid)
