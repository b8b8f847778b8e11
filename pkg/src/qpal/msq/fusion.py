"""Fusion-aware planning: per-block Pareto frontiers over group sets, then MCKP over blocks.

Objective and budget are sums over blocks, so an optimal plan only ever uses
non-dominated per-block (cost, loss) points; the block frontier is built
exactly by min-plus convolution of the per-group option lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import Infeasible, InvalidInput
from .catalog import CatalogEntry
from .costs import CostTable
from .groups import BlockCatalog, FusionGroupSet, fusion_group_sets
from .mckp import DEFAULT_TIME_LIMIT, budget_slack, solve_mckp


@dataclass(frozen=True)
class FrontierPoint:
    cost: float
    loss: float
    assignment: tuple[tuple[tuple[str, ...], str], ...]  # (group, quantizer id) per group


def _sort_key(p: FrontierPoint):
    return (p.cost, p.loss, p.assignment)


def pareto_prune(points) -> list[FrontierPoint]:
    """Keep points whose loss is strictly below every cheaper point's; sorted by cost."""
    out: list[FrontierPoint] = []
    for p in sorted(points, key=_sort_key):
        if out and (p.loss >= out[-1].loss or p.cost == out[-1].cost):
            continue
        out.append(p)
    return out


def min_plus(a: list[FrontierPoint], b: list[FrontierPoint]) -> list[FrontierPoint]:
    return pareto_prune(FrontierPoint(x.cost + y.cost, x.loss + y.loss, x.assignment + y.assignment) for x in a for y in b)


def group_options(block: BlockCatalog, group, costs: CostTable) -> list[FrontierPoint]:
    return pareto_prune(
        FrontierPoint(costs.get(block.block_id, group, qid), block.group_loss(group, qid), ((tuple(group), qid),))
        for qid in block.quantizers
    )


def build_block_frontier(block: BlockCatalog, costs: CostTable, group_sets: list[FusionGroupSet] | None = None) -> list[FrontierPoint]:
    """Exact Pareto frontier of one block over all its group sets."""
    if not block.quantizers:
        raise InvalidInput(f"block {block.block_id}: no quantizers")
    if group_sets is None:
        group_sets = fusion_group_sets(block.roles, block.block_id)
    points: list[FrontierPoint] = []
    for gs in group_sets:
        if sorted(gs.members()) != sorted(block.roles):
            raise InvalidInput(f"block {block.block_id}: group set {gs.groups} does not cover {block.roles} exactly once")
        acc = [FrontierPoint(0.0, 0.0, ())]
        for g in gs.groups:
            acc = min_plus(acc, group_options(block, g, costs))
        points.extend(acc)
    return pareto_prune(points)


@dataclass
class FusionPlan:
    blocks: list[dict]
    total_cost: float
    total_loss: float
    optimal: bool

    def to_json(self) -> dict:
        return {"blocks": self.blocks, "total_cost": self.total_cost, "total_loss": self.total_loss, "optimal": self.optimal}


def solve_fusion_msq(
    frontiers: dict[str, list[FrontierPoint]],
    budget: float,
    quantizer_bits: dict[str, float] | None = None,
    time_limit: float = DEFAULT_TIME_LIMIT,
) -> FusionPlan:
    """Optimal plan: one frontier point per block under the total cost budget."""
    if not frontiers:
        raise InvalidInput("no blocks")
    catalog = []
    for bid, pts in frontiers.items():
        if not pts:
            raise InvalidInput(f"block {bid}: empty frontier")
        for i, p in enumerate(pts):
            catalog.append(CatalogEntry(str(bid), f"{i:08d}", 0.0, p.loss, p.cost))
    cheapest = {bid: pts[0].cost for bid, pts in frontiers.items()}
    need = math.fsum(cheapest.values())
    if need > budget + budget_slack(budget):
        worst = max(cheapest, key=lambda b: (cheapest[b], b))
        raise Infeasible(
            f"budget {budget:g} < minimum total cost {need:g}; binding block {worst!r} needs at least {cheapest[worst]:g}",
            remedy="raise the budget or add cheaper quantizers",
        )
    sol = solve_mckp(catalog, budget, time_limit)
    bits = quantizer_bits or {}
    blocks = []
    for bid, pts in frontiers.items():
        p = pts[int(sol.choices[str(bid)].quantizer_id)]
        groups = [{"members": list(g), "quantizer": q, "bits": bits.get(q)} for g, q in p.assignment]
        blocks.append({"block": str(bid), "groups": groups, "cost": p.cost, "loss": p.loss})
    return FusionPlan(
        blocks=blocks,
        total_cost=math.fsum(b["cost"] for b in blocks),
        total_loss=math.fsum(b["loss"] for b in blocks),
        optimal=sol.optimal,
    )
