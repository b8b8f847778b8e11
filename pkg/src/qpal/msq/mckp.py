"""Exact multiple-choice knapsack: pick one option per class, minimize loss under a cost budget.

Each class is reduced to its non-dominated options (cost up, loss strictly
down).  Lower bounds come from the LP relaxation, which for MCKP is the greedy
fill of convex-hull increments ordered by loss saved per unit cost.  A
depth-first branch and bound then searches the non-dominated options.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from ..errors import Infeasible, InvalidInput
from .catalog import CatalogEntry, group_by_layer

DEFAULT_TIME_LIMIT = 60.0


def budget_slack(budget: float) -> float:
    """Absolute tolerance used when comparing a cost sum with the budget."""
    return 1e-12 * max(1.0, abs(budget))


@dataclass
class MsqSolution:
    choices: dict[str, CatalogEntry]
    total_loss: float
    total_cost: float
    optimal: bool
    lp_bound: float = -math.inf
    nodes: int = 0

    def to_json(self) -> dict:
        return {
            "choices": [
                {"layer": e.layer, "quantizer": e.quantizer_id, "bits": e.bits, "loss": e.loss, "cost": e.cost}
                for e in self.choices.values()
            ],
            "total_loss": self.total_loss,
            "total_cost": self.total_cost,
            "optimal": self.optimal,
        }


def pareto_options(options: list[CatalogEntry]) -> list[CatalogEntry]:
    """Non-dominated options sorted by cost, loss strictly decreasing.

    Ties on (cost, loss) keep the smallest quantizer id.
    """
    ordered = sorted(options, key=lambda e: (e.cost, e.loss, e.quantizer_id))
    out: list[CatalogEntry] = []
    for e in ordered:
        if not out or e.loss < out[-1].loss:
            if out and e.cost == out[-1].cost:
                continue
            out.append(e)
    return out


def hull_increments(opts: list[CatalogEntry]) -> list[tuple[float, float]]:
    """(cost step, loss saved) along the lower convex hull, efficiency decreasing."""
    hull = [opts[0]]
    for e in opts[1:]:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b when it lies on or above segment a-e
            if (b.loss - a.loss) * (e.cost - a.cost) >= (e.loss - a.loss) * (b.cost - a.cost):
                hull.pop()
            else:
                break
        hull.append(e)
    return [(b.cost - a.cost, a.loss - b.loss) for a, b in zip(hull, hull[1:])]


class _LpBounds:
    """LP relaxation values for every suffix of the class order."""

    def __init__(self, classes: list[list[CatalogEntry]]):
        n = len(classes)
        self.base_cost = [0.0] * (n + 1)
        self.base_loss = [0.0] * (n + 1)
        self.cum_cost: list[np.ndarray] = [np.zeros(1)] * (n + 1)
        self.cum_gain: list[np.ndarray] = [np.zeros(1)] * (n + 1)
        incs: list[tuple[float, int, float, float]] = []
        for d in range(n - 1, -1, -1):
            opts = classes[d]
            self.base_cost[d] = self.base_cost[d + 1] + opts[0].cost
            self.base_loss[d] = self.base_loss[d + 1] + opts[0].loss
            for dc, dl in hull_increments(opts):
                incs.append((-dl / dc, d, dc, dl))
            incs.sort(key=lambda t: (t[0], t[1]))
            self.cum_cost[d] = np.concatenate([[0.0], np.cumsum([t[2] for t in incs])])
            self.cum_gain[d] = np.concatenate([[0.0], np.cumsum([t[3] for t in incs])])
        self.n = n

    def value(self, d: int, remaining: float, slack: float) -> float:
        r = remaining - self.base_cost[d]
        if r < -slack:
            return math.inf
        cc, cg = self.cum_cost[d], self.cum_gain[d]
        k = int(np.searchsorted(cc, r, side="right")) - 1
        gain = cg[k]
        if k + 1 < cc.size and cc[k + 1] > cc[k]:
            gain += (cg[k + 1] - cg[k]) * (r - cc[k]) / (cc[k + 1] - cc[k])
        return self.base_loss[d] - gain


def _greedy(classes: list[list[CatalogEntry]], budget: float, slack: float) -> list[int]:
    """Feasible rounding of the LP: apply whole hull steps in efficiency order."""
    pick = [0] * len(classes)
    used = sum(c[0].cost for c in classes)
    hulls = []
    for ci, opts in enumerate(classes):
        hull_idx = [0]
        for j in range(1, len(opts)):
            while len(hull_idx) >= 2:
                a, b, e = opts[hull_idx[-2]], opts[hull_idx[-1]], opts[j]
                if (b.loss - a.loss) * (e.cost - a.cost) >= (e.loss - a.loss) * (b.cost - a.cost):
                    hull_idx.pop()
                else:
                    break
            hull_idx.append(j)
        hulls.append(hull_idx)
    steps = []
    for ci, h in enumerate(hulls):
        for k in range(1, len(h)):
            a, b = classes[ci][h[k - 1]], classes[ci][h[k]]
            steps.append(((b.loss - a.loss) / (b.cost - a.cost), ci, k))
    steps.sort()
    blocked = set()
    for _, ci, k in steps:
        if ci in blocked:
            continue
        a, b = classes[ci][hulls[ci][k - 1]], classes[ci][hulls[ci][k]]
        if used + (b.cost - a.cost) <= budget + slack:
            used += b.cost - a.cost
            pick[ci] = hulls[ci][k]
        else:
            blocked.add(ci)
    return pick


def lp_relaxation(catalog, budget: float) -> tuple[float, float]:
    """(LP relaxation value, loss of its greedy feasible rounding)."""
    classes = [pareto_options(v) for v in group_by_layer(catalog).values()]
    slack = budget_slack(budget)
    lp = _LpBounds(classes).value(0, budget, slack)
    pick = _greedy(classes, budget, slack)
    return lp, math.fsum(c[p].loss for c, p in zip(classes, pick))


def _check_feasible(groups: dict[str, list[CatalogEntry]], budget: float) -> None:
    mins = {name: min(opts, key=lambda e: (e.cost, e.quantizer_id)) for name, opts in groups.items()}
    need = math.fsum(e.cost for e in mins.values())
    if need > budget + budget_slack(budget):
        worst = max(mins.values(), key=lambda e: e.cost)
        raise Infeasible(
            f"budget {budget:g} < minimum total cost {need:g}; binding layer '{worst.layer}' "
            f"needs at least {worst.cost:g} (cheapest option '{worst.quantizer_id}')",
            remedy="raise the budget or add cheaper options for the binding layer",
        )


def solve_mckp(catalog, budget: float, time_limit: float = DEFAULT_TIME_LIMIT) -> MsqSolution:
    """Exact optimum, or the best incumbent with ``optimal=False`` after ``time_limit`` seconds."""
    catalog = list(catalog)
    if not catalog:
        raise InvalidInput("empty catalog")
    budget = float(budget)
    groups = group_by_layer(catalog)
    _check_feasible(groups, budget)
    slack = budget_slack(budget)
    names = list(groups)
    pareto = {n: pareto_options(groups[n]) for n in names}
    # widest loss range first: early decisions move the bound the most
    order = sorted(range(len(names)), key=lambda i: (-(pareto[names[i]][0].loss - pareto[names[i]][-1].loss), i))
    classes = [pareto[names[i]] for i in order]
    lp = _LpBounds(classes)
    root_bound = lp.value(0, budget, slack)

    pick = _greedy(classes, budget, slack)
    best = [sum(c[p].loss for c, p in zip(classes, pick)), list(pick)]
    n = len(classes)
    cur = [0] * n
    state = {"nodes": 0, "timed_out": False}
    deadline = time.monotonic() + time_limit
    # lowest-loss children first (losses are distinct after pruning)
    child_order = [sorted(range(len(c)), key=lambda j: (c[j].loss, c[j].quantizer_id)) for c in classes]

    def dfs(d: int, loss: float, remaining: float) -> None:
        state["nodes"] += 1
        if state["nodes"] & 1023 == 0 and time.monotonic() > deadline:
            state["timed_out"] = True
        if state["timed_out"]:
            return
        if d == n:
            if loss < best[0]:
                best[0] = loss
                best[1] = list(cur)
            return
        opts = classes[d]
        for j in child_order[d]:
            e = opts[j]
            rem = remaining - e.cost
            if rem < lp.base_cost[d + 1] - slack:
                continue
            if loss + e.loss + (lp.value(d + 1, rem, slack) if d + 1 < n else 0.0) >= best[0]:
                continue
            cur[d] = j
            dfs(d + 1, loss + e.loss, rem)

    if root_bound < best[0]:
        dfs(0, 0.0, budget)

    chosen = {}
    by_class = {order[k]: classes[k][best[1][k]] for k in range(n)}
    for i, name in enumerate(names):
        chosen[name] = by_class[i]
    return MsqSolution(
        choices=chosen,
        total_loss=math.fsum(e.loss for e in chosen.values()),
        total_cost=math.fsum(e.cost for e in chosen.values()),
        optimal=not state["timed_out"],
        lp_bound=root_bound,
        nodes=state["nodes"],
    )
