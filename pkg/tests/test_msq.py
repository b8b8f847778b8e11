import json
import math

import numpy as np
import pytest

from oracles import brute_force_fusion, brute_force_mckp, random_blocks
from qpal.errors import DegenerateFit, FormatError, Infeasible, InvalidInput, MissingCost
from qpal.msq.catalog import CatalogEntry, catalog_from_json, catalog_to_json, data_free_catalog, read_catalog, write_catalog
from qpal.msq.costs import CostTable, ingest_cost_profile, synth_cost_model
from qpal.msq.fusion import build_block_frontier, solve_fusion_msq
from qpal.msq.groups import BlockCatalog, fusion_group_sets, set_partitions
from qpal.msq.mckp import budget_slack, lp_relaxation, solve_mckp
from qpal.msq.sensitivity import SensitivityMeasurement, fit_sensitivity, probe_norms
from qpal.rate import LayerSpec

# --- sensitivity ----------------------------------------------------------------


def measurements(layer, a, norms):
    return [SensitivityMeasurement(layer, n, a * n * n) for n in norms]


def test_fit_exact_quadratic():
    fit = fit_sensitivity(measurements("l", 3.0, [1, 2, 3, 4]))["l"]
    assert abs(fit.a - 3.0) < 1e-12 and not fit.clamped and fit.n_points == 4


def test_fit_probe_grid():
    norms = probe_norms(0.7)
    assert len(norms) == 16 and abs(norms[15] - 0.7 / 4) < 1e-15
    rng = np.random.default_rng(0)
    for a in np.exp(rng.uniform(-10, 10, 50)):
        fit = fit_sensitivity(measurements("l", a, norms))["l"]
        assert abs(fit.a / a - 1) < 1e-6


def test_fit_negative_is_clamped():
    fit = fit_sensitivity(measurements("l", -1.0, [1, 2]))["l"]
    assert fit.a == 0.0 and fit.clamped


def test_fit_scale_equivariant():
    rng = np.random.default_rng(1)
    pts = [SensitivityMeasurement(l, float(n), float(rng.uniform(0, 5))) for l in "ab" for n in rng.uniform(0.1, 2, 8)]
    base = fit_sensitivity(pts)
    scaled = fit_sensitivity([SensitivityMeasurement(p.layer, p.noise_norm, 7 * p.loss_delta) for p in pts])
    for l in "ab":
        assert math.isclose(scaled[l].a, 7 * base[l].a, rel_tol=1e-12)


def test_fit_degenerate_and_invalid():
    with pytest.raises(DegenerateFit):
        fit_sensitivity([SensitivityMeasurement("l", 1.0, 1.0)])
    with pytest.raises(InvalidInput):
        SensitivityMeasurement("l", 0.0, 1.0)


# --- MCKP -----------------------------------------------------------------------


def random_catalog(rng):
    classes = [[(float(rng.uniform(1e-3, 1)), float(rng.uniform(1e-3, 1))) for _ in range(rng.integers(1, 6))] for _ in range(rng.integers(1, 7))]
    cat = [CatalogEntry(f"l{i}", f"q{j}", 2.0, lo, co) for i, opts in enumerate(classes) for j, (co, lo) in enumerate(opts)]
    lo = sum(min(c for c, _ in o) for o in classes)
    hi = sum(max(c for c, _ in o) for o in classes)
    return classes, cat, float(rng.uniform(lo, hi))


def test_mckp_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        classes, cat, budget = random_catalog(rng)
        sol = solve_mckp(cat, budget)
        best = brute_force_mckp(classes, budget, budget_slack(budget))
        assert sol.optimal
        assert abs(sol.total_loss - best) <= 1e-12
        assert sol.total_cost <= budget + budget_slack(budget)
        assert sorted(sol.choices) == sorted({e.layer for e in cat})


def test_mckp_two_layer_example():
    cat = [CatalogEntry(l, q, 0.0, loss, cost) for l in "ab" for q, cost, loss in (("x", 2, 0.10), ("y", 4, 0.01))]
    sol = solve_mckp(cat, 6)
    assert abs(sol.total_loss - 0.11) < 1e-15
    assert sorted(e.quantizer_id for e in sol.choices.values()) == ["x", "y"]


def test_mckp_unconstrained_takes_min_loss():
    rng = np.random.default_rng(3)
    classes, cat, _ = random_catalog(rng)
    sol = solve_mckp(cat, sum(max(c for c, _ in o) for o in classes))
    assert math.isclose(sol.total_loss, sum(min(l for _, l in o) for o in classes), rel_tol=1e-12)


def test_mckp_infeasible_names_binding_layer():
    cat = [CatalogEntry("a", "x", 2, 0.1, 1.0), CatalogEntry("b", "x", 2, 0.1, 5.0), CatalogEntry("b", "y", 3, 0.01, 9.0)]
    with pytest.raises(Infeasible, match="b"):
        solve_mckp(cat, 5.5)


def test_mckp_lp_and_greedy_sandwich():
    rng = np.random.default_rng(4)
    for _ in range(100):
        _, cat, budget = random_catalog(rng)
        lp, greedy = lp_relaxation(cat, budget)
        sol = solve_mckp(cat, budget)
        assert lp <= sol.total_loss + 1e-12 and sol.total_loss <= greedy + 1e-12


def test_mckp_deterministic_ties():
    cat = [CatalogEntry("a", q, 2, 0.5, 1.0) for q in ("z", "m", "b")]
    for _ in range(3):
        assert solve_mckp(cat, 1.0).choices["a"].quantizer_id == "b"


def test_catalog_json_round_trip(tmp_path):
    layers = [LayerSpec("a", 4, 8, 2.0), LayerSpec("b", 8, 8, 0.5)]
    cat = data_free_catalog(layers, {"nuq2": (2.0, 0.1175), "vq3": (3.0, 0.03)})
    assert cat[0].loss == 2.0 * 0.1175 and cat[0].cost == 2.0 * 32
    write_catalog(tmp_path / "c.json", layers, cat)
    l2, c2 = read_catalog(tmp_path / "c.json")
    assert l2 == layers and c2 == cat
    obj = catalog_to_json(layers, cat)
    obj["options"] = obj["options"][:2]
    with pytest.raises(FormatError):
        catalog_from_json(obj)
    with pytest.raises(InvalidInput):
        CatalogEntry("a", "q", 2, 0.1, 0.0)


# --- fusion ---------------------------------------------------------------------


def test_partition_counts():
    assert len(set_partitions(("q", "k", "v"))) == 5
    assert len(set_partitions(("u", "g"))) == 2
    sets = fusion_group_sets("qkvougd")
    assert len(sets) == 10
    assert len({g for s in sets for g in s.groups}) == 12
    for s in sets:
        assert sorted(s.members()) == sorted("qkvougd")


def test_synth_cost_model_properties():
    _, (blk,) = random_blocks(np.random.default_rng(5), 1, 1)
    qs = {"x": 2.0, "y": 4.0}
    blk = BlockCatalog(blk.block_id, blk.dims, {(r, q): 0.1 for r in blk.dims for q in qs}, qs)
    t = synth_cost_model([blk], qs, {"bytes_per_sec": 100.0, "launch_overhead": 0.5})
    fused = t.get("b0", ("q", "k", "v"), "x")
    apart = sum(t.get("b0", (r,), "x") for r in "qkv")
    assert math.isclose(apart - fused, 2 * 0.5, rel_tol=1e-12)
    assert t.get("b0", ("v", "q", "k"), "x") == fused
    data = lambda q: t.get("b0", ("o",), q) - 0.5
    assert math.isclose(data("y"), 2 * data("x"), rel_tol=1e-12)
    t0 = synth_cost_model([blk], qs, {"bytes_per_sec": 100.0, "launch_overhead": 0.0})
    assert math.isclose(t0.get("b0", ("u", "g"), "y"), t0.get("b0", ("u",), "y") + t0.get("b0", ("g",), "y"), rel_tol=1e-12)


def test_neutral_costs_give_unfused_frontier():
    rng = np.random.default_rng(6)
    qs, (blk,) = random_blocks(rng, 1, 2)
    # at 1/8 byte per second every cost is an exact bit count, so fused and
    # split groups tie exactly instead of up to rounding
    t = synth_cost_model([blk], qs, {"bytes_per_sec": 0.125, "launch_overhead": 0.0})
    full = build_block_frontier(blk, t)
    unfused = [s for s in fusion_group_sets(blk.roles) if all(len(g) == 1 for g in s.groups)]
    solo = build_block_frontier(blk, t, unfused)
    assert [(p.cost, p.loss) for p in full] == [(p.cost, p.loss) for p in solo]


def test_qkv_fusion_is_cheapest():
    qs = {"x": 2.0}
    dims = {r: (16, 16) for r in "qkvougd"}
    blk = BlockCatalog("b", dims, {(r, "x"): 0.1 for r in dims}, qs)
    t = synth_cost_model([blk], qs, {"bytes_per_sec": 1000.0, "launch_overhead": 1.0})
    cheapest = build_block_frontier(blk, t)[0]
    groups = [g for g, _ in cheapest.assignment]
    assert ("q", "k", "v") in groups and ("u", "g") in groups


def test_frontier_strictly_decreasing():
    rng = np.random.default_rng(7)
    qs, blocks = random_blocks(rng, 2, 3)
    t = synth_cost_model(blocks, qs, {"bytes_per_sec": 1000.0, "launch_overhead": 0.7})
    for blk in blocks:
        f = build_block_frontier(blk, t)
        assert all(a.cost < b.cost and a.loss > b.loss for a, b in zip(f, f[1:]))


@pytest.mark.parametrize("n_blocks,n_quant", [(1, 2), (2, 3)])
def test_fusion_matches_brute_force(n_blocks, n_quant):
    rng = np.random.default_rng(8 + n_blocks)
    for _ in range(5):
        qs, blocks = random_blocks(rng, n_blocks, n_quant)
        t = synth_cost_model(blocks, qs, {"bytes_per_sec": 1000.0, "launch_overhead": float(rng.uniform(0, 2))})
        fr = {b.block_id: build_block_frontier(b, t) for b in blocks}
        lo = sum(f[0].cost for f in fr.values())
        hi = sum(f[-1].cost for f in fr.values())
        budget = float(rng.uniform(lo, hi))
        plan = solve_fusion_msq(fr, budget, qs)
        assert abs(plan.total_loss - brute_force_fusion(blocks, t, budget, budget_slack(budget))) <= 1e-12
        assert plan.total_cost <= budget + budget_slack(budget)
        for b in plan.to_json()["blocks"]:
            assert sorted(r for g in b["groups"] for r in g["members"]) == sorted("qkvougd")


def test_fusion_neutral_matches_flat_mckp():
    rng = np.random.default_rng(10)
    for _ in range(5):
        qs, blocks = random_blocks(rng, 2, 3)
        t = synth_cost_model(blocks, qs, {"bytes_per_sec": 1000.0, "launch_overhead": 0.0})
        fr = {b.block_id: build_block_frontier(b, t) for b in blocks}
        budget = float(rng.uniform(sum(f[0].cost for f in fr.values()), sum(f[-1].cost for f in fr.values())))
        flat = [CatalogEntry(f"{b.block_id}.{r}", q, qs[q], b.losses[(r, q)], t.get(b.block_id, (r,), q)) for b in blocks for r in b.roles for q in qs]
        assert abs(solve_fusion_msq(fr, budget, qs).total_loss - solve_mckp(flat, budget).total_loss) <= 1e-12


def test_fusion_budget_at_cheapest_points():
    rng = np.random.default_rng(11)
    qs, blocks = random_blocks(rng, 2, 2)
    t = synth_cost_model(blocks, qs, {"bytes_per_sec": 1000.0, "launch_overhead": 0.3})
    fr = {b.block_id: build_block_frontier(b, t) for b in blocks}
    plan = solve_fusion_msq(fr, sum(f[0].cost for f in fr.values()), qs)
    for b in plan.blocks:
        assert (b["cost"], b["loss"]) == (fr[b["block"]][0].cost, fr[b["block"]][0].loss)
    with pytest.raises(Infeasible, match="binding block 'b[01]'"):
        solve_fusion_msq(fr, 0.5 * sum(f[0].cost for f in fr.values()), qs)


def test_cost_profile_ingest(tmp_path):
    qs, (blk,) = random_blocks(np.random.default_rng(12), 1, 1)
    t = synth_cost_model([blk], qs, {"bytes_per_sec": 10.0, "launch_overhead": 0.1})
    rows = [{"block": b, "members": list(g), "quantizer": q, "cost": c} for (b, g, q), c in t.entries.items()]
    (tmp_path / "p.json").write_text(json.dumps({"units": "us", "costs": rows}))
    back = ingest_cost_profile(tmp_path / "p.json", [blk])
    assert back.units == "us" and back.entries == t.entries
    (tmp_path / "short.json").write_text(json.dumps({"units": "us", "costs": rows[:-1]}))
    with pytest.raises(MissingCost):
        ingest_cost_profile(tmp_path / "short.json", [blk])
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(FormatError):
        ingest_cost_profile(tmp_path / "bad.json")
    with pytest.raises(MissingCost):
        CostTable().get("b0", ("q",), "x")
