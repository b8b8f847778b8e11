"""Independent reference solvers used as test oracles."""

from __future__ import annotations

import bisect
import itertools
import math

import numpy as np

LN2 = math.log(2.0)

# the set partitions of {q,k,v} and {u,g}, written out by hand
QKV_PARTITIONS = [
    [("q", "k", "v")],
    [("q",), ("k", "v")],
    [("k",), ("q", "v")],
    [("v",), ("q", "k")],
    [("q",), ("k",), ("v",)],
]
UG_PARTITIONS = [[("u", "g")], [("u",), ("g",)]]


def _project(y, h, s, budget, eta):
    """argmin sum h (b - y)^2  s.t.  sum s b = budget, b >= eta."""

    def b_of(nu):
        return np.maximum(eta, y - nu * s / h)

    lo, hi = -1.0, 1.0
    while np.dot(s, b_of(lo)) < budget:
        lo *= 2
    while np.dot(s, b_of(hi)) > budget:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.dot(s, b_of(mid)) > budget:
            lo = mid
        else:
            hi = mid
    free = y - hi * s / h > eta
    # exact multiplier on the free set
    w = s[free] ** 2 / h[free]
    nu = (np.dot(s[free], y[free]) + eta * s[~free].sum() - budget) / w.sum()
    b = b_of(nu)
    if np.array_equal(y - nu * s / h > eta, free):
        return b
    return b_of(hi)


def pg_allocation(a, sizes, budget, eta, iters=500):
    """Scaled projected-gradient descent on sum a 2^(-2b) s.t. sum size*b = budget, b >= eta.

    Each step takes the diagonal-Newton point and projects it in the matching
    metric, with Armijo backtracking.  Returns ``(b, objective)``.
    """
    a = np.asarray(a, float)
    s = np.asarray(sizes, float)

    def f(b):
        return math.fsum(a * np.exp2(-2 * b))

    b = np.full(a.size, budget / s.sum())
    fb = f(b)
    for _ in range(iters):
        e = a * np.exp2(-2 * b)
        g = -2 * LN2 * e
        h = 4 * LN2**2 * e + 1e-300
        d = _project(b - g / h, h, s, budget, eta) - b
        slope = float(np.dot(g, d))
        if slope >= -1e-300:
            break
        t = 1.0
        while True:
            nb = b + t * d
            fn = f(nb)
            if fn <= fb + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        done = abs(fb - fn) <= 1e-16 * fb and np.max(np.abs(nb - b)) < 1e-13
        b, fb = nb, fn
        if done:
            break
    return b, fb


def brute_force_mckp(classes, budget, slack):
    """Exhaustive minimum loss; ``classes`` is a list of [(cost, loss), ...]."""
    cost = np.zeros(())
    loss = np.zeros(())
    for opts in classes:
        c = np.array([o[0] for o in opts])
        l = np.array([o[1] for o in opts])
        cost = np.add.outer(cost, c)
        loss = np.add.outer(loss, l)
    ok = cost <= budget + slack
    return float(loss[ok].min()) if ok.any() else math.inf


def block_options(block, costs):
    """Every (cost, loss) of one block over all partitions and quantizer assignments."""
    roles = set(block.roles)
    qids = list(block.quantizers)
    out = []
    for qkv in QKV_PARTITIONS:
        for ug in UG_PARTITIONS:
            groups = [g for g in qkv + ug if set(g) <= roles and g] + [(r,) for r in ("o", "d") if r in roles]
            for assign in itertools.product(qids, repeat=len(groups)):
                c = sum(costs.get(block.block_id, g, q) for g, q in zip(groups, assign))
                l = sum(block.losses[(r, q)] for g, q in zip(groups, assign) for r in g)
                out.append((c, l))
    return out


def brute_force_fusion(blocks, costs, budget, slack):
    """Exhaustive minimum loss over all partition/assignment combinations (1 or 2 blocks)."""
    per = [block_options(b, costs) for b in blocks]
    limit = budget + slack
    if len(per) == 1:
        feas = [l for c, l in per[0] if c <= limit]
        return min(feas) if feas else math.inf
    first, second = per
    second = sorted(second)
    c2 = [c for c, _ in second]
    prefix = list(itertools.accumulate((l for _, l in second), min))
    best = math.inf
    for c1, l1 in first:
        k = bisect.bisect_right(c2, limit - c1)
        # settle rounding at the boundary against the exact sum test
        while k < len(c2) and c1 + c2[k] <= limit:
            k += 1
        while k > 0 and c1 + c2[k - 1] > limit:
            k -= 1
        if k:
            best = min(best, l1 + prefix[k - 1])
    return best


def random_blocks(rng, n_blocks, n_quant):
    """Random full transformer blocks (all seven roles) sharing one quantizer pool."""
    from qpal.msq.groups import BlockCatalog

    bits = rng.choice([2.0, 2.5, 3.0, 3.5, 4.0], n_quant, replace=False)
    quantizers = {f"q{i}": float(b) for i, b in enumerate(bits)}
    blocks = []
    for b in range(n_blocks):
        dims = {r: (int(2 ** rng.integers(3, 6)), int(2 ** rng.integers(3, 6))) for r in "qkvougd"}
        losses = {(r, q): float(rng.uniform(0.01, 1)) for r in dims for q in quantizers}
        blocks.append(BlockCatalog(f"b{b}", dims, losses, quantizers))
    return quantizers, blocks
