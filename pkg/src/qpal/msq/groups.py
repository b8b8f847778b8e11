"""Fusible layer groups of a transformer block.

Roles: ``q k v`` share the attention input, ``u g`` share the MLP input, and
``o``, ``d`` always run alone.  A group set picks one set partition of each
fusible family; every group runs as one kernel with one shared quantizer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ..errors import InvalidInput

FUSIBLE = (("q", "k", "v"), ("u", "g"))
SOLO = ("o", "d")
ROLE_ORDER = {r: i for i, r in enumerate(("q", "k", "v", "o", "u", "g", "d"))}


def set_partitions(items: tuple) -> list[tuple[tuple, ...]]:
    """All set partitions of ``items``, blocks and partitions in canonical order."""
    items = tuple(items)
    if not items:
        return [()]
    first, rest = items[0], items[1:]
    out = []
    for sub in set_partitions(rest):
        out.append(((first,),) + sub)
        for i in range(len(sub)):
            out.append(sub[:i] + ((first,) + sub[i],) + sub[i + 1 :])
    return sorted(tuple(sorted(p)) for p in out)


@dataclass(frozen=True)
class FusionGroupSet:
    attn_partition: tuple[tuple[str, ...], ...]
    mlp_partition: tuple[tuple[str, ...], ...]
    singletons: tuple[tuple[str, ...], ...] = ()
    block_id: str = ""

    @property
    def groups(self) -> tuple[tuple[str, ...], ...]:
        return self.attn_partition + self.mlp_partition + self.singletons

    def members(self) -> list[str]:
        return [r for g in self.groups for r in g]


def fusion_group_sets(roles, block_id: str = "") -> list[FusionGroupSet]:
    """Every group set for a block holding ``roles`` (5 x 2 for a full block)."""
    roles = set(roles)
    unknown = roles - set(ROLE_ORDER)
    if unknown:
        raise InvalidInput(f"unknown layer roles {sorted(unknown)}")
    fam = [tuple(r for r in f if r in roles) for f in FUSIBLE]
    solo = tuple((r,) for r in SOLO if r in roles)
    return [FusionGroupSet(a, m, solo, block_id) for a, m in itertools.product(set_partitions(fam[0]), set_partitions(fam[1]))]


@dataclass
class BlockCatalog:
    """One block's layers: role -> (d_in, d_out), and per (role, quantizer) loss."""

    block_id: str
    dims: dict[str, tuple[int, int]]
    losses: dict[tuple[str, str], float]
    quantizers: dict[str, float] = field(default_factory=dict)  # id -> bits

    def __post_init__(self):
        self.block_id = str(self.block_id)
        for role in self.dims:
            for qid in self.quantizers:
                if (role, qid) not in self.losses:
                    raise InvalidInput(f"block {self.block_id}: no loss for layer {role} with quantizer {qid}")

    @property
    def roles(self) -> list[str]:
        return sorted(self.dims, key=ROLE_ORDER.__getitem__)

    def group_loss(self, group, qid: str) -> float:
        return sum(self.losses[(r, qid)] for r in group)

    @classmethod
    def from_json(cls, obj: dict, quantizers: dict[str, float]) -> "BlockCatalog":
        dims, losses = {}, {}
        for role, d in obj["layers"].items():
            dims[role] = (int(d["d_in"]), int(d["d_out"]))
            for qid, loss in d["loss"].items():
                losses[(role, str(qid))] = float(loss)
        return cls(str(obj["block"]), dims, losses, dict(quantizers))

    def to_json(self) -> dict:
        return {
            "block": self.block_id,
            "layers": {
                r: {"d_in": self.dims[r][0], "d_out": self.dims[r][1], "loss": {q: self.losses[(r, q)] for q in self.quantizers}}
                for r in self.roles
            },
        }
