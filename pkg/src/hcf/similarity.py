"""Cosine similarity between single-polarity characteristic vectors.

Homogeneous neighbours compare two vectors of the same polarity.
Heterogeneous neighbours compare the seed's *negative* vector with each
peer's *positive* vector: peers liked by the people who rejected the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError
from .store import CharacteristicVector, EngagementStore, EntityId, Polarity

DEFAULT_K = 50


class Mode(str, Enum):
    HOMOGENEOUS = "homo"
    HETEROGENEOUS = "hetero"


@dataclass(frozen=True)
class SimilarityScore:
    a: EntityId
    b: EntityId
    value: float
    mode: Mode


@dataclass(frozen=True)
class NeighborList:
    seed: EntityId
    mode: Mode
    neighbors: tuple[SimilarityScore, ...]

    def __len__(self) -> int:
        return len(self.neighbors)

    def __iter__(self):
        return iter(self.neighbors)

    def ids(self) -> list[EntityId]:
        return [s.b for s in self.neighbors]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"seed": repr(self.seed), "mode": self.mode.value, "neighbor": repr(s.b), "value": s.value}) + "\n"
            for s in self.neighbors)


def _sq_norm_sorted(entries: dict) -> float:
    s = 0.0
    for key in sorted(entries):
        x = entries[key]
        s += x * x
    return s


def cosine(u: CharacteristicVector, v: CharacteristicVector) -> float:
    """Cosine of two characteristic vectors; 0.0 if either is empty."""
    if u.axis != v.axis:
        raise ContractError(f"vectors live on different axes: {u.axis.value} vs {v.axis.value}")
    su = _sq_norm_sorted(u.entries)
    sv = _sq_norm_sorted(v.entries)
    if su == 0.0 or sv == 0.0:
        return 0.0
    dot = 0.0
    # canonical order keeps cosine(u, v) == cosine(v, u) bit for bit
    for key in sorted(u.entries.keys() & v.entries.keys()):
        dot += u.entries[key] * v.entries[key]
    # one rounding in the denominator: identical vectors give exactly 1.0
    return dot / math.sqrt(su * sv)


def _neighbors(store: EngagementStore, seed: EntityId, seed_pol: Polarity, peer_pol: Polarity,
               k: int, mode: Mode, floor: float) -> NeighborList:
    store.check(seed)
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    kind, other = seed.kind, seed.kind.other
    cps, a = store.row(kind, seed.id, seed_pol)
    seed_sq = store.sq_norms(kind, seed_pol)[seed.id]
    if len(cps) == 0 or seed_sq == 0.0:
        return NeighborList(seed, mode, ())

    # only peers sharing a counterpart with the seed can score above zero
    adj = store._adj[other, peer_pol]
    lo, hi = adj.indptr[cps], adj.indptr[cps + 1]
    lens = hi - lo
    pos = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(lo, lens)
    peers = adj.nbr[pos]
    prods = np.repeat(a, lens) * adj.weight[pos]
    dot = np.zeros(store.n_of(kind))
    # np.add.at applies updates in order, i.e. ascending counterpart per peer
    np.add.at(dot, peers, prods)

    cand = np.unique(peers)
    cand = cand[cand != seed.id]
    peer_sq = store.sq_norms(kind, peer_pol)[cand]
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = dot[cand] / np.sqrt(seed_sq * peer_sq)
    keep = (peer_sq > 0) & (vals > floor)
    cand, vals = cand[keep], vals[keep]
    order = np.lexsort((cand, -vals))[:k]
    scores = tuple(SimilarityScore(seed, EntityId(kind, int(cand[j])), float(vals[j]), mode) for j in order)
    return NeighborList(seed, mode, scores)


def homogeneous_neighbors(store: EngagementStore, seed: EntityId, polarity: Polarity = Polarity.POSITIVE,
                          k: int = DEFAULT_K, floor: float = 0.0) -> NeighborList:
    """Top-``k`` same-kind peers by same-polarity cosine, excluding the seed.

    Only values strictly above ``floor`` are returned; ties are broken by
    ascending entity id.
    """
    return _neighbors(store, seed, polarity, polarity, k, Mode.HOMOGENEOUS, floor)


def heterogeneous_neighbors(store: EngagementStore, seed: EntityId, k: int = DEFAULT_K,
                            floor: float = 0.0) -> NeighborList:
    """Top-``k`` peers whose positive audience overlaps the seed's negative one."""
    return _neighbors(store, seed, Polarity.NEGATIVE, Polarity.POSITIVE, k, Mode.HETEROGENEOUS, floor)
