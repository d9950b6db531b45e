"""Candidate generation + FM scoring for recommendation and dissemination.

Both directions follow the same two steps: gather candidates from the
heterogeneous and homogeneous neighbours of the target's past engagements,
then rank them by the engagement likelihood predicted by an
:class:`~hcf.fm.FmModel`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError
from .fm import Direction, FmModel, Variant
from .similarity import DEFAULT_K, heterogeneous_neighbors, homogeneous_neighbors
from .store import EngagementEvent, EngagementStore, EntityId, Kind, Polarity


class Provenance(str, Enum):
    HETERO = "hetero"
    HOMO = "homo"
    BOTH = "both"
    FALLBACK = "fallback"

    @property
    def is_hetero(self) -> bool:
        return self in (Provenance.HETERO, Provenance.BOTH)


@dataclass(frozen=True)
class CandidateSet:
    target: EntityId
    members: dict  # EntityId -> Provenance, best similarity first
    best: dict     # EntityId -> best contributing similarity
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, eid) -> bool:
        return eid in self.members

    def ids(self) -> list[EntityId]:
        return list(self.members)


@dataclass(frozen=True)
class ScoredCandidate:
    entity: EntityId
    score: float
    provenance: Provenance


@dataclass(frozen=True)
class CandidateParams:
    k_per_seed: int = DEFAULT_K
    cap: int = 500
    floor: float = 0.0
    hetero: bool | None = None  # None: use heterogeneous seeds iff the model is HCF
    homo: bool = True
    hetero_quota: float | None = None
    fallback: bool = False

    def __post_init__(self):
        if self.k_per_seed < 1 or self.cap < 1:
            raise ContractError("k_per_seed and cap must be positive")
        if self.hetero_quota is not None and not 0.0 <= self.hetero_quota <= 1.0:
            raise ContractError("hetero_quota must lie in [0, 1]")


def _merge(target: EntityId, homo: dict, hetero: dict, exclude: set, cap: int) -> CandidateSet:
    best: dict[EntityId, float] = {}
    prov: dict[EntityId, Provenance] = {}
    for source, tag in ((homo, Provenance.HOMO), (hetero, Provenance.HETERO)):
        for eid, value in source.items():
            if eid in exclude:
                continue
            if eid in prov and prov[eid] is not tag:
                prov[eid] = Provenance.BOTH
            else:
                prov.setdefault(eid, tag)
            best[eid] = max(best.get(eid, 0.0), value)
    order = sorted(best, key=lambda e: (-best[e], e.id))[:cap]
    return CandidateSet(target, {e: prov[e] for e in order}, {e: best[e] for e in order})


def _collect(lists) -> dict[EntityId, float]:
    out: dict[EntityId, float] = {}
    for nl in lists:
        for s in nl:
            if s.value > out.get(s.b, 0.0):
                out[s.b] = s.value
    return out


def build_candidates_reco(store: EngagementStore, user: EntityId, k_per_seed: int = DEFAULT_K, cap: int = 500,
                          *, hetero: bool = True, homo: bool = True, floor: float = 0.0) -> CandidateSet:
    """Items similar to the user's past engagements.

    Homogeneous seeds are the user's positively engaged items, heterogeneous
    seeds their negatively engaged items.  Items the user already liked are
    never candidates.
    """
    store.check(user)
    if user.kind is not Kind.USER:
        raise ContractError("recommendation targets must be users")
    pos, _ = store.row(Kind.USER, user.id, Polarity.POSITIVE)
    neg, _ = store.row(Kind.USER, user.id, Polarity.NEGATIVE)
    homo_c = _collect(homogeneous_neighbors(store, EntityId(Kind.ITEM, i), Polarity.POSITIVE, k_per_seed, floor)
                      for i in pos.tolist()) if homo else {}
    hetero_c = _collect(heterogeneous_neighbors(store, EntityId(Kind.ITEM, i), k_per_seed, floor)
                        for i in neg.tolist()) if hetero else {}
    exclude = {EntityId(Kind.ITEM, i) for i in pos.tolist()}
    return _merge(user, homo_c, hetero_c, exclude, cap)


def build_candidates_dism(store: EngagementStore, item: EntityId, k_per_seed: int = DEFAULT_K, cap: int = 500,
                          *, hetero: bool = True, homo: bool = True, floor: float = 0.0,
                          exposed: Iterable[int] = ()) -> CandidateSet:
    """Users similar to the item's past audience.

    Homogeneous seeds are users positive on the item, heterogeneous seeds
    users negative on it.  Users who already engaged with the item, or
    appear in ``exposed``, are never candidates.
    """
    store.check(item)
    if item.kind is not Kind.ITEM:
        raise ContractError("dissemination targets must be items")
    pos, _ = store.row(Kind.ITEM, item.id, Polarity.POSITIVE)
    neg, _ = store.row(Kind.ITEM, item.id, Polarity.NEGATIVE)
    homo_c = _collect(homogeneous_neighbors(store, EntityId(Kind.USER, u), Polarity.POSITIVE, k_per_seed, floor)
                      for u in pos.tolist()) if homo else {}
    hetero_c = _collect(heterogeneous_neighbors(store, EntityId(Kind.USER, u), k_per_seed, floor)
                        for u in neg.tolist()) if hetero else {}
    exclude = {EntityId(Kind.USER, u) for u in (*pos.tolist(), *neg.tolist(), *exposed)}
    return _merge(item, homo_c, hetero_c, exclude, cap)


def _popular(store: EngagementStore, kind: Kind, exclude: set, cap: int) -> list[EntityId]:
    counts = store.degree(kind, Polarity.POSITIVE)
    order = np.lexsort((np.arange(len(counts)), -counts))
    out = []
    for idx in order.tolist():
        eid = EntityId(kind, idx)
        if eid not in exclude:
            out.append(eid)
            if len(out) == cap:
                break
    return out


def _use_hetero(params: CandidateParams, model: FmModel) -> bool:
    return model.variant is Variant.HCF if params.hetero is None else params.hetero


def rank(model: FmModel, store: EngagementStore, target: EntityId, cands: CandidateSet) -> list[ScoredCandidate]:
    """Score every candidate and sort by (score desc, id asc)."""
    ids = cands.ids()
    if not ids:
        return []
    scores = model.score_pairs(store, [(target, c) for c in ids])
    scored = [ScoredCandidate(c, float(s), cands.members[c]) for c, s in zip(ids, scores)]
    scored.sort(key=lambda sc: (-sc.score, sc.entity.id))
    return scored


def _top(scored: list[ScoredCandidate], n: int, quota: float | None) -> list[ScoredCandidate]:
    if quota is None or not scored:
        return scored[:n]
    need = math.ceil(quota * n)
    reserved = [s for s in scored if s.provenance.is_hetero][:need]
    chosen = {s.entity for s in reserved}
    for s in scored:
        if len(chosen) >= n:
            break
        chosen.add(s.entity)
    return [s for s in scored if s.entity in chosen][:n]


def _candidates_or_fallback(cands: CandidateSet, store: EngagementStore, kind: Kind, exclude: set,
                            params: CandidateParams) -> CandidateSet:
    if len(cands) or not params.fallback:
        return cands
    popular = _popular(store, kind, exclude, params.cap)
    return CandidateSet(cands.target, {e: Provenance.FALLBACK for e in popular}, {e: 0.0 for e in popular}, fallback=True)


def recommend(store: EngagementStore, model: FmModel, user: EntityId, n: int,
              params: CandidateParams = CandidateParams()) -> list[ScoredCandidate]:
    """Top-``n`` items for ``user``: candidate generation then FM ranking."""
    if model.direction is not Direction.RECOMMENDATION:
        raise ContractError("recommend needs a recommendation-direction model")
    if n < 0:
        raise ContractError("n must be non-negative")
    cands = build_candidates_reco(store, user, params.k_per_seed, params.cap, hetero=_use_hetero(params, model),
                                  homo=params.homo, floor=params.floor)
    if n == 0:
        return []
    liked = {EntityId(Kind.ITEM, i) for i in store.row(Kind.USER, user.id, Polarity.POSITIVE)[0].tolist()}
    cands = _candidates_or_fallback(cands, store, Kind.ITEM, liked, params)
    return _top(rank(model, store, user, cands), n, params.hetero_quota)


# -- dissemination ---------------------------------------------------------------

@dataclass(frozen=True)
class DisseminationParams:
    cohort_size: int = 10
    grow_threshold: float = 0.5
    shrink_threshold: float = 0.2
    growth_factor: float = 2.0
    shrink_factor: float = 0.5
    max_cohort_size: int | None = None
    candidates: CandidateParams = CandidateParams(fallback=True)

    def __post_init__(self):
        if self.cohort_size < 1:
            raise ContractError("cohort_size must be positive")
        if not self.shrink_threshold <= self.grow_threshold:
            raise ContractError("shrink_threshold must not exceed grow_threshold")
        if self.growth_factor < 1.0 or not 0.0 < self.shrink_factor <= 1.0:
            raise ContractError("growth_factor must be >= 1 and shrink_factor in (0, 1]")
        if self.max_cohort_size is not None and self.max_cohort_size < self.cohort_size:
            raise ContractError("max_cohort_size must be at least cohort_size")


@dataclass(frozen=True)
class DisseminationState:
    item: EntityId
    iteration: int
    exposed: frozenset
    responses: tuple = ()
    cohort_size: int = 10
    last_responses: tuple = ()
    stalled: bool = False

    @property
    def positive_rate(self) -> float | None:
        """Cumulative positive rate over all collected responses."""
        if not self.responses:
            return None
        return sum(e.polarity is Polarity.POSITIVE for e in self.responses) / len(self.responses)


def initial_state(store: EngagementStore, item: EntityId, cohort_size: int = 10) -> DisseminationState:
    """Starting point: everyone who already engaged with ``item`` counts as exposed."""
    store.check(item)
    seen = set()
    for pol in Polarity:
        seen.update(store.row(Kind.ITEM, item.id, pol)[0].tolist())
    return DisseminationState(item, 0, frozenset(seen), (), cohort_size)


def adjust_cohort_size(size: int, responses, params: DisseminationParams) -> int:
    if not responses:
        return size
    rate = sum(Polarity(e.polarity) is Polarity.POSITIVE for e in responses) / len(responses)
    if rate >= params.grow_threshold:
        grown = math.ceil(size * params.growth_factor)
        return grown if params.max_cohort_size is None else min(grown, params.max_cohort_size)
    if rate < params.shrink_threshold:
        return max(1, math.floor(size * params.shrink_factor))
    return size


def disseminate_step(state: DisseminationState, store: EngagementStore, model: FmModel,
                     params: DisseminationParams = DisseminationParams()
                     ) -> tuple[list[ScoredCandidate], DisseminationState]:
    """Pick the next cohort of users to show ``state.item`` to.

    The cohort size first reacts to the positive rate of the previous
    cohort's responses, then the best-scored unexposed candidates fill it.
    """
    if model.direction is not Direction.DISSEMINATION:
        raise ContractError("disseminate_step needs a dissemination-direction model")
    cp = params.candidates
    size = adjust_cohort_size(state.cohort_size, state.last_responses, params)
    cands = build_candidates_dism(store, state.item, cp.k_per_seed, cp.cap, hetero=_use_hetero(cp, model),
                                  homo=cp.homo, floor=cp.floor, exposed=state.exposed)
    blocked = {EntityId(Kind.USER, u) for u in state.exposed}
    cands = _candidates_or_fallback(cands, store, Kind.USER, blocked, cp)
    if not len(cands):
        return [], replace(state, stalled=True, last_responses=())
    cohort = _top(rank(model, store, state.item, cands), size, cp.hetero_quota)
    nxt = replace(state, iteration=state.iteration + 1, exposed=state.exposed | {c.entity.id for c in cohort},
                  cohort_size=size, last_responses=(), stalled=False)
    return cohort, nxt


def record_responses(state: DisseminationState, events: Iterable[EngagementEvent]) -> DisseminationState:
    events = tuple(events)
    for e in events:
        if e.item != state.item.id or e.user not in state.exposed:
            raise ContractError("responses must come from exposed users on the disseminated item")
    return replace(state, responses=state.responses + events, last_responses=events)


@dataclass
class IterationLog:
    iteration: int
    cohort: list[str]
    positive_rate: float | None
    cohort_size: int

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "cohort": self.cohort,
                           "positive_rate": self.positive_rate, "cohort_size": self.cohort_size})


ResponseFn = Callable[[EntityId, EntityId], Polarity]


def run_dissemination(store: EngagementStore, model: FmModel, item: EntityId, iterations: int,
                      params: DisseminationParams = DisseminationParams(), response_oracle: ResponseFn | None = None
                      ) -> tuple[DisseminationState, list[IterationLog]]:
    """Iterate cohort selection, feeding each cohort's responses back as events."""
    if iterations < 0:
        raise ContractError("iterations must be non-negative")
    state = initial_state(store, item, params.cohort_size)
    logs: list[IterationLog] = []
    if iterations and response_oracle is None:
        raise ContractError("run_dissemination needs a response oracle")
    for it in range(iterations):
        cohort, state = disseminate_step(state, store, model, params)
        events = [EngagementEvent(c.entity.id, item.id, Polarity(response_oracle(c.entity, item)), 1.0, it + 1)
                  for c in cohort]
        state = record_responses(state, events)
        store = store.with_events(events)
        rate = sum(e.polarity is Polarity.POSITIVE for e in events) / len(events) if events else None
        logs.append(IterationLog(it, [store.key_of(c.entity) for c in cohort], rate, state.cohort_size))
    return state, logs


def write_log(logs: Iterable[IterationLog], stream) -> None:
    for entry in logs:
        stream.write(entry.to_json() + "\n")
