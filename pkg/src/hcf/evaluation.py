"""Offline evaluation: ROC AUC, scenario splits and paired CCF/HCF reports.

The split protocol is an offline stand-in for daily retraining on
production logs: a seeded, polarity-stratified event holdout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ScenarioError, UndefinedMetricError
from .fm import Direction, TrainConfig, Variant, fit
from .store import EngagementEvent, EngagementStore, EntityId, Kind, Polarity, events_of
from .synthgen import make_rng

PROTOCOL = "offline seeded event holdout"


class LabeledScore(NamedTuple):
    score: float
    label: int


def auc(points: Iterable[tuple[float, int]]) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    pts = list(points)
    scores = np.array([p[0] for p in pts], dtype=np.float64)
    labels = np.array([p[1] for p in pts])
    return auc_arrays(scores, labels)


def auc_arrays(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative point")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class ScenarioName(str, Enum):
    RECO_ALL = "reco-all"
    RECO_NEW = "reco-new"
    DISM_NEW = "dism-new"

    @property
    def direction(self) -> Direction:
        return Direction.DISSEMINATION if self is ScenarioName.DISM_NEW else Direction.RECOMMENDATION


@dataclass(frozen=True)
class Scenario:
    name: ScenarioName = ScenarioName.RECO_ALL
    holdout: float = 0.2
    rng_seed: int = 0
    freshness_cutoff: int = 3

    def __post_init__(self):
        object.__setattr__(self, "name", ScenarioName(self.name))
        if not 0.0 < self.holdout < 1.0:
            raise ScenarioError(f"holdout fraction must lie in (0, 1), got {self.holdout}")
        if self.freshness_cutoff < 0:
            raise ScenarioError("freshness_cutoff must be >= 0")


def _stratified_holdout(polarity: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = len(polarity)
    strata = [np.flatnonzero(polarity == int(p)) for p in (Polarity.POSITIVE, Polarity.NEGATIVE)]
    want = [fraction * len(s) for s in strata]
    take = [int(np.floor(x)) for x in want]
    # largest remainder up to round(fraction * n) in total
    short = int(round(fraction * n)) - sum(take)
    for j in sorted(range(2), key=lambda j: -(want[j] - take[j]))[:max(short, 0)]:
        if take[j] < len(strata[j]):
            take[j] += 1
    test = np.zeros(n, dtype=bool)
    for s, t in zip(strata, take):
        test[rng.permutation(s)[:t]] = True
    return test


def split(store: EngagementStore, scenario: Scenario) -> tuple[EngagementStore, list[EngagementEvent]]:
    """Seeded holdout; returns the training store and the scenario's test events.

    For the "new" scenarios, held-out events whose user (RecoNew) or item
    (DismNew) has more than ``freshness_cutoff`` training events are dropped
    from the test set; they are not returned to training, so every scenario
    shares one training store per seed.
    """
    rng = make_rng(scenario.rng_seed)
    test = _stratified_holdout(store.polarity, scenario.holdout, rng)
    train = store.subset(~test)
    test_idx = np.flatnonzero(test)
    if scenario.name is ScenarioName.RECO_NEW:
        counts = train.degree(Kind.USER)
        test_idx = test_idx[counts[store.users[test_idx]] <= scenario.freshness_cutoff]
    elif scenario.name is ScenarioName.DISM_NEW:
        counts = train.degree(Kind.ITEM)
        test_idx = test_idx[counts[store.items[test_idx]] <= scenario.freshness_cutoff]
    if train.n_events == 0 or len(test_idx) == 0:
        raise ScenarioError(f"scenario {scenario.name.value}: empty train or test side after restriction")
    return train, events_of(store, test_idx)


@dataclass
class EvalReport:
    scenario: str
    auc_ccf: float
    auc_hcf: float
    relative: float
    n_test: int
    seed: int
    protocol: str = PROTOCOL
    extra: dict = field(default_factory=dict)

    @property
    def gain(self) -> float:
        return self.auc_hcf - self.auc_ccf

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _pairs(events: Sequence[EngagementEvent], direction: Direction) -> list[tuple[EntityId, EntityId]]:
    if direction is Direction.RECOMMENDATION:
        return [(EntityId(Kind.USER, e.user), EntityId(Kind.ITEM, e.item)) for e in events]
    return [(EntityId(Kind.ITEM, e.item), EntityId(Kind.USER, e.user)) for e in events]


def evaluate_split(train: EngagementStore, test: Sequence[EngagementEvent], scenario: Scenario,
                   cfg: TrainConfig = TrainConfig()) -> EvalReport:
    """Train both variants on ``train`` and compare AUC on ``test``."""
    direction = scenario.name.direction
    labels = np.array([Polarity(e.polarity).label for e in test])
    if labels.size == 0 or labels.min() == labels.max():
        raise UndefinedMetricError(f"scenario {scenario.name.value}: test set holds a single class")
    pairs = _pairs(test, direction)
    aucs = {}
    for variant in (Variant.CCF, Variant.HCF):
        model = fit(train, variant, direction, cfg).model
        aucs[variant] = auc_arrays(model.score_pairs(train, pairs), labels)
    return EvalReport(scenario.name.value, aucs[Variant.CCF], aucs[Variant.HCF],
                      100.0 * aucs[Variant.HCF] / aucs[Variant.CCF], len(test), scenario.rng_seed,
                      extra={"n_test_pos": int(labels.sum()), "train_events": train.n_events})


def evaluate_pair(store: EngagementStore, scenario: Scenario, cfg: TrainConfig = TrainConfig()) -> EvalReport:
    train, test = split(store, scenario)
    return evaluate_split(train, test, scenario, cfg)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Text table of relative AUC, CCF as the 100% baseline."""
    rows = [("problem", "seed", "CCF AUC", "HCF AUC", "CCF", "HCF (relative)")]
    for r in reports:
        delta = r.relative - 100.0
        arrow = "+" if delta >= 0 else "-"
        rows.append((r.scenario, str(r.seed), f"{r.auc_ccf:.4f}", f"{r.auc_hcf:.4f}", "100%",
                     f"{r.relative:.1f}% ({arrow}{abs(delta):.1f}%)"))
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append(f"({PROTOCOL})")
    return "\n".join(lines)


# -- dissemination policies ----------------------------------------------------------

@dataclass
class DisseminationReport:
    seed: int
    items: list[int]
    iterations: int
    rate_ccf: float
    rate_hcf: float
    responses_ccf: int
    responses_hcf: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare_dissemination(store: EngagementStore, truth, seed: int, iterations: int = 10, n_items: int = 10,
                          params=None, cfg: TrainConfig | None = None) -> DisseminationReport:
    """Run the CCF and HCF dissemination policies on the same new items.

    A policy is a model variant together with its candidate generator: the
    CCF policy only expands from positive responders, the HCF policy also
    from negative ones.  Responses come from the ground-truth oracle with
    common random numbers: each (item, user) pair owns a substream, so a
    user exposed under both policies answers the same way.
    """
    from .pipelines import DisseminationParams, run_dissemination
    from .synthgen import pair_stream, response_oracle

    params = params or DisseminationParams()
    cfg = cfg or TrainConfig(rng_seed=seed)
    items = sorted(int(i) for i in truth.new_items)[:n_items]
    if not items:
        raise ScenarioError("no new items to disseminate")
    rates = {}
    for variant in (Variant.CCF, Variant.HCF):
        model = fit(store, variant, Direction.DISSEMINATION, cfg).model
        pos = total = 0
        for i in items:
            state, _ = run_dissemination(store, model, EntityId(Kind.ITEM, i), iterations, params,
                                         lambda u, it: response_oracle(truth, u, it, pair_stream(seed, it, u)))
            pos += sum(e.polarity is Polarity.POSITIVE for e in state.responses)
            total += len(state.responses)
        rates[variant] = (pos / total if total else 0.0, total)
    return DisseminationReport(seed, items, iterations, rates[Variant.CCF][0], rates[Variant.HCF][0],
                               rates[Variant.CCF][1], rates[Variant.HCF][1])
