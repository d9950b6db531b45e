"""Second-order factorization machine over signed-engagement features.

A training or scoring instance pairs a *target* entity with a *candidate*
of the opposite kind.  Its active features are the target, the candidate,
and the target's engagement history split into a positive bank and (for
the HCF variant) a negative bank.  Because the two banks occupy distinct
columns, the pairwise term ``<v_candidate, v_(e, NEG_HISTORY)>`` models the
interaction between a negative past engagement and a positive future one.

Every score goes through one numba kernel, so a score computed during
evaluation is bit-identical to the same score computed anywhere else.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numba
import numpy as np

from .errors import ContractError, TrainingError
from .store import EngagementStore, EntityId, Kind, Polarity

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class Role(str, Enum):
    TARGET = "target"
    CANDIDATE = "candidate"
    POS_HISTORY = "pos_history"
    NEG_HISTORY = "neg_history"


class Variant(str, Enum):
    CCF = "ccf"
    HCF = "hcf"


class Direction(str, Enum):
    RECOMMENDATION = "reco"
    DISSEMINATION = "dism"

    @property
    def target_kind(self) -> Kind:
        return Kind.USER if self is Direction.RECOMMENDATION else Kind.ITEM


class Link(str, Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


class FeatureKey(NamedTuple):
    entity: EntityId
    role: Role


_ROLES = tuple(Role)


class FeatureIndex:
    """Frozen bijection between feature keys and column numbers."""

    def __init__(self, keys: Iterable[FeatureKey]):
        self.keys: tuple[FeatureKey, ...] = tuple(FeatureKey(EntityId(Kind(k.entity.kind), int(k.entity.id)), Role(k.role))
                                                  for k in keys)
        self._col = {key: c for c, key in enumerate(self.keys)}
        if len(self._col) != len(self.keys):
            raise ContractError("duplicate feature keys")
        # dense lookup tables per (role, kind); -1 marks an absent slot
        self._tables: dict[tuple[Role, Kind], np.ndarray] = {}
        for role in _ROLES:
            for kind in Kind:
                ids = [key.entity.id for key in self.keys if key.role is role and key.entity.kind is kind]
                table = np.full(max(ids, default=-1) + 1, -1, dtype=np.int64)
                for key in self.keys:
                    if key.role is role and key.entity.kind is kind:
                        table[key.entity.id] = self._col[key]
                self._tables[role, kind] = table

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self._col

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureIndex) and self.keys == other.keys

    def column(self, key: FeatureKey) -> int:
        return self._col[key]

    def columns(self, role: Role, kind: Kind, ids: np.ndarray) -> np.ndarray:
        """Vectorised lookup; unknown ids map to -1."""
        table = self._tables[role, kind]
        ids = np.asarray(ids, dtype=np.int64)
        out = np.full(len(ids), -1, dtype=np.int64)
        ok = ids < len(table)
        out[ok] = table[ids[ok]]
        return out

    def has_role(self, role: Role) -> bool:
        return any(len(t) and (t >= 0).any() for (r, _), t in self._tables.items() if r is role)

    def vectorize(self, features: dict) -> "FeatureVector":
        """Map keyed features to columns, dropping keys the index does not know."""
        pairs = [(self._col[k], v) for k, v in features.items() if k in self._col]
        return FeatureVector.from_pairs(pairs)

    @classmethod
    def for_store(cls, store: EngagementStore, variant: Variant, direction: Direction) -> "FeatureIndex":
        target_kind = direction.target_kind
        cand_kind = target_kind.other
        keys = [FeatureKey(EntityId(target_kind, i), Role.TARGET) for i in range(store.n_of(target_kind))]
        keys += [FeatureKey(EntityId(cand_kind, i), Role.CANDIDATE) for i in range(store.n_of(cand_kind))]
        pos_deg = store.degree(cand_kind, Polarity.POSITIVE)
        keys += [FeatureKey(EntityId(cand_kind, int(i)), Role.POS_HISTORY) for i in np.flatnonzero(pos_deg)]
        if variant is Variant.HCF:
            neg_deg = store.degree(cand_kind, Polarity.NEGATIVE)
            keys += [FeatureKey(EntityId(cand_kind, int(i)), Role.NEG_HISTORY) for i in np.flatnonzero(neg_deg)]
        return cls(keys)


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ContractError("indices and values must be 1-d and of equal length")
        if len(idx) > 1 and not np.all(np.diff(idx) > 0):
            raise ContractError("feature indices must be strictly ascending")
        if len(idx) and idx[0] < 0:
            raise ContractError("negative feature index")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "FeatureVector":
        pairs = sorted(pairs)
        return cls(np.array([p[0] for p in pairs], dtype=np.int64), np.array([p[1] for p in pairs], dtype=np.float64))

    def __len__(self) -> int:
        return len(self.indices)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))


# -- encoding ------------------------------------------------------------------

def _history(store: EngagementStore, target: EntityId, polarity: Polarity, drop: int | None) -> np.ndarray:
    nbr, _ = store.row(target.kind, target.id, polarity)
    if drop is not None:
        nbr = nbr[nbr != drop]
    return nbr


def encode(store: EngagementStore, target: EntityId, candidate: EntityId, variant: Variant | str = Variant.HCF,
           exclude: tuple[EntityId, Polarity] | None = None) -> dict[FeatureKey, float]:
    """Keyed feature map for one (target, candidate) pair.

    ``exclude`` names one of the target's engagements to leave out of its
    history (leave-one-out for training instances).
    """
    variant = Variant(variant)
    store.check(target)
    store.check(candidate)
    if target.kind is candidate.kind:
        raise ContractError(f"target and candidate must differ in kind, both are {target.kind.value}")
    feats = {FeatureKey(target, Role.TARGET): 1.0, FeatureKey(candidate, Role.CANDIDATE): 1.0}
    banks = [(Polarity.POSITIVE, Role.POS_HISTORY)]
    if variant is Variant.HCF:
        banks.append((Polarity.NEGATIVE, Role.NEG_HISTORY))
    for pol, role in banks:
        drop = exclude[0].id if exclude is not None and Polarity(exclude[1]) is pol else None
        hist = _history(store, target, pol, drop)
        if len(hist):
            value = 1.0 / len(hist)
            for e in hist.tolist():
                feats[FeatureKey(EntityId(candidate.kind, e), role)] = value
    return feats


class _Encoder:
    """Column-level encoder used by training and batch scoring."""

    def __init__(self, store: EngagementStore, index: FeatureIndex, use_negative: bool, direction: Direction):
        self.store = store
        self.index = index
        self.use_negative = use_negative
        self.tkind = direction.target_kind
        self.ckind = self.tkind.other

    def batch(self, rows: Sequence[tuple[int, int, Polarity | None]]):
        """CSR arrays for (target, candidate, excluded polarity) rows.

        An excluded polarity drops the row's candidate from that history bank
        of the target (leave-one-out); the bank value is 1/size after the drop.
        """
        n = len(rows)
        t = np.fromiter((r[0] for r in rows), dtype=np.int64, count=n)
        c = np.fromiter((r[1] for r in rows), dtype=np.int64, count=n)
        drop = np.fromiter((0 if r[2] is None else int(r[2]) for r in rows), dtype=np.int64, count=n)
        return self.arrays(t, c, drop)

    def arrays(self, t: np.ndarray, c: np.ndarray, drop: np.ndarray):
        """Array form of :meth:`batch`; ``drop`` holds a polarity value or 0."""
        n = len(t)
        row_parts = [np.arange(n), np.arange(n)]
        col_parts = [self.index.columns(Role.TARGET, self.tkind, t), self.index.columns(Role.CANDIDATE, self.ckind, c)]
        val_parts = [np.ones(n), np.ones(n)]
        banks = [(Polarity.POSITIVE, Role.POS_HISTORY)]
        if self.use_negative:
            banks.append((Polarity.NEGATIVE, Role.NEG_HISTORY))
        for pol, role in banks:
            adj = self.store._adj[self.tkind, pol]
            lo, hi = adj.indptr[t], adj.indptr[t + 1]
            lens = hi - lo
            rid = np.repeat(np.arange(n), lens)
            pos = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(lo, lens)
            nbr = adj.nbr[pos]
            keep = ~((drop[rid] == int(pol)) & (nbr == c[rid]))
            size = np.bincount(rid[keep], minlength=n)
            rid, nbr = rid[keep], nbr[keep]
            row_parts.append(rid)
            col_parts.append(self.index.columns(role, self.ckind, nbr))
            with np.errstate(divide="ignore"):
                val_parts.append(1.0 / size[rid])
        rid = np.concatenate(row_parts)
        cols = np.concatenate(col_parts)
        vals = np.concatenate(val_parts)
        ok = cols >= 0
        rid, cols, vals = rid[ok], cols[ok], vals[ok]
        order = np.lexsort((cols, rid))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rid, minlength=n), out=indptr[1:])
        return indptr, cols[order], vals[order].astype(np.float64)


# -- kernels ---------------------------------------------------------------------

@numba.njit(cache=True)
def _raw_batch(indptr, cols, vals, bias, linear, factors):
    k = factors.shape[1]
    out = np.empty(indptr.shape[0] - 1)
    s = np.empty(k)
    for r in range(out.shape[0]):
        raw = bias
        for f in range(k):
            s[f] = 0.0
        sq = 0.0
        for p in range(indptr[r], indptr[r + 1]):
            j = cols[p]
            x = vals[p]
            raw += linear[j] * x
            for f in range(k):
                vx = factors[j, f] * x
                s[f] += vx
                sq += vx * vx
        inter = 0.0
        for f in range(k):
            inter += s[f] * s[f]
        out[r] = raw + 0.5 * (inter - sq)
    return out


@numba.njit(cache=True)
def _sgd_epoch(indptr, cols, vals, y, perm, bias, linear, factors, lr, l2_w, l2_v):
    k = factors.shape[1]
    s = np.empty(k)
    total = 0.0
    for t in range(perm.shape[0]):
        r = perm[t]
        lo = indptr[r]
        hi = indptr[r + 1]
        raw = bias[0]
        for f in range(k):
            s[f] = 0.0
        sq = 0.0
        for p in range(lo, hi):
            j = cols[p]
            x = vals[p]
            raw += linear[j] * x
            for f in range(k):
                vx = factors[j, f] * x
                s[f] += vx
                sq += vx * vx
        inter = 0.0
        for f in range(k):
            inter += s[f] * s[f]
        raw += 0.5 * (inter - sq)

        yy = y[r]
        if raw >= 0.0:
            e = math.exp(-raw)
            total += math.log1p(e) + (1.0 - yy) * raw
            prob = 1.0 / (1.0 + e)
        else:
            e = math.exp(raw)
            total += math.log1p(e) - yy * raw
            prob = e / (1.0 + e)
        g = prob - yy

        bias[0] -= lr * g
        for p in range(lo, hi):
            j = cols[p]
            x = vals[p]
            linear[j] -= lr * (g * x + l2_w * linear[j])
            for f in range(k):
                v_jf = factors[j, f]
                factors[j, f] = v_jf - lr * (g * x * (s[f] - v_jf * x) + l2_v * v_jf)
    return total


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# -- model ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FmModel:
    bias: float
    linear: np.ndarray
    factors: np.ndarray
    index: FeatureIndex
    link: Link = Link.SIGMOID

    def __post_init__(self):
        linear = np.ascontiguousarray(self.linear, dtype=np.float64)
        factors = np.ascontiguousarray(self.factors, dtype=np.float64)
        if factors.ndim != 2 or factors.shape[1] < 1:
            raise ContractError("factors must be an n x k matrix with k >= 1")
        if not (len(linear) == factors.shape[0] == len(self.index)):
            raise ContractError(f"inconsistent dimensions: |linear|={len(linear)}, "
                                f"rows(factors)={factors.shape[0]}, |index|={len(self.index)}")
        if not (math.isfinite(self.bias) and np.all(np.isfinite(linear)) and np.all(np.isfinite(factors))):
            raise ContractError("model parameters must be finite")
        linear.setflags(write=False)
        factors.setflags(write=False)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "link", Link(self.link))

    @property
    def n_features(self) -> int:
        return len(self.linear)

    @property
    def k(self) -> int:
        return self.factors.shape[1]

    @property
    def variant(self) -> Variant:
        """HCF iff the model carries negative-history slots."""
        return Variant.HCF if self.index.has_role(Role.NEG_HISTORY) else Variant.CCF

    @property
    def direction(self) -> Direction:
        for key in self.index.keys:
            if key.role is Role.TARGET:
                return Direction.RECOMMENDATION if key.entity.kind is Kind.USER else Direction.DISSEMINATION
        raise ContractError("model has no target slots")

    def same_as(self, other: "FmModel") -> bool:
        """Bit-level equality of parameters, index and link."""
        return (self.bias == other.bias and self.link == other.link and self.index == other.index
                and self.linear.tobytes() == other.linear.tobytes()
                and self.factors.tobytes() == other.factors.tobytes())

    def featurize(self, store: EngagementStore, target: EntityId, candidate: EntityId,
                  exclude: tuple[EntityId, Polarity] | None = None) -> FeatureVector:
        return self.index.vectorize(encode(store, target, candidate, self.variant, exclude))

    def encoder(self, store: EngagementStore) -> _Encoder:
        return _Encoder(store, self.index, self.variant is Variant.HCF, self.direction)

    def raw_batch(self, indptr, cols, vals) -> np.ndarray:
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n_features):
            raise ContractError("feature index out of range")
        return _raw_batch(indptr, cols, vals, self.bias, self.linear, self.factors)

    def apply_link(self, raw):
        return sigmoid(raw) if self.link is Link.SIGMOID else np.asarray(raw, dtype=np.float64)

    def score_pairs(self, store: EngagementStore, pairs: Sequence[tuple[EntityId, EntityId]]) -> np.ndarray:
        """Scores for many (target, candidate) pairs against ``store``'s history."""
        if not pairs:
            return np.zeros(0)
        tkind = self.direction.target_kind
        for t, c in pairs:
            store.check(t)
            store.check(c)
            if t.kind is not tkind or c.kind is tkind:
                raise ContractError(f"pair {t!r}, {c!r} does not match the model direction {self.direction.value}")
        rows = [(t.id, c.id, None) for t, c in pairs]
        return self.apply_link(self.raw_batch(*self.encoder(store).batch(rows)))

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "k": self.k,
            "link": self.link.value,
            "index": [[key.entity.kind.value, key.entity.id, key.role.value] for key in self.index.keys],
            "bias": self.bias,
            "linear": self.linear.tolist(),
            "factors": self.factors.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FmModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported model format_version {doc.get('format_version')!r}")
        index = FeatureIndex(FeatureKey(EntityId(Kind(kind), int(i)), Role(role)) for kind, i, role in doc["index"])
        k = int(doc["k"])
        factors = np.array(doc["factors"], dtype=np.float64).reshape(len(index), k)
        return cls(float(doc["bias"]), np.array(doc["linear"], dtype=np.float64), factors, index, Link(doc["link"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "FmModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "FmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def score(model: FmModel, x: FeatureVector) -> float:
    """Evaluate the model on one feature vector, link applied."""
    if len(x) and x.indices[-1] >= model.n_features:
        raise ContractError(f"feature index {int(x.indices[-1])} out of range for n_features={model.n_features}")
    indptr = np.array([0, len(x)], dtype=np.int64)
    raw = _raw_batch(indptr, x.indices, x.values, model.bias, model.linear, model.factors)[0]
    return float(model.apply_link(raw))


@dataclass
class Gradient:
    bias: float
    linear: np.ndarray
    factors: np.ndarray


def gradient(model: FmModel, x: FeatureVector, label: int) -> Gradient:
    """Gradient of the logistic loss of ``sigmoid(raw(x))`` against ``label``."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label!r}")
    if len(x) and x.indices[-1] >= model.n_features:
        raise ContractError("feature index out of range")
    indptr = np.array([0, len(x)], dtype=np.int64)
    raw = _raw_batch(indptr, x.indices, x.values, model.bias, model.linear, model.factors)[0]
    g = float(sigmoid(raw)) - label
    g_linear = np.zeros(model.n_features)
    g_factors = np.zeros_like(model.factors)
    idx, val = x.indices, x.values
    s = (model.factors[idx] * val[:, None]).sum(axis=0)
    g_linear[idx] = g * val
    g_factors[idx] = g * val[:, None] * (s[None, :] - model.factors[idx] * val[:, None])
    return Gradient(g, g_linear, g_factors)


# -- training -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    k: int = 16
    epochs: int = 20
    learning_rate: float = 0.05
    l2_w: float = 1e-4
    l2_v: float = 1e-4
    init_sigma: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.epochs < 1:
            raise ContractError("k and epochs must be positive")
        if not (self.learning_rate > 0 and self.init_sigma > 0):
            raise ContractError("learning_rate and init_sigma must be positive")
        if self.l2_w < 0 or self.l2_v < 0:
            raise ContractError("l2 penalties must be non-negative")


@dataclass
class TrainResult:
    model: FmModel
    losses: list[float] = field(default_factory=list)


def training_instances(store: EngagementStore, index: FeatureIndex, variant: Variant, direction: Direction):
    """One leave-one-out instance per event: CSR features and 0/1 labels."""
    if direction is Direction.RECOMMENDATION:
        targets, cands = store.users, store.items
    else:
        targets, cands = store.items, store.users
    enc = _Encoder(store, index, variant is Variant.HCF, direction)
    indptr, cols, vals = enc.arrays(targets, cands, store.polarity.astype(np.int64))
    y = (store.polarity > 0).astype(np.float64)
    return indptr, cols, vals, y


def fit(store: EngagementStore, variant: Variant | str = Variant.HCF,
        direction: Direction | str = Direction.RECOMMENDATION, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train an FM with seeded SGD; returns the frozen model and per-epoch mean loss."""
    variant, direction = Variant(variant), Direction(direction)
    if store.n_events == 0:
        raise TrainingError("cannot train on an empty store")
    index = FeatureIndex.for_store(store, variant, direction)
    indptr, cols, vals, y = training_instances(store, index, variant, direction)

    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    bias = np.zeros(1)
    linear = np.zeros(len(index))
    factors = rng.normal(0.0, cfg.init_sigma, size=(len(index), cfg.k))
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(y))
        total = _sgd_epoch(indptr, cols, vals, y, perm, bias, linear, factors, cfg.learning_rate, cfg.l2_w, cfg.l2_v)
        mean = total / len(y)
        if not math.isfinite(mean) or not np.all(np.isfinite(factors)):
            raise TrainingError(f"non-finite loss in epoch {epoch}")
        losses.append(mean)
        log.debug("epoch %d loss %.6f", epoch, mean)
    return TrainResult(FmModel(float(bias[0]), linear, factors, index, Link.SIGMOID), losses)


def train(store: EngagementStore, variant: Variant | str = Variant.HCF,
          direction: Direction | str = Direction.RECOMMENDATION, cfg: TrainConfig = TrainConfig()) -> FmModel:
    return fit(store, variant, direction, cfg).model
