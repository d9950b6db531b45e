"""Seeded synthetic engagements with planted negative correlation.

Items belong to clusters whose centroids come in sign-flipped pairs
(``c_B = -c_A``), so a user who dislikes cluster A tends to like cluster B.
Polarity of a sampled (user, item) exposure is positive with probability
``sigmoid(<z_u, z_i> + bias)``, with ``bias`` solved by bisection to hit the
requested negative rate.

All randomness comes from numpy's Philox4x64-10 counter-based bit generator
keyed by the integer seed, so a seed names one exact event stream.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, NotFoundError
from .store import EngagementStore, EntityId, Kind, Polarity

RNG_ALGORITHM = "Philox4x64-10"
NEW_USER_MIN_EVENTS = 2
NEW_USER_MAX_EVENTS = 3
NEW_ITEM_MAX_EVENTS = 3


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``, optionally on a derived substream."""
    if stream:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(stream))))
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 2000
    n_items: int = 1000
    latent_dim: int = 8
    n_anti_clusters: int = 8
    events_per_user: int = 50
    new_user_fraction: float = 0.4
    negative_rate_target: float = 0.6
    rng_seed: int = 0
    new_item_fraction: float = 0.1
    separation: float = 2.5
    item_noise: float = 0.3

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim", "events_per_user"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.n_anti_clusters < 2:
            raise ContractError("n_anti_clusters must be >= 2")
        if self.n_anti_clusters // 2 > self.latent_dim:
            raise ContractError("latent_dim must hold one direction per cluster pair")
        if not 0.0 <= self.new_user_fraction < 1.0 or not 0.0 <= self.new_item_fraction < 1.0:
            raise ContractError("new_user_fraction and new_item_fraction must lie in [0, 1)")
        if not 0.0 < self.negative_rate_target < 1.0:
            raise ContractError("negative_rate_target must lie in (0, 1)")
        if self.separation < 0 or self.item_noise < 0:
            raise ContractError("separation and item_noise must be non-negative")
        n_old = self.n_items - round(self.new_item_fraction * self.n_items)
        if n_old < self.events_per_user:
            raise ContractError("not enough established items for events_per_user distinct exposures")


@dataclass
class GroundTruth:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    bias: float
    cluster_of_item: np.ndarray
    centroids: np.ndarray
    new_users: np.ndarray
    new_items: np.ndarray

    def logit(self, user: int, item: int) -> float:
        return float(self.user_vectors[user] @ self.item_vectors[item]) + self.bias

    def to_dict(self) -> dict:
        return {
            "rng_algorithm": RNG_ALGORITHM,
            "bias": self.bias,
            "user_vectors": self.user_vectors.tolist(),
            "item_vectors": self.item_vectors.tolist(),
            "cluster_of_item": self.cluster_of_item.tolist(),
            "centroids": self.centroids.tolist(),
            "new_users": self.new_users.tolist(),
            "new_items": self.new_items.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        return cls(np.array(doc["user_vectors"], dtype=np.float64), np.array(doc["item_vectors"], dtype=np.float64),
                   float(doc["bias"]), np.array(doc["cluster_of_item"], dtype=np.int64),
                   np.array(doc["centroids"], dtype=np.float64), np.array(doc["new_users"], dtype=np.int64),
                   np.array(doc["new_items"], dtype=np.int64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def paired_cluster(c: int, n_clusters: int) -> int | None:
    """Anti-cluster partner of cluster ``c`` (None for a trailing odd cluster)."""
    partner = c ^ 1
    return partner if partner < n_clusters else None


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def solve_bias(logits: np.ndarray, negative_rate: float, lo: float = -50.0, hi: float = 50.0, tol: float = 1e-10) -> float:
    """Bias ``b`` with ``mean(1 - sigmoid(logits + b)) == negative_rate``."""
    def neg_rate(b):
        return float(np.mean(1.0 - _expit(logits + b)))

    # neg_rate is decreasing in b
    if not neg_rate(hi) <= negative_rate <= neg_rate(lo):
        raise ContractError(f"negative_rate_target {negative_rate} is infeasible within bias bounds [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if neg_rate(mid) > negative_rate:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def generate(cfg: GenConfig = GenConfig()) -> tuple[EngagementStore, GroundTruth]:
    rng = make_rng(cfg.rng_seed)
    d, C = cfg.latent_dim, cfg.n_anti_clusters

    n_pairs = (C + 1) // 2
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    centroids = np.zeros((C, d))
    for c in range(C):
        direction = basis[:, c // 2]
        centroids[c] = cfg.separation * (direction if c % 2 == 0 else -direction)
    if C % 2 == 1 and n_pairs <= d:
        # the unpaired trailing cluster gets its own direction
        centroids[C - 1] = cfg.separation * basis[:, n_pairs - 1]

    clusters = rng.integers(0, C, size=cfg.n_items)
    item_vecs = centroids[clusters] + cfg.item_noise * rng.normal(size=(cfg.n_items, d))
    user_vecs = rng.normal(size=(cfg.n_users, d))

    n_new_users = round(cfg.new_user_fraction * cfg.n_users)
    n_new_items = round(cfg.new_item_fraction * cfg.n_items)
    new_users = np.sort(rng.choice(cfg.n_users, size=n_new_users, replace=False))
    new_items = np.sort(rng.choice(cfg.n_items, size=n_new_items, replace=False))
    is_new_user = np.zeros(cfg.n_users, bool)
    is_new_user[new_users] = True
    is_new_item = np.zeros(cfg.n_items, bool)
    is_new_item[new_items] = True
    old_items = np.flatnonzero(~is_new_item)
    old_users = np.flatnonzero(~is_new_user)

    eu, ei = [], []
    for u in range(cfg.n_users):
        if is_new_user[u]:
            # onboarding: a few poorly targeted impressions from one cluster
            # pair; of two random items the user is shown the one they like less
            m = int(rng.integers(NEW_USER_MIN_EVENTS, NEW_USER_MAX_EVENTS + 1))
            topic = int(rng.integers(0, n_pairs))
            pool = old_items[(clusters[old_items] >> 1) == topic]
            pairs = rng.choice(pool, size=(m, 2), replace=True)
            aff = item_vecs[pairs] @ user_vecs[u]
            chosen = pairs[np.arange(m), np.argmin(aff, axis=1)]
            chosen = list(dict.fromkeys(chosen.tolist()))
        else:
            chosen = rng.choice(old_items, size=cfg.events_per_user, replace=False).tolist()
        eu.extend([u] * len(chosen))
        ei.extend(chosen)
    for i in new_items.tolist():
        m = int(rng.integers(1, NEW_ITEM_MAX_EVENTS + 1))
        audience = rng.choice(old_users, size=m, replace=False)
        eu.extend(audience.tolist())
        ei.extend([i] * m)
    eu = np.array(eu, dtype=np.int64)
    ei = np.array(ei, dtype=np.int64)

    logits = np.einsum("ij,ij->i", user_vecs[eu], item_vecs[ei])
    bias = solve_bias(logits, cfg.negative_rate_target)
    positive = rng.random(len(eu)) < _expit(logits + bias)
    pol = np.where(positive, 1, -1).astype(np.int8)

    # relabel entities by first appearance so export -> ingest keeps the ids
    user_perm = _first_appearance(eu, cfg.n_users)
    item_perm = _first_appearance(ei, cfg.n_items)
    new_user_id = np.empty(cfg.n_users, dtype=np.int64)
    new_user_id[user_perm] = np.arange(cfg.n_users)
    new_item_id = np.empty(cfg.n_items, dtype=np.int64)
    new_item_id[item_perm] = np.arange(cfg.n_items)

    store = EngagementStore.from_arrays(
        new_user_id[eu], new_item_id[ei], pol, np.ones(len(eu)), np.arange(len(eu), dtype=np.int64),
        user_keys=[f"u{i}" for i in range(cfg.n_users)], item_keys=[f"i{i}" for i in range(cfg.n_items)])
    truth = GroundTruth(user_vecs[user_perm], item_vecs[item_perm], float(bias), clusters[item_perm], centroids,
                        np.sort(new_user_id[new_users]), np.sort(new_item_id[new_items]))
    return store, truth


def _first_appearance(ids: np.ndarray, n: int) -> np.ndarray:
    """Old ids ordered by first occurrence; never-seen ids trail in id order."""
    _, first = np.unique(ids, return_index=True)
    seen = ids[np.sort(first)]
    unseen = np.setdiff1d(np.arange(n), seen)
    return np.concatenate([seen, unseen])


def response_oracle(truth: GroundTruth, user, item, rng: np.random.Generator) -> Polarity:
    """Draw one polarity from the generating model for (user, item)."""
    u = user.id if isinstance(user, EntityId) else int(user)
    i = item.id if isinstance(item, EntityId) else int(item)
    if isinstance(user, EntityId) and user.kind is not Kind.USER or isinstance(item, EntityId) and item.kind is not Kind.ITEM:
        raise ContractError("response_oracle expects a user and an item")
    if not 0 <= u < len(truth.user_vectors):
        raise NotFoundError(f"unknown user {u}")
    if not 0 <= i < len(truth.item_vectors):
        raise NotFoundError(f"unknown item {i}")
    p = 0.5 * (1.0 + math.tanh(0.5 * truth.logit(u, i)))
    return Polarity.POSITIVE if rng.random() < p else Polarity.NEGATIVE


def pair_stream(seed: int, item, user) -> np.random.Generator:
    """Oracle substream owned by one (item, user) pair under ``seed``."""
    i = item.id if isinstance(item, EntityId) else int(item)
    u = user.id if isinstance(user, EntityId) else int(user)
    return make_rng(seed, 1, i, u)


def config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
