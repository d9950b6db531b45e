"""Signed engagement storage.

An :class:`EngagementStore` holds merged ``(user, item, polarity)`` events and
four compressed adjacency tables (user->items and item->users, one per
polarity).  Entity ids are dense per kind and assigned in order of first
appearance, so exporting a store and ingesting it again reproduces the same
ids.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, IngestError, NotFoundError


class Kind(str, Enum):
    USER = "user"
    ITEM = "item"

    @property
    def other(self) -> "Kind":
        return Kind.ITEM if self is Kind.USER else Kind.USER


class Polarity(IntEnum):
    POSITIVE = 1
    NEGATIVE = -1

    @property
    def label(self) -> int:
        return 1 if self is Polarity.POSITIVE else 0


class Axis(str, Enum):
    BY_USERS = "by_users"
    BY_ITEMS = "by_items"


class EntityId(NamedTuple):
    kind: Kind
    id: int

    def __repr__(self) -> str:
        return f"{self.kind.value[0]}{self.id}"


def user(idx: int) -> EntityId:
    return EntityId(Kind.USER, int(idx))


def item(idx: int) -> EntityId:
    return EntityId(Kind.ITEM, int(idx))


class EngagementEvent(NamedTuple):
    """One merged interaction; ``user`` and ``item`` are dense indices."""

    user: int
    item: int
    polarity: Polarity
    weight: float = 1.0
    timestamp: int = 0


@dataclass(frozen=True)
class CharacteristicVector:
    owner: EntityId
    axis: Axis
    polarity: Polarity
    entries: dict  # EntityId -> weight, ascending by id

    def __len__(self) -> int:
        return len(self.entries)


class _Adjacency(NamedTuple):
    indptr: np.ndarray
    nbr: np.ndarray
    weight: np.ndarray

    def row(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[idx], self.indptr[idx + 1]
        return self.nbr[lo:hi], self.weight[lo:hi]


def _csr(owner: np.ndarray, other: np.ndarray, w: np.ndarray, n_owner: int) -> _Adjacency:
    order = np.lexsort((other, owner))
    counts = np.bincount(owner, minlength=n_owner)
    indptr = np.zeros(n_owner + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return _Adjacency(indptr, other[order].astype(np.int64), w[order].astype(np.float64))


class EngagementStore:
    """Immutable, indexed collection of signed engagement events.

    Build one with :func:`ingest`, :class:`StoreBuilder` or
    :meth:`from_arrays`; every derived store (``subset``, ``with_events``)
    keeps the same id space so entities can be looked up across splits.
    """

    def __init__(self, users, items, polarity, weight, timestamp, user_keys, item_keys):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.polarity = np.asarray(polarity, dtype=np.int8)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        for arr in (self.users, self.items, self.polarity, self.weight, self.timestamp):
            arr.setflags(write=False)
        self.user_keys: tuple[str, ...] = tuple(user_keys)
        self.item_keys: tuple[str, ...] = tuple(item_keys)
        self._user_lookup = {k: i for i, k in enumerate(self.user_keys)}
        self._item_lookup = {k: i for i, k in enumerate(self.item_keys)}
        if len(self._user_lookup) != len(self.user_keys) or len(self._item_lookup) != len(self.item_keys):
            raise ContractError("external keys must be unique per kind")

        self._adj: dict[tuple[Kind, Polarity], _Adjacency] = {}
        for pol in Polarity:
            m = self.polarity == int(pol)
            u, i, w = self.users[m], self.items[m], self.weight[m]
            self._adj[Kind.USER, pol] = _csr(u, i, w, self.n_users)
            self._adj[Kind.ITEM, pol] = _csr(i, u, w, self.n_items)
        self._norms: dict[tuple[Kind, Polarity], np.ndarray] = {}

    # -- construction -------------------------------------------------

    @classmethod
    def from_arrays(cls, users, items, polarity, weight=None, timestamp=None,
                    user_keys=None, item_keys=None, n_users=None, n_items=None) -> "EngagementStore":
        """Build a store from raw index arrays, merging duplicate triples.

        Merged events keep the position of their first occurrence; weights
        are summed in input order and the latest timestamp wins.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        pol = np.asarray(polarity, dtype=np.int8)
        n = len(users)
        weight = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64)
        timestamp = np.zeros(n, dtype=np.int64) if timestamp is None else np.asarray(timestamp, dtype=np.int64)
        if not (len(items) == len(pol) == len(weight) == len(timestamp) == n):
            raise ContractError("event arrays must have equal length")
        if n and not np.all(np.isin(pol, (-1, 1))):
            raise ContractError("polarity must be +1 or -1")
        if n and not (np.all(np.isfinite(weight)) and np.all(weight > 0)):
            raise ContractError("weights must be finite and positive")

        if user_keys is None:
            n_users = n_users if n_users is not None else (int(users.max()) + 1 if n else 0)
            user_keys = [f"u{i}" for i in range(n_users)]
        if item_keys is None:
            n_items = n_items if n_items is not None else (int(items.max()) + 1 if n else 0)
            item_keys = [f"i{i}" for i in range(n_items)]
        if n and (users.min() < 0 or users.max() >= len(user_keys) or items.min() < 0 or items.max() >= len(item_keys)):
            raise ContractError("event ids out of range of the key tables")

        if n:
            code = (users * len(item_keys) + items) * 2 + (pol > 0)
            _, first, inverse = np.unique(code, return_index=True, return_inverse=True)
            merged_w = np.bincount(inverse, weights=weight)
            merged_ts = np.full(len(first), np.iinfo(np.int64).min, dtype=np.int64)
            np.maximum.at(merged_ts, inverse, timestamp)
            keep = np.argsort(first, kind="stable")
            sel = first[keep]
            users, items, pol = users[sel], items[sel], pol[sel]
            weight, timestamp = merged_w[keep], merged_ts[keep]
        return cls(users, items, pol, weight, timestamp, user_keys, item_keys)

    def subset(self, mask) -> "EngagementStore":
        """Store holding only the masked events; the id space is unchanged."""
        mask = np.asarray(mask)
        return EngagementStore(self.users[mask], self.items[mask], self.polarity[mask],
                               self.weight[mask], self.timestamp[mask], self.user_keys, self.item_keys)

    def with_events(self, events: Iterable[EngagementEvent]) -> "EngagementStore":
        """Return a new store with ``events`` appended (and merged)."""
        extra = list(events)
        if not extra:
            return self
        u, i, p, w, t = (np.array(col) for col in zip(*extra))
        return EngagementStore.from_arrays(
            np.concatenate([self.users, u]), np.concatenate([self.items, i]),
            np.concatenate([self.polarity, p.astype(np.int8)]),
            np.concatenate([self.weight, w.astype(np.float64)]),
            np.concatenate([self.timestamp, t.astype(np.int64)]),
            self.user_keys, self.item_keys)

    # -- sizes and lookups --------------------------------------------

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def n_events(self) -> int:
        return len(self.users)

    def __len__(self) -> int:
        return self.n_events

    def n_of(self, kind: Kind) -> int:
        return self.n_users if kind is Kind.USER else self.n_items

    def count(self, polarity: Polarity | None = None) -> int:
        if polarity is None:
            return self.n_events
        return int(np.count_nonzero(self.polarity == int(polarity)))

    @property
    def events(self) -> list[EngagementEvent]:
        return [EngagementEvent(int(u), int(i), Polarity(int(p)), float(w), int(t))
                for u, i, p, w, t in zip(self.users, self.items, self.polarity, self.weight, self.timestamp)]

    def entity(self, kind: Kind, key: str) -> EntityId:
        lookup = self._user_lookup if kind is Kind.USER else self._item_lookup
        try:
            return EntityId(kind, lookup[key])
        except KeyError:
            raise NotFoundError(f"unknown {kind.value} key {key!r}") from None

    def key_of(self, eid: EntityId) -> str:
        self.check(eid)
        keys = self.user_keys if eid.kind is Kind.USER else self.item_keys
        return keys[eid.id]

    def check(self, eid: EntityId) -> None:
        if not isinstance(eid, EntityId) or not 0 <= eid.id < self.n_of(eid.kind):
            raise NotFoundError(f"entity {eid!r} is not in the store")

    def degree(self, kind: Kind, polarity: Polarity | None = None) -> np.ndarray:
        """Number of distinct events per entity of ``kind``."""
        if polarity is None:
            return sum(np.diff(self._adj[kind, p].indptr) for p in Polarity)
        return np.diff(self._adj[kind, polarity].indptr)

    # -- adjacency ------------------------------------------------------

    def row(self, kind: Kind, idx: int, polarity: Polarity) -> tuple[np.ndarray, np.ndarray]:
        """Counterpart indices (ascending) and merged weights for one entity."""
        return self._adj[kind, polarity].row(idx)

    def adjacency(self, kind: Kind, polarity: Polarity) -> dict[int, dict[int, float]]:
        """Plain-dict view of one adjacency table (entities without events omitted)."""
        adj = self._adj[kind, polarity]
        out = {}
        for idx in range(self.n_of(kind)):
            nbr, w = adj.row(idx)
            if len(nbr):
                out[idx] = dict(zip(nbr.tolist(), w.tolist()))
        return out

    def sq_norms(self, kind: Kind, polarity: Polarity) -> np.ndarray:
        """Squared Euclidean norm of every characteristic vector of ``kind``.

        Each sum runs in ascending counterpart order (``np.add.at`` applies
        repeated indices sequentially), the order every cosine here uses.
        """
        key = (kind, polarity)
        if key not in self._norms:
            adj = self._adj[key]
            owner = np.repeat(np.arange(self.n_of(kind)), np.diff(adj.indptr))
            out = np.zeros(self.n_of(kind))
            np.add.at(out, owner, adj.weight * adj.weight)
            self._norms[key] = out
        return self._norms[key]

    def norms(self, kind: Kind, polarity: Polarity) -> np.ndarray:
        return np.sqrt(self.sq_norms(kind, polarity))

    def characteristic_vector(self, owner: EntityId, polarity: Polarity) -> CharacteristicVector:
        self.check(owner)
        nbr, w = self.row(owner.kind, owner.id, polarity)
        other = owner.kind.other
        axis = Axis.BY_USERS if owner.kind is Kind.ITEM else Axis.BY_ITEMS
        entries = {EntityId(other, int(j)): float(x) for j, x in zip(nbr, w)}
        return CharacteristicVector(owner, axis, Polarity(polarity), entries)

    def history(self, owner: EntityId, polarity: Polarity) -> list[tuple[EntityId, float]]:
        return list(self.characteristic_vector(owner, polarity).entries.items())

    # -- export -----------------------------------------------------------

    def to_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        for u, i, p, w, t in zip(self.users, self.items, self.polarity, self.weight, self.timestamp):
            writer.writerow([self.user_keys[u], self.item_keys[i], "+1" if p > 0 else "-1", int(t), repr(float(w))])

    def to_jsonl(self, stream: IO[str]) -> None:
        for u, i, p, w, t in zip(self.users, self.items, self.polarity, self.weight, self.timestamp):
            rec = {"user": self.user_keys[u], "item": self.item_keys[i], "polarity": int(p),
                   "ts": int(t), "w": float(w)}
            stream.write(json.dumps(rec) + "\n")

    def export(self, fmt: str = "csv") -> str:
        buf = io.StringIO()
        (self.to_csv if fmt.lower() == "csv" else self.to_jsonl)(buf)
        return buf.getvalue()

    def __repr__(self) -> str:
        return (f"EngagementStore(users={self.n_users}, items={self.n_items}, "
                f"pos={self.count(Polarity.POSITIVE)}, neg={self.count(Polarity.NEGATIVE)})")


class StoreBuilder:
    """Single-writer accumulator that maps external keys to dense ids."""

    def __init__(self):
        self._users: dict[str, int] = {}
        self._items: dict[str, int] = {}
        self._rows: list[tuple[int, int, int, float, int]] = []

    def add(self, user_key: str, item_key: str, polarity: int, timestamp: int = 0, weight: float = 1.0) -> None:
        if polarity not in (1, -1):
            raise ContractError(f"polarity must be +1 or -1, got {polarity!r}")
        if not (weight > 0 and math.isfinite(weight)):
            raise ContractError(f"weight must be positive and finite, got {weight!r}")
        u = self._users.setdefault(user_key, len(self._users))
        i = self._items.setdefault(item_key, len(self._items))
        self._rows.append((u, i, polarity, float(weight), int(timestamp)))

    def build(self) -> EngagementStore:
        if self._rows:
            u, i, p, w, t = (np.array(col) for col in zip(*self._rows))
        else:
            u = i = p = t = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        return EngagementStore.from_arrays(u, i, p, w, t, list(self._users), list(self._items))


def _parse_polarity(raw) -> int:
    if isinstance(raw, bool):
        raise ValueError(f"bad polarity {raw!r}")
    if isinstance(raw, (int, float)):
        value = raw
    else:
        try:
            value = int(str(raw).strip())
        except ValueError:
            raise ValueError(f"bad polarity {raw!r}") from None
    if value not in (1, -1):
        raise ValueError(f"polarity must be +1 or -1, got {raw!r}")
    return int(value)


def _lines(source) -> Iterator[tuple[int, str]]:
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    if text.startswith("﻿"):
        text = text[1:]
    for n, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if line.strip():
            yield n, line


def ingest(source, fmt: str = "csv") -> EngagementStore:
    """Parse CSV or JSONL engagement rows into a built store.

    ``source`` may be bytes, text, or a binary/text file object.  CSV rows
    are ``user,item,polarity[,timestamp[,weight]]``; JSONL objects carry
    ``user``, ``item``, ``polarity`` and optional ``ts`` and ``w``.
    Blank lines are ignored.
    """
    fmt = fmt.lower()
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}")
    builder = StoreBuilder()
    for n, line in _lines(source):
        try:
            if fmt == "csv":
                fields = next(csv.reader([line]))
                if not 3 <= len(fields) <= 5:
                    raise ValueError(f"expected 3 to 5 fields, got {len(fields)}")
                user_key, item_key = fields[0], fields[1]
                pol = _parse_polarity(fields[2])
                ts = int(fields[3]) if len(fields) > 3 and fields[3].strip() else 0
                w = float(fields[4]) if len(fields) > 4 and fields[4].strip() else 1.0
            else:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("expected a JSON object")
                user_key, item_key = str(rec["user"]), str(rec["item"])
                pol = _parse_polarity(rec["polarity"])
                ts = int(rec.get("ts", 0))
                w = float(rec.get("w", 1.0))
            if not user_key or not item_key:
                raise ValueError("empty user or item key")
            builder.add(user_key, item_key, pol, ts, w)
        except (ValueError, KeyError, TypeError, StopIteration) as exc:
            raise IngestError(n, str(exc)) from None
    return builder.build()


def load(path, fmt: str | None = None) -> EngagementStore:
    """Ingest a file, inferring the format from its suffix when not given."""
    path = str(path)
    if fmt is None:
        fmt = "jsonl" if path.endswith((".jsonl", ".json")) else "csv"
    with open(path, "rb") as fh:
        return ingest(fh, fmt)


def events_of(store: EngagementStore, idx: Sequence[int] | np.ndarray) -> list[EngagementEvent]:
    idx = np.asarray(idx, dtype=np.int64)
    return [EngagementEvent(int(store.users[j]), int(store.items[j]), Polarity(int(store.polarity[j])),
                            float(store.weight[j]), int(store.timestamp[j])) for j in idx]
