import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build, random_events, random_store, store_from
from hcf.errors import ContractError
from hcf.similarity import Mode, cosine, heterogeneous_neighbors, homogeneous_neighbors
from hcf.store import Axis, CharacteristicVector, EntityId, Kind, Polarity, item, user


def vec(entries, pol=Polarity.POSITIVE, axis=Axis.BY_USERS):
    return CharacteristicVector(item(0), axis, pol, {user(k): float(v) for k, v in entries.items()})


def dense(store, kind, pol):
    m = np.zeros((store.n_of(kind), store.n_of(kind.other)))
    for a, row in store.adjacency(kind, pol).items():
        for b, w in row.items():
            m[a, b] = w
    return m


def brute_force(store, seed, seed_pol, peer_pol, k, floor=0.0):
    """All-pairs cosine over dense rows, reduced in ascending column order.

    dot / sqrt(|a|^2 |b|^2) with each sum accumulated left to right, so the
    values must agree bit for bit, not just approximately.
    """
    A, B = dense(store, seed.kind, seed_pol), dense(store, seed.kind, peer_pol)

    def sq(row):
        s = 0.0
        for x in row:
            if x:
                s += x * x
        return s

    a = A[seed.id]
    na = sq(a)
    out = []
    for j in range(len(B)):
        if j == seed.id:
            continue
        nb = sq(B[j])
        if na == 0 or nb == 0:
            continue
        dot = 0.0
        for c in range(len(a)):
            if a[c] and B[j, c]:
                dot += a[c] * B[j, c]
        v = dot / math.sqrt(na * nb)
        if v > floor:
            out.append((j, v))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out[:k]


def as_pairs(nl):
    return [(s.b.id, s.value) for s in nl]


def test_identical_vectors():
    assert cosine(vec({0: 1, 2: 1}), vec({0: 1, 2: 1})) == 1.0


def test_disjoint_support():
    assert cosine(vec({0: 1, 1: 1}), vec({2: 1})) == 0.0


def test_half_overlap():
    # dot 1 over sqrt(2 * 2)
    assert cosine(vec({0: 1, 1: 1}), vec({0: 1, 2: 1})) == 0.5


def test_empty_vector_gives_zero():
    assert cosine(vec({}), vec({1: 3})) == 0.0


def test_axis_mismatch():
    with pytest.raises(ContractError):
        cosine(vec({0: 1}), vec({0: 1}, axis=Axis.BY_ITEMS))


def test_items_liked_by_one_user_are_neighbors():
    s = build([("u1", "i1", 1), ("u1", "i2", 1)])
    nl = homogeneous_neighbors(s, s.entity(Kind.ITEM, "i1"))
    assert [(s.key_of(x.b), x.value, x.mode) for x in nl] == [("i2", 1.0, Mode.HOMOGENEOUS)]


def test_seed_with_empty_vector():
    s = build([("u1", "i1", -1), ("u1", "i2", 1)])
    assert len(homogeneous_neighbors(s, s.entity(Kind.ITEM, "i1"))) == 0
    assert len(heterogeneous_neighbors(s, s.entity(Kind.ITEM, "i2"))) == 0


def test_hetero_single_user_overlap():
    s = build([("u1", "i1", -1), ("u1", "i2", 1)])
    nl = heterogeneous_neighbors(s, s.entity(Kind.ITEM, "i1"))
    assert [(s.key_of(x.b), x.value, x.mode) for x in nl] == [("i2", 1.0, Mode.HETEROGENEOUS)]


def test_hetero_does_not_use_the_reverse_pairing():
    # seed positive vs peer negative would link i1 -> i2 here; that pairing is not computed
    s = build([("u1", "i1", 1), ("u1", "i2", -1)])
    assert len(heterogeneous_neighbors(s, s.entity(Kind.ITEM, "i1"))) == 0


SIX_ITEMS = [
    ("a", "i1", 1), ("a", "i2", 1), ("a", "i3", -1), ("b", "i1", 1), ("b", "i4", 1), ("b", "i2", -1),
    ("c", "i2", 1), ("c", "i5", 1), ("c", "i6", -1), ("d", "i1", -1), ("d", "i6", 1), ("d", "i3", 1),
    ("e", "i4", 1), ("e", "i5", -1), ("e", "i6", 1), ("a", "i5", 1, 0, 2.0),
]


@pytest.mark.parametrize("pol", list(Polarity))
def test_six_item_homogeneous_matches_brute_force(pol):
    s = build(SIX_ITEMS)
    for i in range(s.n_items):
        seed = EntityId(Kind.ITEM, i)
        assert as_pairs(homogeneous_neighbors(s, seed, pol, k=3)) == brute_force(s, seed, pol, pol, 3)


def test_six_item_heterogeneous_matches_brute_force():
    s = build(SIX_ITEMS)
    for i in range(s.n_items):
        seed = EntityId(Kind.ITEM, i)
        got = as_pairs(heterogeneous_neighbors(s, seed, k=3))
        assert got == brute_force(s, seed, Polarity.NEGATIVE, Polarity.POSITIVE, 3)


def test_k_must_be_positive():
    s = build(SIX_ITEMS)
    with pytest.raises(ContractError):
        homogeneous_neighbors(s, item(0), k=0)


def test_floor_is_exclusive():
    s = build([("u1", "i1", 1), ("u1", "i2", 1)])
    assert len(homogeneous_neighbors(s, item(0), floor=1.0)) == 0
    assert len(homogeneous_neighbors(s, item(0), floor=0.999)) == 1


def test_jsonl_lines():
    s = build(SIX_ITEMS)
    lines = homogeneous_neighbors(s, item(0), k=2).to_jsonl().splitlines()
    assert [set(json.loads(ln)) for ln in lines] == [{"seed", "mode", "neighbor", "value"}] * 2


def test_random_stores_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(5):
        s = random_store(rng, 20, 25, 150, weights=True)
        for kind in Kind:
            for idx in range(0, s.n_of(kind), 3):
                seed = EntityId(kind, idx)
                for pol in Polarity:
                    assert as_pairs(homogeneous_neighbors(s, seed, pol, 5)) == brute_force(s, seed, pol, pol, 5)
                got = as_pairs(heterogeneous_neighbors(s, seed, 5))
                assert got == brute_force(s, seed, Polarity.NEGATIVE, Polarity.POSITIVE, 5)


finite_maps = st.dictionaries(st.integers(0, 12), st.floats(0.01, 100.0), max_size=8)


@settings(max_examples=200, deadline=None)
@given(finite_maps, finite_maps)
def test_cosine_symmetric_and_bounded(a, b):
    u, v = vec(a), vec(b)
    x = cosine(u, v)
    assert x == cosine(v, u)
    assert 0.0 <= x <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(finite_maps, finite_maps, st.floats(0.01, 100.0))
def test_cosine_scale_invariant(a, b, alpha):
    scaled = vec({k: alpha * w for k, w in a.items()})
    assert cosine(scaled, vec(b)) == pytest.approx(cosine(vec(a), vec(b)), rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(random_events(), st.integers(1, 6))
def test_neighbor_list_invariants(ev, k):
    s = store_from(ev)
    for kind in Kind:
        for idx in range(s.n_of(kind)):
            seed = EntityId(kind, idx)
            for nl in (homogeneous_neighbors(s, seed, Polarity.POSITIVE, k), heterogeneous_neighbors(s, seed, k)):
                vals = [(-x.value, x.b.id) for x in nl]
                assert len(nl) <= k
                assert vals == sorted(vals)
                assert seed not in nl.ids()
                assert all(0.0 < x.value <= 1.0 + 1e-12 for x in nl)
