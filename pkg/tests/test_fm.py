import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build, random_store
from hcf.errors import ContractError, TrainingError
from hcf.fm import (Direction, FeatureIndex, FeatureKey, FeatureVector, FmModel, Link, Role, TrainConfig, Variant,
                    _sgd_epoch, encode, fit, gradient, score, sigmoid, train, training_instances)
from hcf.store import EngagementStore, EntityId, Kind, Polarity, item, user


def toy_index(n):
    return FeatureIndex(FeatureKey(EntityId(Kind.ITEM, i), Role.CANDIDATE) for i in range(n))


def random_model(rng, n, k, link=Link.IDENTITY, scale=0.5):
    return FmModel(float(rng.normal()), rng.normal(0, scale, n), rng.normal(0, scale, (n, k)), toy_index(n), link)


def random_x(rng, n, max_active=8):
    m = int(rng.integers(0, min(n, max_active) + 1))
    idx = np.sort(rng.choice(n, m, replace=False))
    return FeatureVector(idx, rng.uniform(0.05, 1.5, m))


def naive_raw(model, x):
    """Double loop over every pair of features of a dense x."""
    dense = np.zeros(model.n_features)
    dense[x.indices] = x.values
    out = model.bias
    for i in range(model.n_features):
        out += model.linear[i] * dense[i]
    for i in range(model.n_features):
        for j in range(i + 1, model.n_features):
            out += float(model.factors[i] @ model.factors[j]) * dense[i] * dense[j]
    return out


def log_loss(model, x, label):
    p = float(sigmoid(naive_raw(model, x)))
    return -math.log(p) if label == 1 else -math.log1p(-p)


def test_zero_model_scores_zero():
    m = FmModel(0.0, np.zeros(3), np.zeros((3, 2)), toy_index(3), Link.IDENTITY)
    assert score(m, FeatureVector([0, 2], [1.0, 0.5])) == 0.0


def test_worked_example():
    m = FmModel(0.1, np.array([0.2, 0.3]), np.array([[0.5], [-0.4]]), toy_index(2), Link.IDENTITY)
    x = FeatureVector([0, 1], [1.0, 1.0])
    assert score(m, x) == pytest.approx(0.4, abs=1e-15)
    assert score(m, x) == pytest.approx(naive_raw(m, x), abs=1e-15)


def test_fast_identity_matches_naive_pairwise_sum():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n, k = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        m = random_model(rng, n, k)
        x = random_x(rng, n)
        fast, slow = score(m, x), naive_raw(m, x)
        assert abs(fast - slow) <= 1e-9 * max(1.0, abs(slow))


def test_gradient_with_no_active_features_only_moves_bias():
    rng = np.random.default_rng(2)
    m = random_model(rng, 4, 3, Link.SIGMOID)
    g = gradient(m, FeatureVector([], []), 1)
    assert g.bias != 0.0
    assert not g.linear.any() and not g.factors.any()


def test_saturated_gradient_is_zero():
    m = FmModel(40.0, np.zeros(2), np.zeros((2, 1)), toy_index(2), Link.SIGMOID)
    g = gradient(m, FeatureVector([0, 1], [1.0, 1.0]), 1)
    assert g.bias == 0.0 and not g.linear.any() and not g.factors.any()


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(25):
        n, k = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        m = random_model(rng, n, k, Link.SIGMOID)
        x = random_x(rng, n)
        label = int(rng.integers(0, 2))
        g = gradient(m, x, label)

        def perturbed(d_bias=0.0, d_linear=0.0, d_factors=0.0):
            return FmModel(m.bias + d_bias, m.linear + d_linear, m.factors + d_factors, m.index, m.link)

        num = (log_loss(perturbed(d_bias=h), x, label) - log_loss(perturbed(d_bias=-h), x, label)) / (2 * h)
        assert num == pytest.approx(g.bias, rel=1e-5, abs=1e-8)
        for j in x.indices:
            e = np.zeros(n)
            e[j] = h
            num = (log_loss(perturbed(d_linear=e), x, label) - log_loss(perturbed(d_linear=-e), x, label)) / (2 * h)
            assert num == pytest.approx(g.linear[j], rel=1e-5, abs=1e-8)
            for f in range(k):
                E = np.zeros((n, k))
                E[j, f] = h
                num = (log_loss(perturbed(d_factors=E), x, label) - log_loss(perturbed(d_factors=-E), x, label)) / (2 * h)
                assert num == pytest.approx(g.factors[j, f], rel=1e-5, abs=1e-8)


def test_sgd_step_equals_regularized_gradient_step():
    rng = np.random.default_rng(4)
    m = random_model(rng, 6, 3, Link.SIGMOID)
    x = FeatureVector([1, 3, 4], [1.0, 0.5, 0.25])
    lr, l2w, l2v = 0.1, 0.01, 0.02
    bias, linear, factors = np.array([m.bias]), m.linear.copy(), m.factors.copy()
    _sgd_epoch(np.array([0, 3]), x.indices, x.values, np.array([1.0]), np.array([0]), bias, linear, factors, lr, l2w, l2v)
    g = gradient(m, x, 1)
    active = np.zeros(6, bool)
    active[x.indices] = True
    np.testing.assert_allclose(bias[0], m.bias - lr * g.bias, rtol=1e-14)
    np.testing.assert_allclose(linear[active], m.linear[active] - lr * (g.linear[active] + l2w * m.linear[active]), rtol=1e-13)
    np.testing.assert_allclose(factors[active], m.factors[active] - lr * (g.factors[active] + l2v * m.factors[active]), rtol=1e-13)
    assert np.array_equal(linear[~active], m.linear[~active]) and np.array_equal(factors[~active], m.factors[~active])


def test_feature_vector_validation():
    with pytest.raises(ContractError):
        FeatureVector([2, 1], [1.0, 1.0])
    with pytest.raises(ContractError):
        FeatureVector([1, 1], [1.0, 1.0])
    assert FeatureVector.from_pairs([(3, 0.5), (1, 1.0)]).as_dict() == {1: 1.0, 3: 0.5}


# -- encoding --

def test_encode_without_history():
    s = build([("u1", "i1", 1), ("u2", "i2", 1)])
    u2, i1 = s.entity(Kind.USER, "u2"), s.entity(Kind.ITEM, "i1")
    s2 = s.subset(np.array([True, False]))
    feats = encode(s2, u2, i1)
    assert feats == {FeatureKey(u2, Role.TARGET): 1.0, FeatureKey(i1, Role.CANDIDATE): 1.0}


def test_encode_normalizes_positive_history():
    s = build([("u1", "i2", 1), ("u1", "i3", 1), ("u2", "i1", -1)])
    u1, i1, i2, i3 = (s.entity(Kind.USER, "u1"), s.entity(Kind.ITEM, "i1"), s.entity(Kind.ITEM, "i2"),
                      s.entity(Kind.ITEM, "i3"))
    assert encode(s, u1, i1, Variant.HCF) == {
        FeatureKey(u1, Role.TARGET): 1.0, FeatureKey(i1, Role.CANDIDATE): 1.0,
        FeatureKey(i2, Role.POS_HISTORY): 0.5, FeatureKey(i3, Role.POS_HISTORY): 0.5}


def test_encode_leave_one_out_matches_hand_built_map():
    rows = [("u1", "i1", 1), ("u1", "i2", 1), ("u1", "i3", 1), ("u1", "i4", -1), ("u1", "i5", -1), ("u2", "i1", -1)]
    s = build(rows)
    u1 = s.entity(Kind.USER, "u1")
    i = {k: s.entity(Kind.ITEM, k) for k in ("i1", "i2", "i3", "i4", "i5")}
    got = encode(s, u1, i["i4"], Variant.HCF, exclude=(i["i4"], Polarity.NEGATIVE))
    assert got == {
        FeatureKey(u1, Role.TARGET): 1.0, FeatureKey(i["i4"], Role.CANDIDATE): 1.0,
        FeatureKey(i["i1"], Role.POS_HISTORY): 1 / 3, FeatureKey(i["i2"], Role.POS_HISTORY): 1 / 3,
        FeatureKey(i["i3"], Role.POS_HISTORY): 1 / 3, FeatureKey(i["i5"], Role.NEG_HISTORY): 1.0}
    ccf = encode(s, u1, i["i4"], Variant.CCF, exclude=(i["i4"], Polarity.NEGATIVE))
    assert not any(key.role is Role.NEG_HISTORY for key in ccf)


def test_encode_rejects_same_kind():
    s = build([("u1", "i1", 1)])
    with pytest.raises(ContractError):
        encode(s, user(0), user(0))


def test_vectorize_drops_unknown_keys():
    idx = toy_index(2)
    x = idx.vectorize({FeatureKey(item(1), Role.CANDIDATE): 1.0, FeatureKey(item(7), Role.CANDIDATE): 1.0})
    assert x.as_dict() == {1: 1.0}


@pytest.mark.parametrize("direction", list(Direction))
@pytest.mark.parametrize("variant", list(Variant))
def test_training_rows_equal_leave_one_out_featurization(variant, direction):
    s = random_store(np.random.default_rng(5), 8, 9, 60)
    index = FeatureIndex.for_store(s, variant, direction)
    indptr, cols, vals, y = training_instances(s, index, variant, direction)
    for r, e in enumerate(s.events):
        u, i = EntityId(Kind.USER, e.user), EntityId(Kind.ITEM, e.item)
        t, c = (u, i) if direction is Direction.RECOMMENDATION else (i, u)
        x = index.vectorize(encode(s, t, c, variant, exclude=(c, e.polarity)))
        assert np.array_equal(cols[indptr[r]:indptr[r + 1]], x.indices)
        assert np.array_equal(vals[indptr[r]:indptr[r + 1]], x.values)
        assert y[r] == (1.0 if e.polarity is Polarity.POSITIVE else 0.0)


def test_batch_scores_equal_single_scores():
    s = random_store(np.random.default_rng(6), 10, 12, 90)
    m = train(s, Variant.HCF, Direction.RECOMMENDATION, TrainConfig(k=4, epochs=3, rng_seed=2))
    pairs = [(user(u), item(i)) for u in range(10) for i in range(0, 12, 3)]
    batch = m.score_pairs(s, pairs)
    single = [score(m, m.featurize(s, t, c)) for t, c in pairs]
    assert batch.tolist() == single


# -- training --

def fixture_200(seed=11):
    """200 events: 20 users x 25 items with a planted low-rank preference."""
    rng = np.random.default_rng(seed)
    zu, zi = rng.normal(size=(20, 2)), rng.normal(size=(25, 2))
    users = rng.integers(0, 20, 200)
    items = rng.integers(0, 25, 200)
    pol = np.where(np.einsum("ij,ij->i", zu[users], zi[items]) > 0, 1, -1)
    return EngagementStore.from_arrays(users, items, pol, n_users=20, n_items=25)


def test_same_seed_gives_bit_identical_models():
    s = fixture_200()
    cfg = TrainConfig(k=4, epochs=5, rng_seed=9)
    assert train(s, "hcf", "reco", cfg).same_as(train(s, "hcf", "reco", cfg))
    assert not train(s, "hcf", "reco", cfg).same_as(train(s, "hcf", "reco", TrainConfig(k=4, epochs=5, rng_seed=10)))


def test_loss_settles_after_epoch_three():
    losses = fit(fixture_200(), Variant.HCF, Direction.RECOMMENDATION, TrainConfig(rng_seed=0)).losses
    assert len(losses) == 20
    for prev, cur in zip(losses[2:], losses[3:]):
        assert cur <= prev * 1.05


def test_zero_negative_store_gives_identical_ccf_and_hcf_models():
    rng = np.random.default_rng(8)
    s = EngagementStore.from_arrays(rng.integers(0, 10, 80), rng.integers(0, 10, 80), np.ones(80, int))
    for direction in Direction:
        cfg = TrainConfig(k=3, epochs=4, rng_seed=5)
        a, b = train(s, Variant.CCF, direction, cfg), train(s, Variant.HCF, direction, cfg)
        assert a.same_as(b)
        assert a.variant is b.variant is Variant.CCF


def test_variant_and_direction_are_recovered_from_the_index():
    s = fixture_200()
    cfg = TrainConfig(k=2, epochs=1)
    for variant in Variant:
        for direction in Direction:
            m = train(s, variant, direction, cfg)
            assert (m.variant, m.direction) == (variant, direction)


def test_save_load_is_bit_exact(tmp_path):
    s = fixture_200()
    m = train(s, Variant.HCF, Direction.DISSEMINATION, TrainConfig(k=3, epochs=2, rng_seed=4))
    path = tmp_path / "model.json"
    m.save(path)
    back = FmModel.load(path)
    assert back.same_as(m)
    pairs = [(item(i), user(u)) for i in range(25) for u in range(0, 20, 4)]
    assert m.score_pairs(s, pairs).tobytes() == back.score_pairs(s, pairs).tobytes()


def test_model_rejects_bad_input():
    with pytest.raises(ContractError):
        FmModel(0.0, np.zeros(2), np.zeros((3, 1)), toy_index(2))
    with pytest.raises(ContractError):
        FmModel(float("nan"), np.zeros(2), np.zeros((2, 1)), toy_index(2))
    with pytest.raises(ContractError):
        TrainConfig(k=0)
    with pytest.raises(TrainingError):
        fit(EngagementStore.from_arrays([], [], []))
    with pytest.raises(ContractError):
        FmModel.from_dict({"format_version": 99})


def test_divergence_names_the_epoch():
    with pytest.raises(TrainingError, match="epoch"):
        fit(fixture_200(), Variant.HCF, Direction.RECOMMENDATION, TrainConfig(learning_rate=1e6, init_sigma=10.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_score_property_fast_equals_naive(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, int(rng.integers(1, 9)), int(rng.integers(1, 4)))
    x = random_x(rng, m.n_features)
    slow = naive_raw(m, x)
    assert abs(score(m, x) - slow) <= 1e-9 * max(1.0, abs(slow))
