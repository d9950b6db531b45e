import numpy as np
import pytest
from hypothesis import strategies as st

from hcf.store import EngagementStore, StoreBuilder


def build(rows):
    """Store from (user_key, item_key, polarity[, ts[, w]]) tuples."""
    b = StoreBuilder()
    for r in rows:
        b.add(*r)
    return b.build()


@st.composite
def random_events(draw, max_users=8, max_items=8, max_events=40):
    n_users = draw(st.integers(1, max_users))
    n_items = draw(st.integers(1, max_items))
    n = draw(st.integers(1, max_events))
    users = draw(st.lists(st.integers(0, n_users - 1), min_size=n, max_size=n))
    items = draw(st.lists(st.integers(0, n_items - 1), min_size=n, max_size=n))
    pols = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    weights = draw(st.lists(st.sampled_from([0.5, 1.0, 2.0, 3.0]), min_size=n, max_size=n))
    return users, items, pols, weights


def store_from(events, n_users=None, n_items=None):
    users, items, pols, weights = events
    return EngagementStore.from_arrays(users, items, pols, weights,
                                       n_users=n_users or max(users) + 1, n_items=n_items or max(items) + 1)


def random_store(rng: np.random.Generator, n_users=30, n_items=30, n_events=200, weights=False):
    users = rng.integers(0, n_users, n_events)
    items = rng.integers(0, n_items, n_events)
    pols = rng.choice([1, -1], n_events)
    w = rng.choice([1.0, 2.0], n_events) if weights else None
    return EngagementStore.from_arrays(users, items, pols, w, n_users=n_users, n_items=n_items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
