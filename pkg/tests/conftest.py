import numpy as np
import pytest
from hypothesis import settings, strategies as st

from structpretrain.graph import build_graph

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@st.composite
def small_graphs(draw, min_n=1, max_n=10):
    n = draw(st.integers(min_n, max_n))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    keep = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return build_graph([p for p, k in zip(pairs, keep) if k], n)


def path_graph(n):
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


def cycle_graph(n):
    return build_graph([(i, (i + 1) % n) for i in range(n)], n)


def complete_graph(n):
    return build_graph([(u, v) for u in range(n) for v in range(u + 1, n)], n)


def star_graph(leaves):
    return build_graph([(0, i) for i in range(1, leaves + 1)], leaves + 1)


def triangle_pendant():
    """a=0, b=1, c=2 form a triangle, d=3 hangs off a."""
    return build_graph([(0, 1), (1, 2), (0, 2), (0, 3)], 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
