from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from pmuplace.grid import load_grid

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def grid_doc(n, edges, zin=(), slack=0, base=1.0):
    """Network document from (from, to, r, x) tuples."""
    return {
        "buses": [{"id": i, "zero_injection": i in zin, "name": f"b{i}"} for i in range(n)],
        "lines": [
            {"id": k, "from": f, "to": t, "r": r, "x": x} for k, (f, t, r, x) in enumerate(edges)
        ],
        "slack": slack,
        "base_voltage": base,
    }


def chain_doc(n, zin=()):
    edges = [(i, i + 1, 0.01 * (1 + i % 3), 0.03 + 0.01 * i) for i in range(n - 1)]
    return grid_doc(n, edges, zin)


@st.composite
def random_grids(draw, min_buses=2, max_buses=8, allow_zin=True):
    """Connected random grids: a random tree plus a few extra lines."""
    n = draw(st.integers(min_buses, max_buses))
    edges, pairs = [], set()
    for i in range(1, n):
        j = draw(st.integers(0, i - 1))
        pairs.add(frozenset((i, j)))
        edges.append((j, i))
    for _ in range(draw(st.integers(0, n // 2))):
        a, b = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        if a != b and frozenset((a, b)) not in pairs:
            pairs.add(frozenset((a, b)))
            edges.append((a, b))
    imp = st.tuples(st.floats(0.0, 0.1), st.floats(0.01, 0.2))
    lines = [(f, t, *draw(imp)) for f, t in edges]
    zin = ()
    if allow_zin:
        flags = draw(st.lists(st.booleans(), min_size=n, max_size=n))
        zin = tuple(i for i in range(1, n) if flags[i])
    return load_grid(grid_doc(n, lines, zin))


@st.composite
def placements(draw, n):
    return np.array(draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)), dtype=np.int8)


@pytest.fixture
def chain3():
    return load_grid(chain_doc(3))
