import importlib
import math
import os
import random
import subprocess
import sys

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfuzz import kernels
from _reference import brute_dtw, grid_graph, line_cells

BACKENDS = [kernels.python] + ([kernels.compiled] if kernels.compiled is not None else [])
IDS = [b.__name__.rsplit(".", 1)[-1] for b in BACKENDS]


def random_mask(rng, h=9, w=11, p=0.25):
    return (np.array([[rng.random() > p for _ in range(w)] for _ in range(h)])).astype(np.uint8)


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_bfs_matches_networkx(k):
    rng = random.Random(1)
    for _ in range(30):
        mask = random_mask(rng)
        free = {(x, y) for y in range(mask.shape[0]) for x in range(mask.shape[1]) if mask[y, x]}
        src = rng.sample(sorted(free), 2)
        dist = k.bfs_field(mask, src)
        g = grid_graph(free)
        lengths = {}
        for s in src:
            for node, d in nx.single_source_shortest_path_length(g, s).items():
                lengths[node] = min(d, lengths.get(node, math.inf))
        for y in range(mask.shape[0]):
            for x in range(mask.shape[1]):
                assert dist[y, x] == lengths.get((x, y), -1)


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_descend_is_shortest_and_ordered(k):
    rng = random.Random(2)
    for _ in range(30):
        mask = random_mask(rng)
        free = sorted((x, y) for y in range(mask.shape[0]) for x in range(mask.shape[1]) if mask[y, x])
        goal, start = rng.sample(free, 2)
        dist = k.bfs_field(mask, [goal])
        path = k.descend(dist, start)
        if dist[start[1], start[0]] < 0:
            assert path == []
            continue
        assert path[0] == start and path[-1] == goal
        assert len(path) == dist[start[1], start[0]] + 1
        for (ax, ay), (bx, by) in zip(path, path[1:]):
            assert abs(ax - bx) + abs(ay - by) == 1 and mask[by, bx]


def test_descend_tie_break_prefers_north_then_east():
    mask = np.ones((3, 3), dtype=np.uint8)
    for k in BACKENDS:
        dist = k.bfs_field(mask, [(2, 0)])
        # From (1, 1), both N and E lead towards (2, 0); N must win.
        assert k.descend(dist, (1, 1)) == [(1, 1), (1, 0), (2, 0)]


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_dtw_brute_force_small(k):
    rng = random.Random(3)
    for _ in range(60):
        a = [(rng.randrange(5), rng.randrange(5)) for _ in range(rng.randint(1, 5))]
        b = [(rng.randrange(5), rng.randrange(5)) for _ in range(rng.randint(1, 5))]
        assert k.dtw(a, b) == pytest.approx(brute_dtw(a, b), abs=1e-12)


def test_dtw_identity_and_symmetry():
    a = [(0, 0), (1, 0), (1, 1), (2, 1)]
    b = [(0, 1), (2, 2)]
    for k in BACKENDS:
        assert k.dtw(a, a) == 0.0
        assert k.dtw(a, b) == pytest.approx(k.dtw(b, a))


def test_dtw_rejects_empty():
    for k in BACKENDS:
        with pytest.raises(ValueError):
            k.dtw([], [(0, 0)])


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 14), st.integers(0, 14), st.integers(0, 14), st.integers(0, 14), st.integers(0, 2**31))
def test_line_clear_matches_rational_line(x0, y0, x1, y1, seed):
    rng = random.Random(seed)
    mask = random_mask(rng, 15, 15, 0.15)
    expected = all(mask[cy, cx] for cx, cy in line_cells(x0, y0, x1, y1))
    for k in BACKENDS:
        assert bool(k.line_clear(mask, x0, y0, x1, y1)) == expected


def test_lines_clear_vectorises_line_clear():
    rng = random.Random(5)
    mask = random_mask(rng, 12, 12, 0.2)
    targets = [(rng.randrange(12), rng.randrange(12)) for _ in range(50)]
    for k in BACKENDS:
        got = k.lines_clear(mask, 6, 6, targets)
        assert list(got) == [int(kernels.python.line_clear(mask, 6, 6, x, y)) for x, y in targets]


@pytest.mark.skipif(kernels.compiled is None, reason="extension not built")
def test_backends_agree_on_random_fields():
    rng = random.Random(6)
    for _ in range(20):
        mask = random_mask(rng, 20, 25)
        src = [(rng.randrange(25), rng.randrange(20)) for _ in range(3)]
        assert np.array_equal(kernels.python.bfs_field(mask, src), kernels.compiled.bfs_field(mask, src))


def test_env_var_forces_python_backend():
    code = "from capfuzz import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CAPFUZZ_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_name_is_consistent():
    mod = importlib.import_module("capfuzz.kernels")
    assert mod.BACKEND == ("cython" if mod.compiled is not None else "python")
