from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoscene.grid import (CacheOverflowError, CachePool, CellCache, GridError, GridSpec, activation_window,
                            cell_center, cell_index, cell_indices, cell_min, cell_seed, grid_min,
                            update_active_set, window_box)

dims = st.tuples(*[st.integers(1, 9)] * 3)
sizes = st.tuples(*[st.floats(0.5, 5000.0)] * 3)


def test_large_grid_numbers():
    g = GridSpec((200, 200, 200), (2000.0, 2000.0, 2000.0))
    np.testing.assert_array_equal(g.min, -200000.0)
    np.testing.assert_array_equal(g.max, 200000.0)
    assert cell_index((0.0, 0.0, 0.0), g) == (100, 100, 100)
    assert cell_index((-1e-9, 0.0, 0.0), g) == (99, 100, 100)
    assert g.n_cells == 8_000_000


def test_grid_min_is_centred():
    np.testing.assert_array_equal(grid_min((4, 2, 1), (1.0, 3.0, 10.0)), (-2.0, -3.0, -5.0))


@settings(max_examples=60, deadline=None)
@given(dims, sizes, st.data())
def test_cell_round_trip(dim, size, data):
    g = GridSpec(dim, size)
    c = tuple(data.draw(st.integers(0, d - 1)) for d in dim)
    f = np.array([data.draw(st.floats(0.0, 1.0, exclude_max=True)) for _ in range(3)])
    lo, hi = g.cell_box(c)
    p = lo + f * g.size
    got = cell_index(p, g) if g.in_range(cell_indices(p[None], g)[0]) else None
    # the sample lands in c unless rounding put it on the far face, which the next cell owns
    expect = tuple(np.where(p >= hi, np.array(c) + 1, c))
    if got is not None:
        assert tuple(got) == expect
    assert cell_index(cell_min(c, g), g) == c
    assert cell_index(cell_center(c, g), g) == c


@pytest.mark.parametrize("p", [(1e9, 0, 0), (0, -1e9, 0), (np.nan, 0, 0), (10.0, 0.0, 0.0)])
def test_outside_points_raise(p):
    with pytest.raises(GridError):
        cell_index(p, GridSpec((2, 2, 2), (10.0, 10.0, 10.0)))


def test_bad_grid_rejected():
    with pytest.raises(GridError):
        GridSpec((0, 1, 1), (1.0, 1.0, 1.0))
    with pytest.raises(GridError):
        GridSpec((1, 1, 1), (1.0, 0.0, 1.0))


def test_linear_index_is_row_major():
    g = GridSpec((3, 4, 5), (1.0, 1.0, 1.0))
    cells = [(i, j, k) for i in range(3) for j in range(4) for k in range(5)]
    assert [g.linear_index(c) for c in cells] == list(range(60))


def test_window_has_27_cells_and_clips_at_borders():
    g = GridSpec((5, 5, 5), (10.0, 10.0, 10.0))
    w = activation_window((0.0, 0.0, 0.0), g, 1)
    assert len(w) == 27 and len(set(w)) == 27
    assert all(max(abs(a - 2) for a in c) <= 1 for c in w)
    corner = activation_window(g.min + 0.1, g, 1)
    assert len(corner) == 8
    assert len(activation_window((0.0, 0.0, 0.0), g, 0)) == 1
    assert len(activation_window((0.0, 0.0, 0.0), g, 2)) == 125
    lo, hi = window_box(w, g)
    np.testing.assert_allclose(lo, -15.0)
    np.testing.assert_allclose(hi, 15.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 4)] * 3), max_size=30),
       st.lists(st.tuples(*[st.integers(0, 4)] * 3), max_size=30))
def test_active_set_update_partitions(prev, new):
    ch = update_active_set(prev, new)
    assert set(ch.activated) | set(ch.retained) == set(new)
    assert set(ch.deactivated) | set(ch.retained) == set(prev)
    assert not set(ch.activated) & set(ch.retained)
    assert not set(ch.deactivated) & set(new)


def test_moving_one_cell_swaps_nine():
    g = GridSpec((9, 9, 9), (10.0, 10.0, 10.0))
    a = activation_window((0.0, 0.0, 0.0), g, 1)
    b = activation_window((10.0, 0.0, 0.0), g, 1)
    ch = update_active_set(a, b)
    assert (len(ch.activated), len(ch.deactivated), len(ch.retained)) == (9, 9, 18)


def test_cell_seed_distinct_per_cell():
    seeds = {cell_seed(7, (i, j, k)) for i in range(6) for j in range(6) for k in range(6)}
    assert len(seeds) == 216
    assert cell_seed(7, (1, 2, 3)) != cell_seed(8, (1, 2, 3))


def _records(n, rng):
    return rng.integers(0, 4, n).astype(np.int32), rng.random((n, 3)), rng.random((n, 4))


def test_cache_overflow_truncates_or_raises():
    rng = np.random.default_rng(0)
    c = CellCache(10)
    c.reset((0, 0, 0))
    assert c.append(*_records(7, rng)) == 7
    assert c.append(*_records(7, rng)) == 3
    assert len(c) == 10 and c.overflow == 4
    s = CellCache(10, strict=True)
    s.reset((0, 0, 0))
    with pytest.raises(CacheOverflowError):
        s.append(*_records(11, rng))


def test_cache_grows_lazily_and_freezes():
    c = CellCache(1_000_000)
    assert c.positions.shape[0] == 0
    c.reset((1, 1, 1))
    c.append(*_records(5, np.random.default_rng(1)))
    assert c.positions.shape[0] < 1_000_000
    c.freeze()
    with pytest.raises(RuntimeError):
        c.append(*_records(1, np.random.default_rng(1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_digest_independent_of_append_order(n, seed):
    rng = np.random.default_rng(seed)
    m, p, r = _records(n, rng)
    perm = rng.permutation(n)
    a, b = CellCache(10**6), CellCache(10**6)
    a.reset((0, 0, 0))
    b.reset((0, 0, 0))
    a.append(m, p, r)
    for chunk in np.array_split(perm, 3):
        b.append(m[chunk], p[chunk], r[chunk])
    a.freeze()
    b.freeze()
    assert a.digest() == b.digest()


def test_pool_reuses_buffers():
    pool = CachePool(1, 100)
    assert pool.size == 27
    c = pool.acquire((0, 0, 0))
    with pytest.raises(GridError):
        pool.acquire((0, 0, 0))
    pool.release((0, 0, 0))
    assert pool.acquire((1, 0, 0)) is c
    for i in range(26):
        pool.acquire((2, 0, i))
    with pytest.raises(GridError):
        pool.acquire((3, 0, 0))
