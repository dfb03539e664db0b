import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepgcn.experiments import oracle_dilated
from deepgcn.knn import (DilationPlan, clamp_dilation, dilated_knn, dynamic_rebuild, knn_bruteforce,
                         select_dilated, sorted_neighbors, squared_distances)


def line(n):
    return np.arange(n, dtype=float)[:, None]


def sort_oracle(x, m):
    n = len(x)
    out = []
    for v in range(n):
        d = [(float(((x[u] - x[v]) ** 2).sum()), u) for u in range(n) if u != v]
        out.append([u for _, u in sorted(d)[:m]])
    return np.array(out)


def test_bruteforce_colinear():
    assert list(knn_bruteforce(line(5), 2).indices[0]) == [1, 2]


def test_bruteforce_coincident_points_pair_up():
    pts = np.array([[0.0, 0], [5, 5], [5, 5], [9, 0]])
    t = knn_bruteforce(pts, 1).indices
    assert t[1, 0] == 2 and t[2, 0] == 1


def test_bruteforce_ties_by_ascending_id():
    # vertex 2 has vertices 1 and 3 at equal distance; 1 must come first
    assert list(knn_bruteforce(line(5), 2).indices[2]) == [1, 3]
    grid = np.array([[0.0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]])
    assert list(knn_bruteforce(grid, 4).indices[0]) == [1, 2, 3, 4]


def test_bruteforce_matches_sort_oracle():
    x = np.random.default_rng(0).random((50, 3))
    assert np.array_equal(knn_bruteforce(x, 7).indices, sort_oracle(x, 7))


def test_bruteforce_with_integer_ties_matches_oracle():
    x = np.random.default_rng(1).integers(0, 3, size=(40, 2)).astype(float)
    assert np.array_equal(knn_bruteforce(x, 6).indices, sort_oracle(x, 6))


def test_bruteforce_too_many_neighbours():
    with pytest.raises(ValueError):
        knn_bruteforce(line(4), 4)


def test_wide_inputs_use_gram_path_and_agree():
    x = np.random.default_rng(2).normal(size=(60, 24))
    d2 = squared_distances(x)
    ref = ((x[:, None] - x[None]) ** 2).sum(-1)
    np.fill_diagonal(ref, np.inf)
    assert np.allclose(d2, ref, rtol=1e-10, atol=1e-10)
    assert np.array_equal(knn_bruteforce(x, 5).indices, sort_oracle(x, 5))


def test_dilated_strides_sorted_list():
    cand = np.array([[10, 11, 12, 13, 14, 15]])
    idx, _ = select_dilated(cand, 3, 2)
    assert list(idx[0]) == [10, 12, 14]


def test_dilated_line_example():
    t = dilated_knn(line(10), DilationPlan(2, 2, deterministic=True)).indices
    assert set(t[0]) == {1, 3}


def test_d1_is_plain_knn():
    x = np.random.default_rng(3).random((80, 3))
    assert np.array_equal(dilated_knn(x, DilationPlan(8, 1)).indices, knn_bruteforce(x, 8).indices)


@pytest.mark.parametrize("k,d", [(4, 1), (4, 2), (8, 4), (16, 2)])
def test_dilated_matches_oracle(k, d):
    x = np.random.default_rng(k * 10 + d).random((150, 3))
    assert np.array_equal(dilated_knn(x, DilationPlan(k, d, deterministic=True)).indices,
                          oracle_dilated(x, k, d))


def test_dilation_clamped_on_small_graphs():
    assert clamp_dilation(10, 3, 4) == 3
    assert clamp_dilation(5, 4, 2) == 1
    with pytest.raises(ValueError):
        clamp_dilation(4, 4, 1)
    t = dilated_knn(line(10), DilationPlan(3, 8, deterministic=True)).indices
    assert np.array_equal(t, oracle_dilated(line(10), 3, 3))


def test_plan_validation():
    for kw in (dict(k=0), dict(k=2, d=0), dict(k=2, epsilon=1.5)):
        with pytest.raises(ValueError):
            DilationPlan(**kw)


def test_stochastic_needs_rng():
    with pytest.raises(ValueError):
        dilated_knn(line(20), DilationPlan(2, 2, 0.5))


def test_random_branch_frequency():
    x = np.random.default_rng(4).random((10_000, 3))
    _, rows = dilated_knn(x, DilationPlan(4, 2, 0.2), np.random.default_rng(5), return_random_rows=True)
    assert 0.18 <= rows.mean() <= 0.22


def test_random_rows_are_distinct_subsets_of_candidates():
    x = np.random.default_rng(6).random((300, 3))
    t, rows = dilated_knn(x, DilationPlan(4, 3, 1.0), np.random.default_rng(7), return_random_rows=True)
    assert rows.all()
    cand = sorted_neighbors(x, 12)
    for v in range(300):
        assert set(t.indices[v]) <= set(cand[v])
        assert len(set(t.indices[v])) == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 3))
def test_epsilon_zero_equals_deterministic(seed, k, d):
    x = np.random.default_rng(seed).random((40, 3))
    det = dilated_knn(x, DilationPlan(k, d, deterministic=True)).indices
    zero = dilated_knn(x, DilationPlan(k, d, 0.0), np.random.default_rng(seed + 1)).indices
    assert np.array_equal(det, zero)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 3))
def test_deterministic_output_subset_of_kd_nn(seed, k, d):
    x = np.random.default_rng(seed).random((30, 2))
    t = dilated_knn(x, DilationPlan(k, d, 0.5, deterministic=True), np.random.default_rng(seed)).indices
    cand = sorted_neighbors(x, k * clamp_dilation(30, k, d))
    for v in range(30):
        assert set(t[v]) <= set(cand[v])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_deterministic_flag_is_seed_independent(seed):
    x = np.random.default_rng(seed).random((60, 3))
    plan = DilationPlan(4, 2, 0.9, deterministic=True)
    a = dynamic_rebuild(x, plan, np.random.default_rng(seed)).indices
    b = dynamic_rebuild(x, plan, np.random.default_rng(seed + 1)).indices
    assert np.array_equal(a, b)


def test_rebuild_is_pure():
    x = np.random.default_rng(8).random((50, 4))
    plan = DilationPlan(5, 2, deterministic=True)
    assert np.array_equal(dynamic_rebuild(x, plan).indices, dynamic_rebuild(x.copy(), plan).indices)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_rebuild_permutes_with_vertices(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((40, 3))
    perm = rng.permutation(40)
    plan = DilationPlan(4, 2, deterministic=True)
    a = dynamic_rebuild(x, plan)
    b = dynamic_rebuild(x[perm], plan)
    # compare as neighbour sets; ordering among equidistant points may follow ids
    for i in range(40):
        assert set(perm[b.indices[i]]) == set(a.indices[perm[i]])


def test_offsets_keep_graphs_separate():
    x = np.random.default_rng(9).random((30, 3))
    t = dilated_knn(x, DilationPlan(3, 2, deterministic=True), offsets=[0, 12, 30]).indices
    assert t[:12].max() < 12 and t[12:].min() >= 12
    assert np.array_equal(t[12:] - 12, oracle_dilated(x[12:], 3, 2))
