import math

import numpy as np
import pytest

from mondrian_kernel.grid import (
    DimensionExhausted,
    GridState,
    IntervalCuts,
    SearchComplete,
    decrease_lifetime,
    greedy_step,
    greedy_step_bidirectional,
    increase_lifetime,
    init_grid,
    rebuild,
    run_search,
    select_features,
)
from mondrian_kernel.kernel_approx import FeatureState
from mondrian_kernel.linalg import laplace_gram


def toy(n=60, D=2, seed=0):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((n, D)), 3)
    y = np.sin(5 * X[:, 0]) + 0.05 * rng.standard_normal(n)
    idx = rng.permutation(n)
    return X, y, np.sort(idx[: 2 * n // 3]), np.sort(idx[2 * n // 3 :])


def grid(M=3, lambdas=None, seed=1, **kw):
    X, y, tr, va = toy(**kw)
    lam = np.zeros(X.shape[1]) if lambdas is None else lambdas
    return init_grid(X, M, lam, 0.5, y, tr, va, seed)


def aligned_inverse(state: GridState, ref: GridState) -> tuple[np.ndarray, np.ndarray]:
    """Both inverses with columns ordered by (grid, member rows)."""

    def order(s):
        keys = [(m, tuple(s.cells[m][k])) for m, k in s.features.labels]
        return np.argsort([repr(k) for k in keys])

    a, b = order(state), order(ref)
    return state.features.inv.inv[np.ix_(a, a)], ref.features.inv.inv[np.ix_(b, b)]


def assert_matches_rebuild(state: GridState):
    ref = rebuild(state)
    assert state.partition() == ref.partition()
    got, want = aligned_inverse(state, ref)
    assert np.abs(got - want).max() <= 1e-8
    assert state.features.inverse_error() <= 1e-8
    assert state.rmse() == pytest.approx(ref.rmse(), rel=1e-9)


# -- initialisation ------------------------------------------------------------


def test_first_cut_times_positive_and_fixed():
    X, *_ = toy()
    a = IntervalCuts.sample(X, 4, 3)
    b = IntervalCuts.sample(X, 4, 3)
    for d in range(2):
        assert np.all(np.diff(a.coords[d]) > 0)
        assert a.times[d].shape == (4, a.coords[d].size - 1)
        assert np.all(a.times[d] > 0)
        assert np.array_equal(a.times[d], b.times[d])


def test_zero_config_features():
    s = grid(M=4)
    N = s.features.Z.shape[0]
    assert s.features.Z.shape == (N, 4)
    assert np.allclose(s.features.Z, 0.5)
    # the same check on the full data covariance
    C = s.features.Z.T @ s.features.Z + 0.25 * np.eye(4)
    assert np.allclose(C[~np.eye(4, dtype=bool)], N / 4)
    assert np.allclose(np.diag(C), N / 4 + 0.25)


def test_constant_dimension_never_cut():
    X, y, tr, va = toy()
    X[:, 1] = 0.3
    s = init_grid(X, 2, [0.0, 0.0], 0.5, y, tr, va, 0)
    assert s.ensemble.times[1].size == 0
    with pytest.raises(DimensionExhausted):
        s.increase_lifetime(1)


def test_three_point_configuration():
    # a and b share a cell, c is split off by the single active cut
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    coords = (np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 2.0]))
    times = (np.array([[5.0, 0.1]]), np.array([[5.0, 5.0]]))
    ranks = np.array([[0, 0], [1, 1], [2, 2]])
    ens = IntervalCuts(coords, times, ranks)
    s = GridState(ens, [1.0, 1.0], np.zeros(3), [0, 1, 2], [], 1.0)
    assert s.num_features == 2
    assert s.partition() == {(0, (0, 1)), (0, (2,))}


def test_same_cell_probability_is_general_laplace():
    x, z = np.array([0.2, 0.5]), np.array([0.6, 0.3])
    lam = np.array([1.5, 2.0])
    X = np.vstack([x, z])
    hits, n = 0, 10_000
    ens = IntervalCuts.sample(X, n, seed=5)
    for d in range(2):
        # with two points each dimension has exactly one gap
        hits_d = ens.times[d][:, 0] > lam[d]
        hits = hits_d if d == 0 else hits & hits_d
    p = float(laplace_gram(x, lam, z)[0, 0])
    assert abs(hits.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


# -- lifetime moves ------------------------------------------------------------


def test_increase_sets_lambda_to_cut_time():
    s = grid()
    t = s.ensemble.times[0]
    s2 = increase_lifetime(s, 0)
    assert s2.lambdas[0] == t.min()
    assert s.lambdas[0] == 0.0  # the copying wrapper leaves the input alone
    assert s2.active_cut_count(0) == 1


def test_increase_oracle_each_step():
    s = grid(M=2)
    for k in range(25):
        s = increase_lifetime(s, k % 2)
        assert_matches_rebuild(s)


def test_decrease_oracle_each_step():
    s = grid(M=2, lambdas=np.array([8.0, 8.0]))
    for k in range(25):
        s = decrease_lifetime(s, k % 2)
        assert_matches_rebuild(s)


def test_round_trip_restores_state():
    s = grid(M=3, lambdas=np.array([4.0, 2.0]))
    for d in (0, 1):
        back = decrease_lifetime(increase_lifetime(s, d), d)
        assert back.partition() == s.partition()
        got, want = aligned_inverse(back, s)
        assert np.abs(got - want).max() <= 1e-8
        assert back.rmse() == pytest.approx(s.rmse(), rel=1e-9)


def test_random_moves_match_rebuild():
    rng = np.random.default_rng(3)
    s = grid(M=3, lambdas=np.array([2.0, 2.0]), n=80)
    for _ in range(50):
        d = int(rng.integers(2))
        try:
            s = increase_lifetime(s, d) if rng.random() < 0.6 else decrease_lifetime(s, d)
        except DimensionExhausted:
            continue
    assert_matches_rebuild(s)


def test_configuration_determinism():
    s = grid(M=2)
    a = increase_lifetime(increase_lifetime(s, 0), 1)
    b = increase_lifetime(increase_lifetime(s, 1), 0)
    assert a.partition() == b.partition()
    assert a.rmse() == pytest.approx(b.rmse(), rel=1e-9)


def test_one_grid_last_cut_removed():
    s = grid(M=1)
    s = increase_lifetime(s, 0)
    while s.active_cut_count(0):
        s = decrease_lifetime(s, 0)
    assert s.num_features == 1
    assert np.allclose(s.features.Z, 1.0)


def test_decrease_exhausted():
    with pytest.raises(DimensionExhausted):
        grid().decrease_lifetime(0)


def test_neighbor_links_symmetric():
    s = grid(M=2, lambdas=np.array([3.0, 3.0]))
    for m, cells in enumerate(s.cells):
        for key in cells:
            for d in range(2):
                lo, hi = s.neighbors(m, key, d)
                if lo is not None:
                    assert s.neighbors(m, lo, d)[1] == key
                if hi is not None:
                    assert s.neighbors(m, hi, d)[0] == key


# -- search --------------------------------------------------------------------


def test_greedy_picks_argmin():
    s = grid()
    errors = [increase_lifetime(s, d).rmse() for d in range(2)]
    d, new, e = greedy_step(s)
    assert d == int(np.argmin(errors))
    assert e == pytest.approx(min(errors))
    assert new.rmse() == pytest.approx(rebuild(new).rmse(), rel=1e-9)


def test_greedy_one_dimension():
    s = grid(D=1)
    for _ in range(3):
        d, s, _ = greedy_step(s)
        assert d == 0


def test_greedy_exhaustion():
    X = np.array([[0.0], [1.0]])
    s = init_grid(X, 1, [0.0], 1.0, np.array([0.0, 1.0]), [0], [1], 0)
    # two points leave a single gap, so one step uses up every cut
    _, s, _ = greedy_step(s)
    with pytest.raises(SearchComplete):
        greedy_step(s)


def test_bidirectional_without_cuts_only_increases():
    s = grid()
    (d, direction), new, e = greedy_step_bidirectional(s)
    gd, gnew, ge = greedy_step(s)
    assert direction == +1 and d == gd and e == ge


def test_bidirectional_prefers_a_better_decrease():
    s = grid(M=2, lambdas=np.array([40.0, 40.0]))
    probes = {}
    for d in range(2):
        probes[(d, +1)] = increase_lifetime(s, d).rmse()
        probes[(d, -1)] = decrease_lifetime(s, d).rmse()
    (d, direction), new, e = greedy_step_bidirectional(s)
    assert e == pytest.approx(min(probes.values()))
    assert probes[(d, direction)] == pytest.approx(e)


def test_bidirectional_never_undoes_last_move():
    s = grid(M=2, lambdas=np.array([1.0, 1.0]))
    last = None
    for _ in range(15):
        move, s, _ = greedy_step_bidirectional(s)
        if last is not None:
            assert move != (last[0], -last[1])
        last = move
    assert_matches_rebuild(s)


def test_run_search_budget():
    with pytest.raises(ValueError):
        run_search(grid(), "greedy", 0)
    trace, _ = run_search(grid(), "greedy", 1)
    assert len(trace) == 1 and trace[0]["step"] == 1


def test_run_search_trace_matches_configs():
    s = grid(M=2)
    trace, final = run_search(s, "greedy", 8)
    assert len(trace) == 8
    for entry in trace:
        ref = rebuild(s, entry["lambdas"])
        assert entry["rmse_val"] == pytest.approx(ref.rmse(), rel=1e-9)
        assert entry["move"]["dir"] == "increase"
    assert list(final.lambdas) == trace[-1]["lambdas"]
    assert s.lambdas.sum() == 0.0


def test_run_search_stops_at_exhaustion():
    X = np.array([[0.0], [1.0], [2.0]])
    s = init_grid(X, 1, [0.0], 1.0, np.array([0.0, 1.0, 0.0]), [0, 1], [2], 0)
    trace, _ = run_search(s, "greedy", 10)
    assert len(trace) == 2


@pytest.mark.parametrize(
    "lambdas, eps, expected",
    [([0.0, 0.0], 1e-6, set()), ([0.4, 0.0], 0.01, {0}), ([1e-7, 2.0], 1e-6, {1})],
)
def test_select_features(lambdas, eps, expected):
    assert select_features(lambdas, eps) == expected


def test_select_features_rejects_bad_eps():
    with pytest.raises(ValueError):
        select_features([1.0], 0.0)


def test_feature_state_is_shared_type():
    assert isinstance(grid().features, FeatureState)
