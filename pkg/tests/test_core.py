import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mondrian_kernel.core import (
    BoundedBox,
    DegenerateBoxError,
    InvalidRateError,
    MondrianNode,
    MondrianTree,
    RngStream,
    assign_leaves,
    cut_schedule,
    cuts_1d,
    data_box,
    exp_from_uniform,
    extend_conditional,
    iter_root_to_leaf_paths,
    leaf_of,
    linear_dimension,
    restrict,
    sample_exp,
    sample_first_cut,
    sample_mondrian,
    truncate,
)
from mondrian_kernel.verify import poisson_gof, uniformity

UNIT_SQUARE = BoundedBox([0.0, 0.0], [1.0, 1.0])


def one_cut_tree(loc=0.5, t=0.4, lifetime=1.0):
    root = MondrianNode(0, BoundedBox([0.0], [1.0]), 0.0, t, 0, loc, 1, 2)
    left = MondrianNode(1, BoundedBox([0.0], [loc]), t, parent=0)
    right = MondrianNode(2, BoundedBox([loc], [1.0]), t, parent=0)
    return MondrianTree([root, left, right], lifetime)


# -- boxes ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "lower, upper, expected",
    [
        ([0, 0], [1, 1], 2.0),
        ([0.3, 0.3], [0.3, 0.3], 0.0),
        ([0, 1, 0], [3, 1, 0.5], 3.5),
    ],
)
def test_linear_dimension(lower, upper, expected):
    assert linear_dimension(BoundedBox(lower, upper)) == pytest.approx(expected)


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        BoundedBox([1.0], [0.0])


def test_data_box_pads_constant_columns():
    box = data_box(np.array([[1.0, 5.0], [2.0, 5.0]]))
    assert np.all(box.sides > 0)
    assert box.contains_point([1.0, 5.0]) and box.contains_point([2.0, 5.0])


# -- exponential draws ---------------------------------------------------------


def test_sample_exp_mean():
    rng = RngStream(1, 0)
    draws = np.array([sample_exp(2.0, rng) for _ in range(100_000)])
    se = 0.5 / math.sqrt(draws.size)
    assert abs(draws.mean() - 0.5) < 3 * se


def test_exp_inverse_cdf_boundaries():
    assert exp_from_uniform(1.0, 3.0) == 0.0
    assert exp_from_uniform(math.exp(-1.0), 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("rate", [0.0, -1.0, math.inf])
def test_sample_exp_rejects_bad_rate(rate):
    with pytest.raises(InvalidRateError):
        sample_exp(rate, RngStream(0))


# -- first cut -----------------------------------------------------------------


def _dims(box, n, seed=0):
    rng = RngStream(seed, 0)
    return np.array([sample_first_cut(box, rng)[1] for _ in range(n)])


def test_first_cut_dimension_unit_square():
    n = 100_000
    freq = np.mean(_dims(UNIT_SQUARE, n) == 0)
    assert abs(freq - 0.5) < 3 * math.sqrt(0.25 / n)


def test_first_cut_dimension_proportional_to_side():
    n = 100_000
    freq = np.mean(_dims(BoundedBox([0, 0], [2, 1]), n, seed=3) == 0)
    p = 2 / 3
    assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_first_cut_skips_flat_dimension():
    dims = _dims(BoundedBox([0, 5], [1, 5]), 2000)
    assert np.all(dims == 0)


def test_first_cut_location_inside_box():
    box = BoundedBox([0, -1], [2, 3])
    rng = RngStream(0)
    for _ in range(500):
        _, d, x = sample_first_cut(box, rng)
        assert box.lower[d] < x < box.upper[d]


def test_first_cut_degenerate_box():
    with pytest.raises(DegenerateBoxError):
        sample_first_cut(BoundedBox([1, 1], [1, 1]), RngStream(0))


# -- sampling ------------------------------------------------------------------


def test_zero_lifetime_gives_single_leaf():
    tree = sample_mondrian(UNIT_SQUARE, 0.0, RngStream(0))
    assert len(tree.nodes) == 1 and tree.num_cuts == 0


def test_negative_lifetime_rejected():
    with pytest.raises(ValueError):
        sample_mondrian(UNIT_SQUARE, -1.0, RngStream(0))


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        sample_mondrian(BoundedBox([0.5], [0.5]), 1.0, RngStream(0))


def check_tree_invariants(tree: MondrianTree):
    for n in tree.nodes:
        if n.is_leaf:
            assert n.left is None and n.right is None and n.cut_dim is None
            continue
        assert n.cut_time > n.birth_time
        assert n.cut_time <= tree.lifetime
        assert n.box.lower[n.cut_dim] < n.cut_loc < n.box.upper[n.cut_dim]
        left, right = tree.nodes[n.left], tree.nodes[n.right]
        assert left.birth_time == right.birth_time == n.cut_time
        lbox, rbox = n.box.split(n.cut_dim, n.cut_loc)
        assert left.box == lbox and right.box == rbox
    for path in iter_root_to_leaf_paths(tree):
        times = [n.cut_time for n in path if not n.is_leaf]
        assert all(a < b for a, b in zip(times, times[1:]))
        assert all(t <= tree.lifetime for t in times)


@pytest.mark.parametrize("seed", range(5))
def test_tree_invariants_unit_square(seed):
    check_tree_invariants(sample_mondrian(UNIT_SQUARE, 1.5, RngStream(seed)))


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32),
    lifetime=st.floats(0, 4),
    sides=st.lists(st.floats(0.1, 2.0), min_size=1, max_size=4),
)
def test_tree_invariants_property(seed, lifetime, sides):
    box = BoundedBox(np.zeros(len(sides)), np.array(sides))
    check_tree_invariants(sample_mondrian(box, lifetime, RngStream(seed)))


def test_determinism():
    a = sample_mondrian(UNIT_SQUARE, 3.0, RngStream(7, 11))
    b = sample_mondrian(UNIT_SQUARE, 3.0, RngStream(7, 11))
    c = sample_mondrian(UNIT_SQUARE, 3.0, RngStream(7, 12))
    assert a.to_json() == b.to_json()
    assert a.to_json() != c.to_json()


def test_monotone_refinement():
    X = np.random.default_rng(0).random((200, 2))
    tree = sample_mondrian(UNIT_SQUARE, 4.0, RngStream(2))
    coarse = assign_leaves(tree, X, 1.0)
    fine = assign_leaves(tree, X, 3.0)
    # every fine cell lies inside exactly one coarse cell
    for leaf in np.unique(fine):
        assert np.unique(coarse[fine == leaf]).size == 1


def test_cut_counts_1d_poisson():
    box = BoundedBox([0.0], [1.0])
    counts = [sample_mondrian(box, 2.0, RngStream(3, i)).num_cuts for i in range(10_000)]
    assert poisson_gof(counts, 2.0).passed


# -- 1-D representation --------------------------------------------------------


def test_cuts_1d_zero_lifetime():
    assert cuts_1d(0.0, 1.0, 0.0, RngStream(0)) == []


def test_cuts_1d_requires_interval():
    with pytest.raises(ValueError):
        cuts_1d(1.0, 1.0, 1.0, RngStream(0))


def test_cuts_1d_counts_poisson():
    rng = RngStream(4)
    counts = [len(cuts_1d(0.0, 2.0, 1.0, rng)) for _ in range(10_000)]
    assert poisson_gof(counts, 2.0).passed


def test_cuts_1d_location_mean():
    rng = RngStream(5)
    draws = [cuts_1d(0.0, 1.0, 3.0, rng) for _ in range(5000)]
    locs = np.concatenate(draws)
    se = math.sqrt(1 / 12 / locs.size)
    assert abs(locs.mean() - 0.5) < 3 * se
    assert all(list(d) == sorted(d) for d in draws)


def test_1d_mondrian_matches_two_stage_sampler():
    box = BoundedBox([0.0], [1.0])
    direct = [sample_mondrian(box, 2.0, RngStream(6, i)) for i in range(10_000)]
    rng = RngStream(7)
    staged = [cuts_1d(0.0, 1.0, 2.0, rng) for _ in range(10_000)]
    a = np.concatenate([t.cut_locations() for t in direct])
    b = np.concatenate(staged)
    assert stats.ks_2samp(a, b).pvalue > 0.01
    assert stats.ks_2samp([t.num_cuts for t in direct], [len(s) for s in staged]).pvalue > 0.01
    assert uniformity(a, 0.0, 1.0).passed


# -- restriction ---------------------------------------------------------------


def test_restrict_identity():
    tree = sample_mondrian(UNIT_SQUARE, 3.0, RngStream(1))
    assert restrict(tree, tree.box).structurally_equal(tree)


def test_restrict_to_slice_has_no_cuts_in_flat_dimension():
    for seed in range(20):
        tree = sample_mondrian(UNIT_SQUARE, 4.0, RngStream(seed))
        sliced = restrict(tree, BoundedBox([0.3, 0.0], [0.3, 1.0]))
        assert all(n.cut_dim == 1 for n in sliced.internal_nodes())


def test_restrict_keeps_times_and_partition():
    tree = sample_mondrian(UNIT_SQUARE, 5.0, RngStream(9))
    sub = BoundedBox([0.2, 0.1], [0.7, 0.6])
    r = restrict(tree, sub)
    check_tree_invariants(r)
    assert set(r.cut_times()) <= set(tree.cut_times())
    X = sub.lower + np.random.default_rng(1).random((300, 2)) * sub.sides
    a, b = assign_leaves(tree, X), assign_leaves(r, X)
    # same induced partition of the points
    pairs = {(int(i), int(j)) for i, j in zip(a, b)}
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})


def test_restrict_rejects_outside_box():
    tree = sample_mondrian(UNIT_SQUARE, 1.0, RngStream(0))
    with pytest.raises(ValueError):
        restrict(tree, BoundedBox([0.5, 0.5], [1.5, 1.0]))


def test_restriction_first_cut_law_matches_direct():
    big = BoundedBox([0, 0], [2, 2])
    sub = BoundedBox([0.5, 0.5], [1.5, 1.5])
    n = 4000

    def first(t):
        return t.first_cut_time() if t.first_cut_time() is not None else 1.0

    restricted = [first(restrict(sample_mondrian(big, 1.0, RngStream(10, i)), sub)) for i in range(n)]
    direct = [first(sample_mondrian(sub, 1.0, RngStream(11, i))) for i in range(n)]
    assert stats.ks_2samp(restricted, direct).pvalue > 0.01


# -- conditional extension -----------------------------------------------------


def test_extend_to_same_box_is_identity():
    tree = sample_mondrian(UNIT_SQUARE, 2.0, RngStream(3))
    ext = extend_conditional(tree, UNIT_SQUARE, RngStream(4))
    assert ext.structurally_equal(tree)


def test_extend_rejects_smaller_target():
    tree = sample_mondrian(UNIT_SQUARE, 1.0, RngStream(0))
    with pytest.raises(ValueError):
        extend_conditional(tree, BoundedBox([0, 0], [0.5, 1]), RngStream(0))


@pytest.mark.parametrize("seed", range(10))
def test_extension_restricts_back_to_the_original(seed):
    phi = BoundedBox([0.25, 0.25], [0.75, 0.75])
    small = sample_mondrian(phi, 3.0, RngStream(seed, 0))
    ext = extend_conditional(small, UNIT_SQUARE, RngStream(seed, 1))
    check_tree_invariants(ext)
    assert restrict(ext, phi).structurally_equal(small)


def test_extension_probability_of_first_cut():
    # LD(target) - LD(tree box) = 1 and the tree's first cut is at 0.7
    tree = one_cut_tree(loc=0.5, t=0.7, lifetime=0.75)
    target = BoundedBox([-0.5], [1.5])
    n = 100_000
    rng = RngStream(12)
    hits = 0
    for _ in range(n):
        ext = extend_conditional(tree, target, rng)
        root = ext.nodes[0]
        hits += root.cut_time == 0.7 and root.cut_loc == 0.5
    p = math.exp(-0.7)
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_extension_first_cut_law():
    phi = BoundedBox([0.25, 0.25], [0.75, 0.75])
    n = 4000
    firsts = []
    for i in range(n):
        small = sample_mondrian(phi, 1.0, RngStream(13, 2 * i))
        t = extend_conditional(small, UNIT_SQUARE, RngStream(13, 2 * i + 1)).first_cut_time()
        firsts.append(1.0 if t is None else t)
    # min(Exp(2), 1): atom at the lifetime, truncated exponential below it
    firsts = np.array(firsts)
    censored = firsts >= 1.0
    p = math.exp(-2.0)
    assert abs(censored.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)
    cdf = lambda t: (1 - np.exp(-2 * t)) / (1 - p)
    assert stats.kstest(firsts[~censored], cdf).pvalue > 0.01


# -- leaves and schedules ------------------------------------------------------


def test_leaf_of_cut_free_tree():
    tree = sample_mondrian(UNIT_SQUARE, 0.0, RngStream(0))
    assert leaf_of(tree, [0.1, 0.9]) == tree.root


def test_leaf_of_tie_goes_left():
    tree = one_cut_tree()
    assert leaf_of(tree, [0.2]) == 1
    assert leaf_of(tree, [0.9]) == 2
    assert leaf_of(tree, [0.5]) == 1


def test_assign_leaves_matches_leaf_of():
    tree = sample_mondrian(UNIT_SQUARE, 4.0, RngStream(1))
    X = np.random.default_rng(2).random((100, 2))
    assert list(assign_leaves(tree, X)) == [leaf_of(tree, x) for x in X]


def test_cut_schedule_merge():
    a = one_cut_tree(t=0.2)
    b = one_cut_tree(t=0.5)
    c = truncate(sample_mondrian(BoundedBox([0], [1]), 0.0, RngStream(0)), 0.0)
    # add a second cut at 0.8 below a's left child
    a.nodes[1].cut_time, a.nodes[1].cut_dim, a.nodes[1].cut_loc = 0.8, 0, 0.25
    a.nodes += [
        MondrianNode(3, BoundedBox([0], [0.25]), 0.8, parent=1),
        MondrianNode(4, BoundedBox([0.25], [0.5]), 0.8, parent=1),
    ]
    a.nodes[1].left, a.nodes[1].right = 3, 4
    sched = cut_schedule([a, b, c])
    assert [e[0] for e in sched] == [0.2, 0.5, 0.8]
    assert [e[1] for e in sched] == [0, 1, 0]
    assert cut_schedule([c]) == []


def test_truncate_matches_lifetime_view():
    tree = sample_mondrian(UNIT_SQUARE, 4.0, RngStream(8))
    X = np.random.default_rng(3).random((200, 2))
    t = truncate(tree, 2.0)
    assert all(c <= 2.0 for c in t.cut_times())
    a, b = assign_leaves(tree, X, 2.0), assign_leaves(t, X)
    assert len(set(zip(a, b))) == len(set(a)) == len(set(b))


# -- serialisation -------------------------------------------------------------


def test_json_round_trip_is_lossless():
    tree = sample_mondrian(BoundedBox([0, -1, 2], [1.0 / 3, 1, 2.5]), 3.0, RngStream(21))
    back = MondrianTree.from_json(tree.to_json())
    assert back.structurally_equal(tree)
    assert back.to_json() == tree.to_json()
    rec = json.loads(tree.to_json())["nodes"][0]
    assert {"id", "birth", "box"} <= set(rec)
