import numpy as np
import pytest

from app.models.grid import DyadicInterval, Grid
from app.models.weight import Weight
from app.services.analysis import (
    HaarSystem,
    SparseTree,
    build_sparse,
    carleson_a,
    carleson_ratio,
    carleson_sum,
    haar_project,
    lemma_avg_ratio,
    lemma_avg_sup,
    mean_split,
    pivotal_constant,
    pivotal_ratio,
    pivotal_sup,
    poisson_decay_ratio,
    stopping_children,
)
from app.services.operators import poisson_weights
from app.services.weights import family_generate

ROOT = DyadicInterval(6, 0)


def test_haar_projection_on_two_cells():
    I = DyadicInterval(1, 0)
    np.testing.assert_allclose(haar_project(np.array([1.0, 3.0]), I, np.array([1.0, 1.0])), [-1.0, 1.0])
    np.testing.assert_allclose(haar_project(np.array([1.0, 3.0]), I, np.array([1.0, 3.0])), [-1.5, 0.5])


def test_haar_projection_of_constant_vanishes(grid6, rng):
    lam = rng.random(grid6.n) + 0.1
    np.testing.assert_allclose(haar_project(np.full(grid6.n, 4.0), ROOT, lam), 0.0, atol=1e-12)


def test_haar_projection_with_empty_child_is_zero():
    assert not np.any(haar_project(np.array([1.0, 3.0]), DyadicInterval(1, 0), np.array([0.0, 1.0])))


def test_parseval_for_weighted_haar_system(grid6, rng):
    measure = rng.random(grid6.n) + 0.05
    haar = HaarSystem(measure, grid6)
    f = rng.normal(size=grid6.n)
    lhs, rhs = haar.parseval_check(f, ROOT)
    assert rhs == pytest.approx(lhs, rel=1e-10)
    lhs, rhs = haar.parseval_check(f, DyadicInterval(3, 5))
    assert rhs == pytest.approx(lhs, rel=1e-10)


def test_decompose_covers_every_interval(grid6, rng):
    haar = HaarSystem(rng.random(grid6.n) + 0.05, grid6)
    coefficients = haar.decompose(rng.normal(size=grid6.n))
    assert len(coefficients) == grid6.n - 1
    assert all(v >= 0 for v in coefficients.values())


def test_mean_split_second_part_has_zero_mean(grid6, rng):
    lam = rng.random(grid6.n)
    f = rng.normal(size=grid6.n)
    f1, f2 = mean_split(f, lam, (8, 40))
    np.testing.assert_allclose(f1 + f2, f)
    assert f2[8:40] @ lam[8:40] == pytest.approx(0.0, abs=1e-12)
    assert not np.any(f1[:8]) and not np.any(f1[40:])


def test_pivotal_ratio_of_empty_family_is_zero(unit_weight):
    assert pivotal_ratio(ROOT, [], unit_weight.measures(), 1.0) == 0.0


def test_pivotal_ratio_of_halves(random_weights, grid6):
    """The lower half sees nothing below it inside I; the upper half sees the lower one."""
    lower, upper = ROOT.halves()
    for w in random_weights:
        mp = w.measures()
        P = poisson_weights(upper.center(grid6), upper.length(grid6), grid6, 1.0)[lower.cells] @ mp.mu[lower.cells]
        expected = P ** 2 * mp.nu[upper.cells].sum() / mp.mu.sum()
        assert pivotal_ratio(ROOT, [lower, upper], mp, 1.0) == pytest.approx(expected, rel=1e-12)
        assert pivotal_sup(ROOT, mp, 1.0) >= expected * (1 - 1e-12)


def test_pivotal_ratio_rejects_overlapping_family(unit_weight):
    with pytest.raises(ValueError):
        pivotal_ratio(ROOT, [DyadicInterval(4, 0), DyadicInterval(2, 1)], unit_weight.measures(), 1.0)


def test_pivotal_constant_dominates_every_interval(random_weights):
    for w in random_weights[:2]:
        mp = w.measures()
        K = pivotal_constant(mp, 1.0)
        assert K >= pivotal_sup(ROOT, mp, 1.0) * (1 - 1e-12)
        assert K >= pivotal_sup(DyadicInterval(3, 2), mp, 1.0) * (1 - 1e-12)


def test_unit_weight_tree_has_no_children(unit_weight):
    mp = unit_weight.measures()
    K = pivotal_constant(mp, 1.0)
    assert K > 0
    assert stopping_children(ROOT, K, mp, 1.0) == []
    tree = build_sparse(ROOT, K, mp, 1.0)
    assert tree.nodes == [ROOT]
    assert tree.sparse_ratio() == 0.0
    assert tree.packing_ratio() == pytest.approx(1.0)


def test_stopping_needs_positive_constant(unit_weight):
    with pytest.raises(ValueError):
        stopping_children(ROOT, 0.0, unit_weight.measures(), 1.0)


def test_trees_of_oscillating_weights_are_sparse(grid6):
    for seed in range(4):
        mp = family_generate("random_dyadic", {"beta": 8.0}, seed, grid6).measures()
        K = pivotal_constant(mp, 1.0)
        tree = build_sparse(ROOT, K, mp, 1.0, multiplier=4.0)
        assert tree.check_sparse()
        assert tree.check_packing()
        for S in tree.nodes:
            kids = tree.children(S)
            assert all(S.contains(Q) and Q != S for Q in kids)
            assert all(tree.generation[Q] == tree.generation[S] + 1 for Q in kids)
            assert all(not a.overlaps(b) for a, b in zip(kids, kids[1:]))
            assert all(tree.stopping_value[Q] >= tree.stopping_constant * (1 - 1e-12) for Q in kids)


def test_averaging_lemma_single_coefficient(unit_weight):
    """Lebesgue measure, ℓ(I) = ℓ(J): the t-th interval above I contributes t^-4."""
    mp = unit_weight.measures()
    a = np.zeros(32)
    a[0] = 1.0
    expected = sum(t ** -4.0 for t in range(1, 32))
    assert lemma_avg_ratio(1, 0, a, mp, 1.0) == pytest.approx(expected, rel=1e-12)
    assert lemma_avg_ratio(1, 0, a[::-1], mp, 1.0, mirrored=True) == pytest.approx(expected, rel=1e-12)
    assert lemma_avg_ratio(1, 0, {DyadicInterval(1, 0): 1.0}, mp, 1.0) == pytest.approx(expected, rel=1e-12)


def test_averaging_lemma_sup_dominates_samples(random_weights, rng):
    mp = random_weights[0].measures()
    best = lemma_avg_sup(3, 2, mp, 1.0)
    for _ in range(5):
        assert lemma_avg_ratio(3, 2, rng.normal(size=32), mp, 1.0) <= best * (1 + 1e-9)


def test_averaging_lemma_rejects_zero_coefficients(unit_weight):
    with pytest.raises(ValueError):
        lemma_avg_ratio(2, 1, np.zeros(32), unit_weight.measures(), 1.0)


def _two_node_tree(mp):
    child = DyadicInterval(5, 1)
    return SparseTree(
        root=ROOT,
        K=1.0,
        stopping_constant=100.0,
        mu=mp.mu,
        parent={ROOT: None, child: ROOT},
        generation={ROOT: 0, child: 1},
        _children={ROOT: [child]},
    ), child


def test_carleson_coefficients(unit_weight, zero6, hilbert6, grid6):
    mp = unit_weight.measures()
    tree, child = _two_node_tree(mp)
    haar = HaarSystem(mp.nu, grid6)
    assert carleson_a(child, 0, zero6, tree, haar) == 0.0
    assert carleson_a(child, 3, hilbert6, tree, haar) == 0.0
    value = carleson_a(child, 0, hilbert6, tree, haar)
    assert value > 0
    assert carleson_sum(ROOT, 0, hilbert6, tree, haar) == pytest.approx(value)
    assert np.isfinite(carleson_ratio(ROOT, 0, hilbert6, tree, haar, 1.0))


def test_carleson_needs_a_non_root_node(unit_weight, hilbert6, grid6):
    mp = unit_weight.measures()
    tree, _ = _two_node_tree(mp)
    haar = HaarSystem(mp.nu, grid6)
    with pytest.raises(ValueError):
        carleson_a(ROOT, 0, hilbert6, tree, haar)
    with pytest.raises(ValueError):
        carleson_a(DyadicInterval(2, 3), 0, hilbert6, tree, haar)


def test_poisson_decay_ratio_is_finite(random_weights, hilbert6, rng):
    mp = random_weights[1].measures()
    ratio = poisson_decay_ratio(ROOT, DyadicInterval(4, 2), DyadicInterval(2, 9), hilbert6, mp, rng.normal(size=64), 1.0)
    assert 0 <= ratio < np.inf
    with pytest.raises(ValueError):
        poisson_decay_ratio(ROOT, DyadicInterval(2, 9), DyadicInterval(4, 2), hilbert6, mp, rng.normal(size=64), 1.0)


def test_grid_depth_bounds_the_tree():
    grid = Grid(0.0, 1.0, 4)
    mp = family_generate("random_dyadic", {"beta": 8.0}, 3, grid).measures()
    tree = build_sparse(DyadicInterval(4, 0), pivotal_constant(mp, 1.0), mp, 1.0)
    assert max(tree.generation.values()) <= grid.m


def test_jump_weight_stops_at_the_heavy_half_with_default_multiplier(grid6):
    """w = 1 below ½ and 10⁶ above: the upper half is the only stopping child of the root."""
    w = Weight(grid6, np.where(grid6.midpoints < 0.5, 1.0, 1e6))
    mp = w.measures()
    K = pivotal_constant(mp, 1.0)
    assert stopping_children(ROOT, K, mp, 1.0) == [DyadicInterval(5, 1)]
    tree = build_sparse(ROOT, K, mp, 1.0)
    assert tree.nodes == [ROOT, DyadicInterval(5, 1)]
    assert tree.check_sparse()
    assert tree.check_packing()
