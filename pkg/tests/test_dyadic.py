import pytest

from app.exceptions import IndivisibleIntervalError
from app.models.grid import DyadicInterval, Grid, Lattice, RegionTag
from app.services.dyadic import (
    bad_fraction,
    classify_all_pairs,
    delta_from_eps,
    good_estimate_sweep,
    good_nested_pairs,
    halves,
    interval_distance,
    is_bad,
    lattice_shifts,
    region_classify,
    region_memberships,
    region_partition_check,
)


def test_halves_of_unit_interval():
    grid = Grid(0.0, 1.0, 4)
    lower, upper = halves(DyadicInterval(4, 0))
    assert lower.bounds(grid) == (0.0, 0.5)
    assert upper.bounds(grid) == (0.5, 1.0)


def test_halves_of_quarter():
    grid = Grid(0.0, 1.0, 4)
    lower, upper = halves(DyadicInterval(2, 1))
    assert lower.bounds(grid) == (0.25, 0.375)
    assert upper.bounds(grid) == (0.375, 0.5)


def test_single_cell_has_no_halves():
    with pytest.raises(IndivisibleIntervalError):
        halves(DyadicInterval(0, 3))


@pytest.mark.parametrize("eps, expected", [(1.0, 0.25), (2.0, 1 / 3)])
def test_delta_from_eps(eps, expected):
    delta = delta_from_eps(eps)
    assert delta == pytest.approx(expected)
    assert eps - delta * (1 + eps) == pytest.approx(eps / 2)


def test_delta_rejects_other_dimensions():
    with pytest.raises(ValueError):
        delta_from_eps(1.0, d=2)


def test_interval_distance_uses_closed_hulls():
    assert interval_distance(DyadicInterval(0, 0), DyadicInterval(0, 1)) == 0
    assert interval_distance(DyadicInterval(0, 0), DyadicInterval(0, 2)) == 1


def test_close_to_large_boundary_is_bad():
    """ℓ(J) = 2^-4 at distance 1/16 from the boundary of [0, 1): threshold is 1/2."""
    lattice = Lattice(Grid(0.0, 1.0, 8))
    J = DyadicInterval(4, 1)
    assert is_bad(J, lattice, r=4, delta=0.25)


def test_far_from_every_large_boundary_is_good():
    lattice = Lattice(Grid(0.0, 1.0, 8))
    assert not is_bad(DyadicInterval(0, 88), lattice, r=6, delta=0.25)


def test_bad_fraction_does_not_grow_with_r():
    fractions = bad_fraction(Grid(0.0, 1.0, 8), level=0, rs=[1, 2, 3, 4, 5], delta=0.25, samples=20, seed=7)
    values = [fractions[r] for r in (1, 2, 3, 4, 5)]
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    assert values[0] > 0


def test_good_estimate_holds_for_every_good_pair():
    # nothing is good below r = 6 when δ = 1/4
    grid = Grid(0.0, 1.0, 8)
    checked, failures = good_estimate_sweep(grid, Lattice.from_omega(grid, 0.125), Lattice(grid), r=6, eps=1.0)
    assert checked > 0
    assert failures == 0


def test_output_below_input_is_the_vanishing_region():
    I = DyadicInterval(2, 1)  # cells [4, 8)
    J = DyadicInterval(0, 0)  # cell 0
    assert region_classify(I, J, r=4, good_J=True, good_I=True) is RegionTag.JltI


def test_neighbouring_cells_are_diagonal():
    assert region_classify(DyadicInterval(0, 0), DyadicInterval(0, 2), r=0, good_J=True, good_I=True) is RegionTag.Diagonal


def test_small_good_interval_inside_large_one():
    I = DyadicInterval(8, 0)
    J = DyadicInterval(0, 0)
    assert region_classify(I, J, r=4, good_J=True, good_I=True) is RegionTag.I5
    assert region_classify(I, J, r=4, good_J=False, good_I=True) is RegionTag.Bad


def test_far_pairs_split_by_size():
    small, large = DyadicInterval(0, 0), DyadicInterval(2, 4)  # cell 0 and cells [16, 20)
    assert region_classify(small, large, r=1, good_J=True, good_I=True) is RegionTag.I2
    assert region_classify(DyadicInterval(2, 0), DyadicInterval(0, 40), r=1, good_J=True, good_I=True) is RegionTag.I1


def test_every_pair_gets_exactly_one_tag():
    grid = Grid(0.0, 1.0, 6)
    lattice_i, lattice_j = Lattice(grid), Lattice(grid, 5)
    tags = classify_all_pairs(grid, lattice_i, lattice_j, r=2, eps=1.0)
    expected = len(lattice_i.all_intervals()) * len(lattice_j.all_intervals())
    assert sum(tags.values()) == expected
    assert set(tags) <= set(RegionTag)
    assert tags[RegionTag.JltI] > 0


@pytest.mark.parametrize("m, r", [(6, 2), (8, 6)])
def test_every_pair_lies_in_exactly_one_region(m, r):
    grid = Grid(0.0, 1.0, m)
    lattice_i, lattice_j = Lattice(grid), Lattice.from_omega(grid, 0.125)
    pairs, failures = region_partition_check(grid, lattice_i, lattice_j, r=r, eps=1.0)
    assert pairs == len(lattice_i.all_intervals()) * len(lattice_j.all_intervals())
    assert failures == 0


def test_region_conditions_are_tested_independently():
    I, J = DyadicInterval(8, 0), DyadicInterval(0, 0)
    assert region_memberships(I, J, r=4, good_J=True, good_I=True) == [RegionTag.I5]
    assert region_memberships(I, J, r=4, good_J=False, good_I=True) == [RegionTag.Bad]
    # ℓ(I) = 2^r ℓ(J) is still near the diagonal
    assert region_memberships(DyadicInterval(4, 0), J, r=4, good_J=True, good_I=True) == [RegionTag.Diagonal]


def test_good_nested_pairs_sit_inside_one_half():
    grid = Grid(0.0, 1.0, 8)
    lattice_i, lattice_j = Lattice(grid), Lattice.from_omega(grid, -1 / 6)
    pairs = good_nested_pairs(grid, lattice_i, lattice_j, r=6, eps=1.0)
    assert (lattice_i.interval_at(7, 0), lattice_j.interval_at(0, 87)) in pairs
    for I, J in pairs:
        assert region_classify(I, J, r=6, good_J=True, good_I=True) is RegionTag.I5
        assert not is_bad(J, lattice_i, r=6, delta=0.25)
        assert any(half.contains(J) for half in I.halves())


def test_no_good_nested_pairs_below_r6():
    grid = Grid(0.0, 1.0, 8)
    assert good_nested_pairs(grid, Lattice(grid), Lattice.from_omega(grid, -1 / 6), r=4, eps=1.0) == []


@pytest.mark.parametrize("m, expected", [(1, (0,)), (6, (-11, 0))])
def test_lattice_shifts_drop_duplicates(m, expected):
    assert lattice_shifts(Grid(0.0, 1.0, m)) == expected
