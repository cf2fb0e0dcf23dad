import numpy as np
import pytest
from scipy import linalg

from app.exceptions import ResourceLimitError
from app.models.grid import DyadicInterval, Grid
from app.models.operator import CausalKernel
from app.services import operators
from app.services.operators import (
    discretize,
    hilbert_causal,
    kernel_axioms_check,
    kernel_from_expression,
    level_set_components,
    lower_upper_components,
    max_down,
    max_down_naive,
    max_up,
    max_up_naive,
    maximal_norm_estimate,
    mr_bound_ratio,
    poisson_average,
    spectral_norm,
    weighted_operator_norm,
    zero_kernel,
)
from app.services.weights import family_generate


def test_zero_kernel_gives_zero_operator(zero6, unit_weight):
    assert not np.any(zero6.entries)
    assert weighted_operator_norm(zero6, unit_weight) == 0.0


def test_hilbert_matrix_is_strictly_lower_triangular(hilbert6, grid6):
    x = grid6.midpoints
    i, j = np.tril_indices(grid6.n, k=-1)
    np.testing.assert_allclose(hilbert6.entries[i, j], grid6.cell_width / (x[i] - x[j]), rtol=1e-14)
    assert not np.any(np.triu(hilbert6.entries))
    assert hilbert6.is_causal()


def test_transpose_is_discretized_transposed_kernel(hilbert6, grid6):
    np.testing.assert_array_equal(hilbert6.transpose().entries, discretize(hilbert_causal().transposed(), grid6).entries)


def test_band_clears_the_near_diagonal(grid6):
    T = discretize(hilbert_causal(), grid6, band=3)
    assert not np.any(np.tril(T.entries, k=-1) - np.tril(T.entries, k=-3))


def test_dense_mode_limit():
    with pytest.raises(ResourceLimitError):
        discretize(zero_kernel(), Grid(0.0, 1.0, 13))


def test_causality_identity(hilbert6, rng):
    f = rng.normal(size=hilbert6.n)
    for k in (1, 17, 40, 63):
        cut = np.where(np.arange(hilbert6.n) < k, f, 0.0)
        np.testing.assert_allclose(hilbert6.apply(f)[:k], hilbert6.apply(cut)[:k], rtol=1e-13, atol=1e-13)


def test_hilbert_kernel_axioms():
    report = kernel_axioms_check(hilbert_causal(), samples=2000, seed=0)
    assert report.passes_causality
    assert report.passes_size
    assert np.isfinite(report.smoothness_constant)


def test_symmetric_kernel_breaks_causality():
    kernel = CausalKernel(lambda x, y: 1.0 / np.abs(x - y), name="symmetric")
    report = kernel_axioms_check(kernel, samples=200, seed=1)
    assert not report.passes_causality
    assert report.causality_violations > 0


def test_zero_kernel_passes_everything():
    report = kernel_axioms_check(zero_kernel(), samples=200, seed=2)
    assert report.passes_causality and report.passes_size and report.passes_smoothness


def test_expression_kernel_matches_builtin(grid6):
    kernel = kernel_from_expression("1 / (x - y)")
    np.testing.assert_allclose(discretize(kernel, grid6).entries, discretize(hilbert_causal(), grid6).entries, rtol=1e-14)


@pytest.mark.parametrize("expression", ["__import__('os')", "x +", "scipy.special.j0(x)"])
def test_expression_kernel_rejects_bad_input(expression):
    with pytest.raises(ValueError):
        kernel_from_expression(expression)


def test_maximal_of_constant_is_constant():
    f = np.full(32, 2.5)
    np.testing.assert_allclose(max_up(f), f)
    np.testing.assert_allclose(max_down(f), f)


def test_fast_maximal_matches_naive(rng):
    for _ in range(10):
        f = rng.exponential(size=50) * (rng.random(50) < 0.6)
        np.testing.assert_allclose(max_up(f, (5, 45)), max_up_naive(f, (5, 45)), rtol=1e-12, equal_nan=True)
        np.testing.assert_allclose(max_down(f, (5, 45)), max_down_naive(f, (5, 45)), rtol=1e-12, equal_nan=True)
        np.testing.assert_allclose(max_up(f, r=2.0), max_up_naive(f, r=2.0), rtol=1e-12)


def test_maximal_is_nan_outside_the_localization():
    values = max_up(np.ones(16), (4, 12))
    assert np.all(np.isnan(values[:4])) and np.all(np.isnan(values[12:]))


def test_indicator_level_set_on_two_units():
    """f = χ_[0,1) on [0,2): M↑f = 1/x beyond 1, so {M↑f > 2/3} ends at 3/2."""
    grid = Grid(0.0, 2.0, 6)
    f = np.where(grid.midpoints < 1.0, 1.0, 0.0)
    M = max_up(f)
    assert M[47] == pytest.approx(2 / 3)
    assert level_set_components(M, 2 / 3) == [(0, 47)]
    assert float(np.mean(f[:47])) == pytest.approx(2 / 3, abs=1 / 47)


def test_poisson_average_of_lebesgue():
    """∫ 1/(1 + |t − c|)² over [−8, 8) with c = −1/2."""
    grid = Grid(-8.0, 8.0, 12)
    I = DyadicInterval(8, 7)  # [−1, 0)
    value = poisson_average(I, np.full(grid.n, grid.cell_width), 1.0, grid)
    assert value == pytest.approx(2 - 1 / 8.5 - 1 / 9.5, abs=1e-4)


def test_poisson_average_of_zero_and_point_mass(grid6):
    I = DyadicInterval(2, 3)
    assert poisson_average(I, np.zeros(grid6.n), 1.0, grid6) == 0.0
    mass = np.zeros(grid6.n)
    mass[40] = 1.0
    l, c = I.length(grid6), I.center(grid6)
    assert poisson_average(I, mass, 1.0, grid6) == pytest.approx(l / (l + abs(c - grid6.midpoints[40])) ** 2)


@pytest.mark.parametrize(
    "J1, J2, expected",
    [((0, 16), (4, 8), ((0, 4), (8, 16))), ((0, 16), (0, 8), ((0, 0), (8, 16))), ((0, 16), (0, 16), ((0, 0), (16, 16)))],
)
def test_lower_upper_components(J1, J2, expected):
    assert lower_upper_components(J1, J2) == expected


def test_lower_upper_components_needs_containment():
    with pytest.raises(ValueError):
        lower_upper_components((0, 8), (4, 12))


def test_unit_weight_norm_is_plain_spectral_norm(hilbert6, unit_weight):
    assert weighted_operator_norm(hilbert6, unit_weight) == pytest.approx(linalg.svdvals(hilbert6.entries)[0], rel=1e-12)


def test_norm_modes_agree(hilbert6, random_weights):
    for w in random_weights:
        assert weighted_operator_norm(hilbert6, w, "bilinear_mu_nu") == pytest.approx(
            weighted_operator_norm(hilbert6, w, "L2w"), rel=1e-10
        )


def test_norm_on_weight_equals_transpose_norm_on_inverse(hilbert6, random_weights):
    for w in random_weights:
        assert weighted_operator_norm(hilbert6.transpose(), w.inverse()) == pytest.approx(
            weighted_operator_norm(hilbert6, w), rel=1e-10
        )


def test_power_iteration_agrees_with_dense(monkeypatch, rng):
    A = 5.0 * np.outer(rng.random(24), rng.random(24)) + 0.1 * rng.normal(size=(24, 24))
    dense = spectral_norm(A)
    monkeypatch.setattr(operators, "DENSE_NORM_MAX_CELLS", 8)
    assert spectral_norm(A) == pytest.approx(dense, rel=1e-4)


def test_maximal_norm_estimate_is_at_least_one(unit_weight):
    assert maximal_norm_estimate(unit_weight, trials=4) >= 1.0


def test_mr_bound_ratio_is_finite(hilbert6, grid6, rng):
    w = family_generate("power", {"a": 0.5}, 0, grid6)
    ratio = mr_bound_ratio(hilbert6, w, rng.random(grid6.n), p=2.0, r=1.5)
    assert 0 < ratio < np.inf

