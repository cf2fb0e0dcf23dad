import math

import numpy as np
import pytest

from app.models.grid import Grid
from app.models.weight import Weight
from app.schemas.reports import SweepRow
from app.services import testing
from app.services.corpus import power_specs
from app.services.operators import discretize, hilbert_causal, weighted_operator_norm
from app.services.testing import a2_theorem_sweep, local_testing, loglog_slope, sweep_row, wbp_constant, wbp_tail_bound, weak_norm
from app.services.weights import ap_up_characteristic


@pytest.mark.parametrize("scope", ["local", "semilocal", "global"])
def test_zero_operator_has_zero_testing_constants(zero6, random_weights, scope):
    mp = random_weights[0].measures()
    assert local_testing(zero6, mp, scope) == 0.0


def test_zero_operator_has_zero_weak_constants(zero6, random_weights):
    w = random_weights[0]
    assert wbp_constant(zero6, w.measures()) == 0.0
    assert weak_norm(zero6, w) == 0.0


def test_unknown_scope_is_rejected(hilbert6, unit_weight):
    with pytest.raises(ValueError):
        local_testing(hilbert6, unit_weight.measures(), "everywhere")


def test_testing_constants_increase_with_the_region(hilbert6, random_weights):
    for w in random_weights:
        mp = w.measures()
        local = local_testing(hilbert6, mp, "local")
        semilocal = local_testing(hilbert6, mp, "semilocal")
        whole = local_testing(hilbert6, mp, "global")
        assert local <= semilocal * (1 + 1e-12)
        assert semilocal <= whole * (1 + 1e-12)


def test_global_testing_is_bounded_by_the_norm(hilbert6, random_weights):
    """χ_Q tested against T is one instance of the operator norm."""
    for w in random_weights:
        norm = weighted_operator_norm(hilbert6, w)
        assert local_testing(hilbert6, w.measures(), "global") <= norm ** 2 * (1 + 1e-9)
        assert weak_norm(hilbert6, w) <= norm * (1 + 1e-9)


def test_dual_testing_uses_transpose_and_swapped_measures(hilbert6, random_weights):
    for w in random_weights[:3]:
        report = testing.testing_report(hilbert6, w)
        assert report.K_gl_dual == pytest.approx(local_testing(hilbert6.transpose(), w.measures().swapped(), "global"))
        assert report.K_gl_dual <= report.norm_L2w ** 2 * (1 + 1e-9)


def test_shifted_lattice_never_lowers_a_constant(hilbert6, random_weights):
    for w in random_weights:
        mp = w.measures()
        for scope in ("local", "semilocal", "global"):
            assert local_testing(hilbert6, mp, scope) >= local_testing(hilbert6, mp, scope, shifts=(0,)) * (1 - 1e-12)
        assert wbp_constant(hilbert6, mp) >= wbp_constant(hilbert6, mp, shifts=(0,)) * (1 - 1e-12)
        assert ap_up_characteristic(w, 2) >= ap_up_characteristic(w, 2, shifts=(0,)) * (1 - 1e-12)


def test_semilocal_region_of_a_single_cell_covers_its_neighbours():
    """On two cells 2Q of a single cell is the whole grid, so semilocal and global testing agree."""
    grid = Grid(0.0, 1.0, 1)
    T = discretize(hilbert_causal(), grid)
    mp = Weight.constant(grid).measures()
    semilocal = local_testing(T, mp, "semilocal")
    assert semilocal > 0
    assert semilocal == pytest.approx(local_testing(T, mp, "global"))
    assert local_testing(T, mp, "local") == pytest.approx(semilocal / 2)


def test_testing_constants_are_scale_invariant(hilbert6, random_weights):
    for w in random_weights[:3]:
        mp, scaled = w.measures(), w.scaled(7.0).measures()
        for scope in ("local", "semilocal", "global"):
            assert local_testing(hilbert6, scaled, scope) == pytest.approx(local_testing(hilbert6, mp, scope), rel=1e-9)
        assert wbp_constant(hilbert6, scaled) == pytest.approx(wbp_constant(hilbert6, mp), rel=1e-9)


def test_dual_report_swaps_primal_and_dual_constants(hilbert6, random_weights):
    for w in random_weights[:2]:
        report = testing.testing_report(hilbert6, w)
        dual = testing.testing_report(hilbert6.transpose(), w.inverse())
        for primal_name, dual_name in (("K_chi", "K_chi_dual"), ("K_sl", "K_sl_dual"), ("K_gl", "K_gl_dual")):
            assert getattr(dual, primal_name) == pytest.approx(getattr(report, dual_name), rel=1e-9)
            assert getattr(dual, dual_name) == pytest.approx(getattr(report, primal_name), rel=1e-9)
        assert dual.norm_L2w == pytest.approx(report.norm_L2w, rel=1e-9)


def test_report_for_unit_weight(hilbert6, unit_weight):
    report = testing.testing_report(hilbert6, unit_weight)
    assert report.characteristic == 1.0
    assert report.weak_norm_is_lower_bound
    assert report.K_WB_tail_bound == pytest.approx(1.0)
    assert report.K_chi <= report.K_sl * (1 + 1e-12)
    assert report.K_sl <= report.K_gl * (1 + 1e-12)
    row = sweep_row("const", 6, report)
    assert row.char == 1.0
    assert row.ratio1 == pytest.approx(report.norm_L2w)
    assert row.ratio2 == pytest.approx(math.sqrt(row.K_gl) / math.log(math.e + 1))
    assert row.K_gl == max(report.K_gl, report.K_gl_dual)


def test_tail_bound_scales_with_oscillation(random_weights):
    for w in random_weights:
        mp = w.measures()
        expected = math.sqrt(w.values.max() * w.inverse().values.max())
        assert wbp_tail_bound(mp, 2.0) == pytest.approx(2.0 * expected)


def test_weak_norm_rejects_other_exponents(hilbert6, unit_weight):
    with pytest.raises(ValueError):
        weak_norm(hilbert6, unit_weight, p=3)


def test_sweep_rows_are_sorted_by_characteristic():
    family = [("flat", "power", {"a": 0.0}, 0), ("a05", "power", {"a": 0.5}, 0), ("a08", "power", {"a": 0.8}, 0)]
    rows = a2_theorem_sweep(hilbert_causal(), family, [4, 5], threads=2, min_span=1.0)
    assert len(rows) == 6
    chars = [row.char for row in rows]
    assert chars == sorted(chars)
    assert {row.m for row in rows} == {4, 5}
    assert all(row.norm > 0 for row in rows)
    flat = [row for row in rows if row.weight_id == "flat"]
    assert all(row.char == 1.0 for row in flat)


def test_sweep_rejects_a_family_spanning_less_than_two_decades():
    family = [("flat", "power", {"a": 0.0}, 0), ("a095", "power", {"a": 0.95}, 0)]
    with pytest.raises(ValueError, match="span"):
        a2_theorem_sweep(hilbert_causal(), family, [6])


def test_default_power_family_spans_two_decades():
    rows = a2_theorem_sweep(hilbert_causal(), power_specs(), [6])
    assert max(row.char for row in rows) / min(row.char for row in rows) >= 100
    assert len(rows) == len(power_specs())


def _row(char: float, norm: float) -> SweepRow:
    return SweepRow(
        weight_id=f"w{char}", m=8, char=char, norm=norm, K_chi=0.0, K_sl=0.0, K_gl=0.0, K_WB=0.0,
        weak2=0.0, weak2_dual=0.0, ratio1=0.0, ratio2=0.0, ratio3=0.0,
    )


def test_loglog_slope_of_a_power_law():
    rows = [_row(c, 3.0 * c ** 2) for c in (1.0, 2.0, 5.0, 11.0)]
    assert loglog_slope(rows) == pytest.approx(2.0)


def test_loglog_slope_needs_two_points():
    with pytest.raises(ValueError):
        loglog_slope([_row(2.0, 1.0), _row(2.0, 3.0)])
    assert np.isfinite(loglog_slope([_row(1.0, 1.0), _row(4.0, 2.0)]))
