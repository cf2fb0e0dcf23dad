import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from app.config import (
    FITTED_SLACK,
    GOOD_PAIR_MIN_M,
    GOOD_PAIR_MIN_R,
    IDENTITY_RTOL,
    LATTICE_SHIFTS,
    MIN_CHARACTERISTIC_SPAN,
    PINNED_CONSTANTS_FILE,
    RUBIO_TERMS,
    SLOPE_LIMIT,
    STOP_MULTIPLIER,
)
from app.exceptions import ConvergenceError
from app.models.grid import Grid, Lattice
from app.models.operator import CausalKernel, OperatorMatrix
from app.models.weight import Weight
from app.schemas.reports import FittedConstant, InvariantResult
from app.services import analysis, dyadic, operators, testing, weaktype, weights
from app.services.corpus import WeightSpec, build_weights, power_specs, sparse_specs, test_functions

logger = logging.getLogger(__name__)


@dataclass
class VerifyContext:
    grid: Grid
    kernel: CausalKernel
    T: OperatorMatrix
    corpus: list[tuple[str, Weight]]
    specs: list[WeightSpec] = field(default_factory=list)
    r: int = 4
    eps: float = 1.0
    multiplier: float = STOP_MULTIPLIER
    seed: int = 0
    threads: int = 1
    subset: int = 12
    pinned: dict[str, float] = field(default_factory=dict)
    invariants: list[InvariantResult] = field(default_factory=list)
    fitted: dict[str, float] = field(default_factory=dict)

    def record(self, name: str, passed: bool, value: float | None = None, bound: float | None = None, detail: str = ""):
        self.invariants.append(InvariantResult(name=name, passed=bool(passed), value=value, bound=bound, detail=detail))
        if not passed:
            logger.error("invariant %s failed: value=%s bound=%s %s", name, value, bound, detail)

    def fit(self, name: str, value: float):
        self.fitted[name] = max(self.fitted.get(name, -math.inf), float(value))

    def sample(self) -> list[tuple[str, Weight]]:
        """Every k-th corpus weight, at most `subset` of them, always including the first."""
        step = max(1, len(self.corpus) // self.subset)
        return self.corpus[::step][: self.subset]

    def corpus_at(self, m: int) -> list[tuple[str, Weight]]:
        """The corpus rebuilt on the grid of the same range with 2^m cells."""
        if m == self.grid.m or not self.specs:
            return self.corpus
        return build_weights(self.specs, self.grid.refined(m))


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------- exact identities ----------------

def check_identities(ctx: VerifyContext):
    worst_joint = worst_product = worst_mirror = 0.0
    for _, w in ctx.corpus:
        mp = w.measures()
        up = weights.ap_up_characteristic(w, 2)
        worst_joint = max(worst_joint, _rel(weights.joint_characteristic(mp), up))
        worst_product = max(worst_product, mp.product_defect())
        worst_mirror = max(worst_mirror, _rel(weights.ap_down_characteristic(w.inverse(), 2), up))
    ctx.record("joint_characteristic_equals_A2_up", worst_joint <= IDENTITY_RTOL, worst_joint, IDENTITY_RTOL)
    ctx.record("mu_nu_product_is_cell_width_squared", worst_product <= IDENTITY_RTOL, worst_product, IDENTITY_RTOL)
    ctx.record("A2_up_equals_inverse_A2_down", worst_mirror <= IDENTITY_RTOL, worst_mirror, IDENTITY_RTOL)

    rng = np.random.default_rng(ctx.seed)
    n = ctx.grid.n
    causal_ok = True
    for _ in range(20):
        f = rng.normal(size=n)
        z = int(rng.integers(1, n))
        cut = f.copy()
        cut[z:] = 0.0
        causal_ok &= bool(np.allclose(ctx.T.apply(f)[:z], ctx.T.apply(cut)[:z], rtol=1e-12, atol=1e-12 * np.abs(f).sum()))
    ctx.record("causality_identity", causal_ok and ctx.T.is_causal())

    worst_parseval = worst_orth = 0.0
    for _, w in ctx.sample():
        mp = w.measures()
        h = w.support_cells
        lattice = Lattice(ctx.grid)
        top = next(level for level in range(ctx.grid.m, -1, -1) if lattice.starts(level, 0, h).size)
        if top == 0:
            continue
        I0 = lattice.intervals(top, 0, h)[0]
        system = analysis.HaarSystem(mp.nu, ctx.grid, hi=h)
        f = rng.normal(size=n)
        lhs, rhs = system.parseval_check(f, I0)
        worst_parseval = max(worst_parseval, _rel(lhs, rhs))
        scale = lhs if lhs > 0 else 1.0
        for I in lattice.all_intervals(I0.start, I0.stop, min_level=2)[:16]:
            dI = system.project(f, I)
            for J in I.halves():
                worst_orth = max(worst_orth, abs(float(np.sum(mp.nu * dI * system.project(f, J)))) / scale)
    ctx.record("haar_parseval", worst_parseval <= IDENTITY_RTOL, worst_parseval, IDENTITY_RTOL)
    ctx.record("haar_orthogonality", worst_orth <= IDENTITY_RTOL, worst_orth, IDENTITY_RTOL)

    f = rng.exponential(size=min(n, 256))
    ctx.record(
        "maximal_sweep_matches_naive",
        np.allclose(operators.max_up(f), operators.max_up_naive(f), rtol=1e-12)
        and np.allclose(operators.max_down(f), operators.max_down_naive(f), rtol=1e-12),
    )


# ---------------- weights ----------------

def check_weights(ctx: VerifyContext):
    worst = 0.0
    for p in (1.5, 2.0, 3.0):
        for _, w in ctx.corpus:
            worst = max(worst, weights.ap_up_characteristic(w, p) / (2 ** p * weights.ap_classical(w, p)))
    ctx.record("one_sided_below_2p_classical", worst <= 1 + 1e-12, worst, 1.0)

    decreasing = np.exp(-3 * (ctx.grid.midpoints - ctx.grid.lo) / ctx.grid.length)
    worst = 0.0
    for _, w in ctx.corpus:
        worst = max(worst, weights.ap_up_characteristic(w.multiplied(decreasing), 2) / weights.ap_up_characteristic(w, 2))
    ctx.record("decreasing_multiplier_does_not_increase", worst <= 1 + 1e-12, worst, 1.0)

    values = []
    for m in range(6, 11):
        g = Grid(0.0, 1.0, m)
        values.append(weights.ap_up_characteristic(Weight(g, np.exp(-g.midpoints)), 2))
    ok = all(0.9 < v <= 1.0 + 1e-12 for v in values) and all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
    ctx.record("decreasing_exponential_limit", ok, values[-1], 1.0, detail=f"m=6..10: {values}")

    I0 = (0, min(64, ctx.grid.n))
    scan_ok, gap_ok = True, True
    for _, w in ctx.sample()[:4]:
        if w.support_cells < I0[1]:
            continue
        a1 = weights.a1_up_local_characteristic(w, I0)
        scan = weights.a1_local_scan(w, I0)
        scan_ok &= scan <= a1 * (1 + 1e-12) and a1 <= (1 + scan) * (1 + 1e-12)
        gap = weights.ap_local_gap(w, 2, I0)
        gap_ok &= gap.local >= 2 ** -2 * gap.dyadic * (1 - 1e-12)
    ctx.record("a1_scan_brackets_maximal_form", scan_ok)
    ctx.record("local_characteristic_dominates_dyadic", gap_ok)

    picture_ok = True
    for _, w in ctx.corpus:
        mp = w.measures()
        lattice = Lattice(ctx.grid)
        for level in range(2, ctx.grid.m + 1):
            for Q in lattice.intervals(level, 0, w.support_cells)[:2]:
                picture_ok &= weights.picture_bound(mp, Q).holds
    ctx.record("picture_bound", picture_ok)

    # one C for the whole corpus at m = 8, each weight on its own support; a pinned C is checked, not refitted
    corpus8 = [w for _, w in ctx.corpus_at(8)]
    C = ctx.pinned.get("reverse_holder_C")
    if C is None:
        try:
            C = weights.calibrate_reverse_holder(corpus8)
        except ConvergenceError as e:
            ctx.record("reverse_holder_after_calibration", False, detail=e.detail)
            return
    worst = max(weights.reverse_holder_worst(w, None, C) for w in corpus8)
    ctx.record("reverse_holder_after_calibration", worst <= 1 + 1e-12, worst, 1.0, detail=f"C={C:.6g}")
    failing = [i for i, w in enumerate(corpus8) if not weights.pointwise_reverse_holder(w, None, C)]
    ctx.record("reverse_holder_pointwise", not failing, float(len(failing)), 0.0, detail=f"C={C:.6g}")
    ctx.fit("reverse_holder_C", C)


# ---------------- dyadic ----------------

def check_dyadic(ctx: VerifyContext):
    small = ctx.grid.refined(GOOD_PAIR_MIN_M)
    r = min(max(ctx.r, GOOD_PAIR_MIN_R), small.m - 2)
    checked, failures = dyadic.good_estimate_sweep(small, Lattice.from_omega(small, 0.125), Lattice(small), r, ctx.eps)
    ctx.record("good_interval_estimate", failures == 0 and checked > 0, float(failures), 0.0, detail=f"{checked} checks at r={r}")

    delta = dyadic.delta_from_eps(ctx.eps)
    fractions = dyadic.bad_fraction(small, 0, [2, 4, 6, 7], delta, 16, ctx.seed)
    ordered = [fractions[k] for k in sorted(fractions)]
    ctx.record("bad_fraction_nonincreasing_in_r", all(b <= a for a, b in zip(ordered, ordered[1:])), detail=str(fractions))

    tiny = ctx.grid.refined(min(ctx.grid.m, 6))
    lat_i, lat_j = Lattice(tiny), Lattice.from_omega(tiny, 0.125)
    tags = dyadic.classify_all_pairs(tiny, lat_i, lat_j, min(ctx.r, 2), ctx.eps)
    total = len(lat_i.all_intervals()) * len(lat_j.all_intervals())
    ctx.record("region_split_exhaustive", sum(tags.values()) == total, float(sum(tags.values())), float(total))
    pairs, misplaced = dyadic.region_partition_check(tiny, lat_i, lat_j, min(ctx.r, 2), ctx.eps)
    ctx.record("region_split_is_a_partition", misplaced == 0, float(misplaced), 0.0, detail=f"{pairs} pairs")


# ---------------- operators ----------------

def check_operators(ctx: VerifyContext):
    report = operators.kernel_axioms_check(ctx.kernel, 4000, ctx.seed)
    ctx.record("kernel_causality", report.passes_causality, float(report.causality_violations), 0.0)
    ctx.fit("kernel_size", report.size_ratio)
    ctx.fit("kernel_smoothness", report.smoothness_ratio)

    rng = np.random.default_rng(ctx.seed + 1)
    for _, w in ctx.sample()[:4]:
        h = w.support_cells
        f = np.zeros(ctx.grid.n)
        f[:h] = rng.exponential(size=h)
        ctx.fit("coifman_fefferman", operators.mr_bound_ratio(ctx.T, w, f, 2.0, 2.0, (0, h)))


# ---------------- testing ----------------

def _testing_row(ctx: VerifyContext, w: Weight) -> tuple:
    rep = testing.testing_report(ctx.T, w, C_size=ctx.kernel.C_size, seed=ctx.seed)
    mp, mp_scaled = w.measures(), w.scaled(7.0).measures()
    scale_gap = max(
        _rel(testing.local_testing(ctx.T, mp, scope), testing.local_testing(ctx.T, mp_scaled, scope))
        for scope in ("local", "semilocal", "global")
    )
    scale_gap = max(scale_gap, _rel(testing.wbp_constant(ctx.T, mp), testing.wbp_constant(ctx.T, mp_scaled)))
    return rep, scale_gap


def check_testing(ctx: VerifyContext):
    chain_ok = weak_ok = gl_ok = True
    worst_scale = 0.0
    with ThreadPoolExecutor(max_workers=ctx.threads) as executor:
        results = list(executor.map(lambda item: _testing_row(ctx, item[1]), ctx.corpus))
    tol = 1 + 1e-12
    for rep, scale_gap in results:
        chain_ok &= rep.K_chi <= rep.K_sl * tol and rep.K_sl <= rep.K_gl * tol
        chain_ok &= rep.K_chi_dual <= rep.K_sl_dual * tol and rep.K_sl_dual <= rep.K_gl_dual * tol
        weak_ok &= rep.weak_norm_T <= rep.norm_L2w * (1 + 1e-9)
        gl_ok &= rep.K_gl <= rep.norm_L2w ** 2 * (1 + 1e-9)
        worst_scale = max(worst_scale, scale_gap)
        ctx.fit("wbp_vs_size_plus_semilocal", rep.K_WB / (ctx.kernel.C_size + rep.K_sl))
        weak_sum = rep.weak_norm_T + rep.weak_norm_Tprime
        if weak_sum > 0:
            ctx.fit("global_testing_vs_weak_norms", math.sqrt(max(rep.K_gl, rep.K_gl_dual)) / weak_sum)
    ctx.record("testing_chain", chain_ok)
    ctx.record("weak_norm_below_strong_norm", weak_ok)
    ctx.record("global_testing_below_norm_squared", gl_ok)
    ctx.record("testing_constants_scale_invariant", worst_scale <= 1e-9, worst_scale, 1e-9)

    try:
        rows = testing.a2_theorem_sweep(
            ctx.kernel, power_specs(), [ctx.grid.m], ctx.grid.lo, ctx.grid.hi, ctx.T.band, threads=ctx.threads
        )
    except ValueError as e:
        ctx.record("sweep_characteristic_span", False, detail=str(e))
        return
    span = max(row.char for row in rows) / min(row.char for row in rows)
    ctx.record("sweep_characteristic_span", True, span, MIN_CHARACTERISTIC_SPAN)
    slope = testing.loglog_slope(rows)
    ctx.record("norm_slope_in_characteristic", slope <= SLOPE_LIMIT, slope, SLOPE_LIMIT)
    for row in rows:
        ctx.fit("sweep_ratio_norm", row.ratio1)
        ctx.fit("sweep_ratio_global_testing", row.ratio2)


# ---------------- analysis ----------------

def check_analysis(ctx: VerifyContext, specs: list[WeightSpec] | None = None):
    specs = specs or sparse_specs()
    sparse_ok = packing_ok = True
    for weight_id, w in build_weights(specs, ctx.grid):
        mp = w.measures()
        char = weights.ap_up_characteristic(w, 2)
        K = analysis.pivotal_constant(mp, ctx.eps)
        ctx.fit("pivotal_vs_characteristic_squared", K / char ** 2)
        root = Lattice(ctx.grid).root()
        tree = analysis.build_sparse(root, K, mp, ctx.eps, ctx.multiplier)
        sparse_ok &= tree.check_sparse()
        packing_ok &= tree.check_packing()

        haar_nu = analysis.HaarSystem(mp.nu, ctx.grid)
        for j in (0, 1, 2):
            for node in tree.nodes:
                ctx.fit(f"carleson_j{j}", analysis.carleson_ratio(node, j, ctx.T, tree, haar_nu, ctx.eps))

        joint = weights.joint_characteristic(mp)
        for k in range(2, ctx.grid.m + 1, 2):
            for n in range(0, min(3, k + 1)):
                ctx.fit("averaging_lemma", analysis.lemma_avg_sup(k, n, mp, ctx.eps) / joint)
                ctx.fit("averaging_lemma_mirrored", analysis.lemma_avg_sup(k, n, mp, ctx.eps, mirrored=True) / joint)
    ctx.record("sparse_children_mass", sparse_ok)
    ctx.record("sparse_packing", packing_ok)
    check_poisson_decay(ctx, specs)


def check_poisson_decay(ctx: VerifyContext, specs: list[WeightSpec]):
    """Poisson decay on I5 pairs: J of the shifted lattice good against the unshifted one, J in a half of I."""
    grid = ctx.grid if ctx.grid.m >= GOOD_PAIR_MIN_M else ctx.grid.refined(GOOD_PAIR_MIN_M)
    T = ctx.T if grid is ctx.grid else operators.discretize(ctx.kernel, grid, ctx.T.band)
    r = min(max(ctx.r, GOOD_PAIR_MIN_R), grid.m - 2)
    lattice = Lattice(grid)
    nested = dyadic.good_nested_pairs(grid, lattice, Lattice.from_omega(grid, LATTICE_SHIFTS[-1]), r, ctx.eps)
    ctx.record("poisson_pairs_available", bool(nested), float(len(nested)), detail=f"m={grid.m} r={r}")
    if not nested:
        return
    rng = np.random.default_rng(ctx.seed + 2)
    S = lattice.interval_at(grid.m, 0)
    for weight_id, w in build_weights(specs, grid):
        mp = w.measures()
        for k in rng.choice(len(nested), size=min(8, len(nested)), replace=False):
            I, J = nested[int(k)]
            g = rng.normal(size=grid.n)
            ctx.fit("poisson_decay", analysis.poisson_decay_ratio(S, I, J, T, mp, g, ctx.eps))


# ---------------- weak type ----------------

def check_weaktype(ctx: VerifyContext):
    n = ctx.grid.n
    corpus_f = test_functions(ctx.grid, (0, n), 100, ctx.seed)
    cz_ok = True
    for _, f, lam in corpus_f:
        cz = weaktype.cz_split(f, lam, (0, n))
        cz_ok &= cz.check_invariants().passed
        ctx.fit("causal_tail", weaktype.causal_tail_ratio(ctx.T, cz, ctx.eps))
    ctx.record("cz_invariants", cz_ok)

    extended_ok = cover_ok = two_ok = rubio_ok = majorant_ok = cs_ok = True
    for weight_id, w in ctx.sample()[:6]:
        h = w.support_cells
        fs = test_functions(ctx.grid, (0, h), 12, ctx.seed)
        rep = weaktype.weak11_experiment(ctx.T, w, fs, (0, h))
        extended_ok &= rep.all_extended_checks
        cover_ok &= rep.all_splits_cover
        ctx.fit("weak11_normalized", rep.normalized_ratio)
        ctx.fit("omega_tilde", rep.max_omega_tilde_ratio)

        v = Weight.from_prefix(ctx.grid, np.nan_to_num(operators.max_down(w.values, (0, h)), nan=0.0))
        for direction in ("up", "down"):
            two = weaktype.two_weight_maximal_check(w, v, (0, h), fs, direction)
            two_ok &= two.all_pass
            ctx.fit("two_weight_maximal", two.max_weak_ratio)

        ones = np.where(np.arange(n) < h, 1.0, 0.0)
        try:
            Rh, rubio = weaktype.rubio_with_backoff(ones, w, RUBIO_TERMS)
        except ConvergenceError as e:
            logger.error("%s on %s", e.detail, weight_id)
            rubio_ok = False
            continue
        rubio_ok &= rubio.a1_ratio <= rubio.a1_bound * (1 + 1e-10)
        majorant_ok &= bool(np.all(Rh >= ones))
        ctx.fit("rubio_norm", rubio.norm_ratio / (2 + rubio.tail_bound))

        rng = np.random.default_rng(ctx.seed + 3)
        f_corpus = [rng.exponential(size=n) * (np.arange(n) < h) for _ in range(3)]
        h_corpus = [ones, 0.5 + rng.random(n) * (np.arange(n) < h)]
        ext = weaktype.extrapolation_check(ctx.T, w, f_corpus, h_corpus, RUBIO_TERMS, rubio.C)
        cs_ok &= ext.cauchy_schwarz_holds
        majorant_ok &= ext.majorant_holds
        ctx.fit("extrapolation_a1", ext.a1_ratio)
        ctx.fit("extrapolation_l1", ext.max_l1_norm)
    ctx.record("extended_interval_mass", extended_ok)
    ctx.record("weak11_split_covers_level_set", cover_ok)
    ctx.record("two_weight_maximal_steps", two_ok)
    ctx.record("rubio_a1_bound", rubio_ok)
    ctx.record("rubio_majorant", majorant_ok)
    ctx.record("extrapolation_cauchy_schwarz", cs_ok)

    ctx.fit("proof_parameters", weaktype.proof_parameter_sweep())


SUITE = (check_identities, check_weights, check_dyadic, check_operators, check_testing, check_analysis, check_weaktype)


def run_suite(ctx: VerifyContext) -> VerifyContext:
    for check in SUITE:
        logger.info("verify: %s", check.__name__)
        check(ctx)
    logger.info("verify: %d invariants, %d failed", len(ctx.invariants), sum(not i.passed for i in ctx.invariants))
    return ctx


# ---------------- pinned constants ----------------

def load_pins(path: str = PINNED_CONSTANTS_FILE) -> dict[str, dict[str, float]]:
    """corpus hash -> {constant name: pinned value}; empty when nothing was pinned yet."""
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return json.load(fh)


def write_pins(fitted: dict[str, float], corpus: str, path: str = PINNED_CONSTANTS_FILE) -> None:
    """Pin the fitted constants of one corpus, keeping the entries of the others."""
    pins = load_pins(path)
    pins[corpus] = dict(sorted(fitted.items()))
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(pins, fh, indent=2, sort_keys=True)
    logger.info("pinned %d constants for corpus %s to %s", len(fitted), corpus, path)


def pinned_constants(
    fitted: dict[str, float], corpus: str, pins: dict, slack: float = FITTED_SLACK, required: bool = True
) -> tuple[list[FittedConstant], list[InvariantResult]]:
    """Fitted constants next to their pins, plus one invariant per comparison.

    With `required`, a corpus without pins or a constant missing from its entry is a failure.
    """
    entry = pins.get(corpus)
    invariants = []
    if entry is None:
        if required:
            invariants.append(InvariantResult(name="pinned_constants_present", passed=False, detail=f"no pins for corpus {corpus}"))
        else:
            logger.warning("no pinned constants for corpus %s; fitted constants are reported without comparison", corpus)
        entry = {}
    out = []
    for name in sorted(fitted):
        value = fitted[name]
        pinned = entry.get(name)
        within = None if pinned is None else value <= pinned * (1 + slack)
        if within is not None:
            invariants.append(InvariantResult(name=f"pinned_{name}", passed=within, value=value, bound=pinned * (1 + slack)))
        elif required and pins.get(corpus) is not None:
            invariants.append(InvariantResult(name=f"pinned_{name}", passed=False, value=value, detail="constant missing from the pins"))
        out.append(FittedConstant(name=name, value=value, corpus_hash=corpus, pinned=pinned, within_pin=within))
    return out, invariants


def compare_pins(
    ctx: VerifyContext, corpus: str, pins: dict, slack: float = FITTED_SLACK, required: bool = True
) -> list[FittedConstant]:
    """Fitted constants of the run against the pins of its corpus, recorded as invariants."""
    out, invariants = pinned_constants(ctx.fitted, corpus, pins, slack, required)
    for inv in invariants:
        ctx.record(inv.name, inv.passed, inv.value, inv.bound, inv.detail)
    return out
