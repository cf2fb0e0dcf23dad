import logging

import numpy as np

from app.config import SLOPE_LIMIT
from app.exceptions import ConfigError
from app.models.grid import Grid, Lattice
from app.models.operator import CausalKernel
from app.models.weight import Weight
from app.schemas.experiment import ExperimentConfig
from app.schemas.reports import InvariantResult, ReportBundle
from app.services import analysis, dyadic, file_handler, operators, testing, weaktype, weights
from app.services.corpus import build_weights, corpus_hash, corpus_specs, test_functions
from app.services.verification import VerifyContext, compare_pins, load_pins, pinned_constants, run_suite, write_pins

logger = logging.getLogger(__name__)


# ----------------------- SETUP -----------------------

def build_kernel(config: ExperimentConfig) -> CausalKernel:
    spec = config.kernel
    if spec.kind == "expression":
        try:
            return operators.kernel_from_expression(spec.expression, spec.C_size, spec.eps)
        except ValueError as e:
            raise ConfigError(f"kernel.expression: {e}") from e
    return operators.BUILTIN_KERNELS[spec.kind]()


def grids(config: ExperimentConfig) -> list[Grid]:
    return [Grid(config.grid.lo, config.grid.hi, m) for m in config.grid.m]


def shifts_for(config: ExperimentConfig, grid: Grid) -> tuple[int, ...]:
    return dyadic.lattice_shifts(grid, config.shifts)


def family(config: ExperimentConfig, grid: Grid) -> list[tuple[str, Weight]]:
    try:
        return build_weights(config.weights.entries(), grid)
    except ValueError as e:
        raise ConfigError(f"weights: {e}") from e


def localization(config: ExperimentConfig, grid: Grid, w: Weight) -> tuple[int, int]:
    """Cells of the configured I0 (default: the whole support of w)."""
    if config.I0 is None:
        return 0, w.support_cells
    a, b = grid.span(*config.I0)
    if not 0 <= a < b <= w.support_cells:
        raise ConfigError(f"I0: {config.I0} does not fit inside the support of the weight")
    return a, b


def heights(f: np.ndarray, I0: tuple[int, int], fractions: list[float]) -> list[float]:
    top = float(np.nanmax(operators.max_up(f, I0)))
    return [frac * top for frac in fractions]


# ----------------------- HANDLERS -----------------------

def characteristic(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    records, summary = [], {}
    for grid in grids(config):
        shifts = shifts_for(config, grid)
        for weight_id, w in family(config, grid):
            char = weights.ap_up_characteristic(w, 2, shifts=shifts)
            records.append(
                {
                    "weight_id": weight_id,
                    "m": grid.m,
                    "A2_up": char,
                    "A2_down": weights.ap_down_characteristic(w, 2, shifts=shifts),
                    "A2": weights.ap_classical(w, 2, shifts=shifts),
                    "A1_up_local": weights.a1_up_local_characteristic(w, (0, w.support_cells)),
                    "joint": weights.joint_characteristic(w.measures(), shifts),
                }
            )
            summary[f"{weight_id}@m{grid.m}"] = char
    files = [file_handler.save_table(records, config.output_dir, "characteristics.csv")]
    return ReportBundle(subcommand="characteristic", files=files, summary=summary)


def norm(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    kernel = build_kernel(config)
    records, summary, files = [], {}, []
    for grid in grids(config):
        T = operators.discretize(kernel, grid, config.kernel.band)
        if grid.m <= 8:
            files.append(file_handler.save_matrix_csv(T, config.output_dir, f"operator_m{grid.m}.csv"))
        for weight_id, w in family(config, grid):
            value = operators.weighted_operator_norm(T, w)
            records.append(
                {
                    "weight_id": weight_id,
                    "m": grid.m,
                    "norm_L2w": value,
                    "norm_bilinear": operators.weighted_operator_norm(T, w, "bilinear_mu_nu"),
                    "maximal_up_L2w": operators.maximal_norm_estimate(w, seed=config.seed),
                    "characteristic": weights.ap_up_characteristic(w, 2),
                }
            )
            summary[f"{weight_id}@m{grid.m}"] = value
    files.append(file_handler.save_table(records, config.output_dir, "norms.csv"))
    return ReportBundle(subcommand="norm", files=files, summary=summary)


def testing_constants(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    kernel = build_kernel(config)
    records, summary, invariants = [], {}, []
    for grid in grids(config):
        T = operators.discretize(kernel, grid, config.kernel.band)
        shifts = shifts_for(config, grid)
        for weight_id, w in family(config, grid):
            report = testing.testing_report(T, w, shifts, kernel.C_size, config.seed)
            records.append({"weight_id": weight_id, "m": grid.m, **report.model_dump()})
            summary[f"{weight_id}@m{grid.m}"] = report.K_gl
            invariants.append(
                InvariantResult(
                    name=f"testing_chain[{weight_id}@m{grid.m}]",
                    passed=report.K_chi <= report.K_sl * (1 + 1e-12) and report.K_sl <= report.K_gl * (1 + 1e-12),
                )
            )
    files = [file_handler.save_table(records, config.output_dir, "testing.csv")]
    return ReportBundle(subcommand="testing", files=files, summary=summary, invariants=invariants)


def sparse(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    files, summary, invariants = [], {}, []
    eps = config.kernel.eps
    for grid in grids(config):
        for weight_id, w in family(config, grid):
            mp = w.measures()
            K = analysis.pivotal_constant(mp, eps)
            lattice = Lattice(grid)
            top = next(level for level in range(grid.m, -1, -1) if lattice.starts(level, 0, w.support_cells).size)
            root = lattice.intervals(top, 0, w.support_cells)[0]
            tree = analysis.build_sparse(root, K, mp, eps, config.stopping_multiplier)
            key = f"{weight_id}@m{grid.m}"
            files.append(file_handler.save_tree_json(tree, config.output_dir, f"tree_{key}.json"))
            summary[key] = {"K": K, "nodes": len(tree.nodes), "sparse_ratio": tree.sparse_ratio(), "packing_ratio": tree.packing_ratio()}
            invariants.append(InvariantResult(name=f"sparse[{key}]", passed=tree.check_sparse(), value=tree.sparse_ratio(), bound=0.5))
            invariants.append(InvariantResult(name=f"packing[{key}]", passed=tree.check_packing(), value=tree.packing_ratio(), bound=2.0))
    return ReportBundle(subcommand="sparse", files=files, summary=summary, invariants=invariants)


def czdecomp(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    records, invariants = [], []
    for grid in grids(config):
        I0 = (0, grid.n) if config.I0 is None else grid.span(*config.I0)
        for f_id, f, _ in test_functions(grid, I0, config.test_functions, config.seed):
            for lam in heights(f, I0, config.lambdas):
                cz = weaktype.cz_split(f, lam, I0)
                report = cz.check_invariants()
                records.append({"f_id": f_id, "m": grid.m, "lambda": lam, **report.model_dump()})
                if not report.passed:
                    invariants.append(InvariantResult(name=f"cz[{f_id}@m{grid.m},λ={lam:.4g}]", passed=False, detail=str(report.model_dump())))
    invariants.append(InvariantResult(name="cz_invariants", passed=not invariants, value=float(len(records))))
    files = [file_handler.save_table(records, config.output_dir, "czdecomp.csv")]
    return ReportBundle(subcommand="czdecomp", files=files, summary={"instances": len(records)}, invariants=invariants)


def weak(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    kernel = build_kernel(config)
    payload, summary, invariants = {}, {}, []
    for grid in grids(config):
        T = operators.discretize(kernel, grid, config.kernel.band)
        for weight_id, w in family(config, grid):
            key = f"{weight_id}@m{grid.m}"
            I0 = localization(config, grid, w)
            fs = [
                (f"{f_id}_l{k}", f, lam)
                for f_id, f, _ in test_functions(grid, I0, config.test_functions, config.seed)
                for k, lam in enumerate(heights(f, I0, config.lambdas))
            ]
            weak11 = weaktype.weak11_experiment(T, w, fs, I0)
            mw = operators.max_down(w.values, I0)
            v = Weight(grid, np.where(np.isnan(mw), w.values, mw), w.cutoff)
            two = weaktype.two_weight_maximal_check(w, v, I0, fs)
            two_down = weaktype.two_weight_maximal_check(w, v, I0, fs, "down")
            inside = np.arange(grid.n) < w.support_cells
            ones = np.where(inside, 1.0, 0.0)
            Rh, rubio = weaktype.rubio_with_backoff(ones, w, config.rubio_terms)
            ext = weaktype.extrapolation_check(T, w, [f for _, f, _ in fs[:3]], [ones], config.rubio_terms, rubio.C)
            payload[key] = {
                "weak11": weak11.model_dump(),
                "two_weight_up": two.model_dump(),
                "two_weight_down": two_down.model_dump(),
                "rubio": rubio.model_dump(),
                "extrapolation": ext.model_dump(),
            }
            summary[key] = weak11.normalized_ratio
            invariants += [
                InvariantResult(name=f"extended_intervals[{key}]", passed=weak11.all_extended_checks),
                InvariantResult(name=f"level_set_split[{key}]", passed=weak11.all_splits_cover),
                InvariantResult(name=f"two_weight_steps[{key}]", passed=two.all_pass and two_down.all_pass),
                InvariantResult(name=f"rubio_majorant[{key}]", passed=bool(np.all(Rh >= ones)) and ext.majorant_holds),
                InvariantResult(name=f"rubio_a1[{key}]", passed=rubio.a1_ratio <= rubio.a1_bound * (1 + 1e-10), value=rubio.a1_ratio, bound=rubio.a1_bound),
                InvariantResult(name=f"extrapolation_cauchy_schwarz[{key}]", passed=ext.cauchy_schwarz_holds),
            ]
    files = [file_handler.save_json(payload, config.output_dir, "weak.json")]
    return ReportBundle(subcommand="weak", files=files, summary=summary, invariants=invariants)


def sweep(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    kernel = build_kernel(config)
    entries = config.weights.entries()
    grid0 = grids(config)[0]
    try:
        rows = testing.a2_theorem_sweep(
            kernel,
            entries,
            config.grid.m,
            config.grid.lo,
            config.grid.hi,
            config.kernel.band,
            config.shifts,
            config.threads,
            config.min_characteristic_span,
        )
    except ValueError as e:
        raise ConfigError(f"weights: {e}") from e
    digest = corpus_hash(entries, grid0, {"m": config.grid.m, "kernel": config.kernel.model_dump(), "shifts": config.shifts})
    metadata = {
        "kernel": config.kernel.model_dump(),
        "band": config.kernel.band,
        "r": config.r,
        "seeds": config.weights.seeds,
        "m": config.grid.m,
        "shifts": config.shifts,
        "corpus_hash": digest,
    }
    files = file_handler.save_sweep(rows, metadata, config.output_dir)
    ratios = {
        "sweep_ratio_norm": max(r.ratio1 for r in rows),
        "sweep_ratio_global_testing": max(r.ratio2 for r in rows),
        "sweep_ratio_norm_vs_testing": max(r.ratio3 for r in rows),
    }
    if pin:
        write_pins(ratios, digest, config.pins_file)
    fitted, invariants = pinned_constants(ratios, digest, load_pins(config.pins_file), required=False)
    summary = {"rows": len(rows), "corpus_hash": digest}
    if len({round(r.char, 12) for r in rows}) >= 2:
        slope = testing.loglog_slope(rows)
        summary["slope"] = slope
        invariants.append(InvariantResult(name="norm_slope_in_characteristic", passed=slope <= SLOPE_LIMIT, value=slope, bound=SLOPE_LIMIT))
    files.append(file_handler.save_json([c.model_dump() for c in fitted], config.output_dir, "fitted_constants.json"))
    return ReportBundle(subcommand="sweep", files=files, summary=summary, invariants=invariants, fitted_constants=fitted)


def verify(config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    kernel = build_kernel(config)
    grid = grids(config)[0]
    specs = corpus_specs(config.corpus_size)
    digest = corpus_hash(specs, grid, {"kernel": config.kernel.model_dump(), "r": config.r, "seed": config.seed})
    pins = load_pins(config.pins_file)
    ctx = VerifyContext(
        grid=grid,
        kernel=kernel,
        T=operators.discretize(kernel, grid, config.kernel.band),
        corpus=build_weights(specs, grid),
        specs=specs,
        r=config.r,
        eps=config.kernel.eps,
        multiplier=config.stopping_multiplier,
        seed=config.seed,
        threads=config.threads,
        # pinning refits every constant
        pinned={} if pin else pins.get(digest, {}),
    )
    run_suite(ctx)
    if pin:
        write_pins(ctx.fitted, digest, config.pins_file)
        pins = load_pins(config.pins_file)
    fitted = compare_pins(ctx, digest, pins, required=not pin)
    files = [
        file_handler.save_json([i.model_dump() for i in ctx.invariants], config.output_dir, "invariants.json"),
        file_handler.save_json([c.model_dump() for c in fitted], config.output_dir, "fitted_constants.json"),
    ]
    summary = {"invariants": len(ctx.invariants), "failed": sum(not i.passed for i in ctx.invariants), "corpus_hash": digest}
    return ReportBundle(subcommand="verify", files=files, summary=summary, invariants=ctx.invariants, fitted_constants=fitted)


HANDLERS = {
    "characteristic": characteristic,
    "norm": norm,
    "testing": testing_constants,
    "sparse": sparse,
    "czdecomp": czdecomp,
    "weak": weak,
    "sweep": sweep,
    "verify": verify,
}


def run(subcommand: str, config: ExperimentConfig, pin: bool = False) -> ReportBundle:
    handler = HANDLERS.get(subcommand)
    if handler is None:
        raise ConfigError(f"subcommand: unknown {subcommand!r}; expected one of {sorted(HANDLERS)}")
    logger.info("running %s on m=%s", subcommand, config.grid.m)
    bundle = handler(config, pin)
    if bundle.failed:
        logger.error("%s: %d invariant(s) failed", subcommand, len(bundle.failed))
    return bundle
