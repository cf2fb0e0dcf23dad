import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Literal

import numpy as np

from app.config import LATTICE_SHIFTS, MIN_CHARACTERISTIC_SPAN, THREADS
from app.exceptions import DegenerateMeasureError
from app.models.grid import Grid
from app.models.operator import CausalKernel, OperatorMatrix
from app.models.weight import MeasurePair, Weight
from app.schemas.reports import SweepRow, TestingReport
from app.services.dyadic import dyadic_spans, lattice_shifts
from app.services.operators import discretize, weighted_operator_norm
from app.services.weights import ap_up_characteristic, family_generate

logger = logging.getLogger(__name__)

Scope = Literal["local", "semilocal", "global"]

# pairs of the WB scan handled per vectorized block
_WB_CHUNK = 1 << 20


def _mu_columns(T: OperatorMatrix, mp: MeasurePair) -> np.ndarray:
    """Matrix whose column y is T_μ applied to the single cell y."""
    if T.flavor == "mu_weighted":
        return T.entries
    return T.kernel_matrix * mp.mu[None, :]


def _indicator_images(T: OperatorMatrix, mp: MeasurePair, starts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """T_μ χ_Q for every Q = [start, start+size), one column each."""
    A = _mu_columns(T, mp)
    C = np.concatenate((np.zeros((A.shape[0], 1)), np.cumsum(A, axis=1)), axis=1)
    return C[:, starts + sizes] - C[:, starts]


# ---------------- testing constants ----------------

def local_testing(T: OperatorMatrix, mp: MeasurePair, scope: Scope = "local", shifts=None) -> float:
    """sup over dyadic Q ⊆ ℍ of ∫_R |T_μ χ_Q|² dν / μ(Q) with R = Q, 2Q or the whole grid.

    2Q is rounded outward to whole cells, so a single cell [s, s+1) gets [s−1, s+2).
    For the dual constant pass T.transpose() and mp.swapped().
    """
    if scope not in ("local", "semilocal", "global"):
        raise ValueError(f"unknown testing scope {scope!r}")
    starts, sizes = dyadic_spans(mp.grid, 0, mp.support_cells, shifts, min_level=0)
    M = np.concatenate(([0.0], np.cumsum(mp.mu)))
    mass = M[starts + sizes] - M[starts]
    keep = mass > 0
    if not np.any(keep):
        raise DegenerateMeasureError("μ vanishes on every dyadic interval of the support")
    starts, sizes, mass = starts[keep], sizes[keep], mass[keep]

    images = _indicator_images(T, mp, starts, sizes)
    energy = images ** 2 * mp.nu[:, None]
    if scope == "global":
        integral = energy.sum(axis=0)
    else:
        if scope == "local":
            lo, hi = starts, starts + sizes
        else:
            pad = (sizes + 1) // 2
            lo = np.maximum(starts - pad, 0)
            hi = np.minimum(starts + sizes + pad, mp.grid.n)
        R = np.concatenate((np.zeros((1, energy.shape[1])), np.cumsum(energy, axis=0)), axis=0)
        cols = np.arange(starts.size)
        integral = R[hi, cols] - R[lo, cols]
    return float(np.max(integral / mass))


def wbp_constant(T: OperatorMatrix, mp: MeasurePair, shifts=None) -> float:
    """sup |⟨T_μ χ_Q, χ_P⟩_ν| / (μ(Q) ν(P))^{1/2} over disjoint dyadic P, Q ⊆ ℍ with dist(P, Q) ≤ max side."""
    starts, sizes = dyadic_spans(mp.grid, 0, mp.support_cells, shifts, min_level=0)
    stops = starts + sizes
    B = mp.nu[:, None] * _mu_columns(T, mp)
    S = np.zeros((B.shape[0] + 1, B.shape[1] + 1))
    S[1:, 1:] = B.cumsum(axis=0).cumsum(axis=1)
    M = np.concatenate(([0.0], np.cumsum(mp.mu)))
    N = np.concatenate(([0.0], np.cumsum(mp.nu)))
    mu_Q, nu_P = M[stops] - M[starts], N[stops] - N[starts]

    count = starts.size
    best = 0.0
    rows_per_chunk = max(1, _WB_CHUNK // max(count, 1))
    q = np.arange(count)[None, :]
    for first in range(0, count, rows_per_chunk):
        p = np.arange(first, min(count, first + rows_per_chunk))[:, None]
        disjoint = (stops[p] <= starts[q]) | (stops[q] <= starts[p])
        gap = np.maximum(starts[q] - stops[p], starts[p] - stops[q])
        near = gap <= np.maximum(sizes[p], sizes[q])
        denom = np.sqrt(mu_Q[q] * nu_P[p])
        valid = disjoint & near & (denom > 0)
        if not np.any(valid):
            continue
        pair = S[stops[p], stops[q]] - S[starts[p], stops[q]] - S[stops[p], starts[q]] + S[starts[p], starts[q]]
        ratio = np.abs(pair[valid]) / denom[valid]
        best = max(best, float(ratio.max()))
    return best


def wbp_tail_bound(mp: MeasurePair, C_size: float) -> float:
    """Size-estimate bound C·(max w · max w⁻¹)^{1/2} for the pairs the WB scan leaves out."""
    h = mp.support_cells
    cw = mp.grid.cell_width
    return float(C_size * math.sqrt(mp.nu[:h].max() / cw * mp.mu[:h].max() / cw))


# ---------------- weak norms ----------------

def _weak_test_family(w: Weight, haar_samples: int, seed: int) -> np.ndarray:
    """Columns: χ_I and w⁻¹χ_I for dyadic I ⊆ ℍ (single cells are the spikes), plus random Haar combinations."""
    grid = w.grid
    h = w.support_cells
    starts, sizes = dyadic_spans(grid, 0, h, min_level=0)
    cells = np.arange(grid.n)[:, None]
    inside = (cells >= starts[None, :]) & (cells < (starts + sizes)[None, :])
    indicators = inside.astype(float)
    inverse = indicators * w.inverse().values[:, None]

    rng = np.random.default_rng(seed)
    haar = np.zeros((grid.n, haar_samples))
    coarse = sizes >= 2
    coarse_starts, coarse_sizes = starts[coarse], sizes[coarse]
    for k in range(haar_samples):
        if coarse_starts.size == 0:
            break
        picks = rng.choice(coarse_starts.size, size=min(8, coarse_starts.size), replace=False)
        for i in picks:
            s, z = coarse_starts[i], coarse_sizes[i]
            c = rng.normal()
            haar[s : s + z // 2, k] += c
            haar[s + z // 2 : s + z, k] -= c
    return np.concatenate((indicators, inverse, haar), axis=1)


def weak_norm(T: OperatorMatrix, w: Weight, p: float = 2, haar_samples: int = 16, seed: int = 0) -> float:
    """Lower estimate of ‖T‖_{L^p(w) → L^{p,∞}(w)} over a fixed family of test functions on ℍ.

    For each f: sup_λ λ w({|Tf| > λ})^{1/p} / ‖f‖_{L^p(w)}, computed from |Tf| sorted
    in decreasing order against the cumulative w-mass.
    """
    if p not in (1, 2):
        raise ValueError(f"weak norms are estimated for p in (1, 2), got {p}")
    if T.flavor != "plain":
        raise ValueError("weak_norm takes the plain operator")
    h = w.support_cells
    cw = w.grid.cell_width
    F = _weak_test_family(w, haar_samples, seed)
    F[h:] = 0.0
    norms = ((np.abs(F[:h]) ** p * w.positive[:, None]).sum(axis=0) * cw) ** (1 / p)
    keep = norms > 0
    F, norms = F[:, keep], norms[keep]
    if F.shape[1] == 0:
        return 0.0
    V = np.abs(T.entries[:h] @ F)
    order = np.argsort(-V, axis=0, kind="stable")
    sorted_values = np.take_along_axis(V, order, axis=0)
    cumulative = np.cumsum(w.positive[order] * cw, axis=0)
    weak = (sorted_values * cumulative ** (1 / p)).max(axis=0)
    return float(np.max(weak / norms))


# ---------------- reports ----------------

def testing_report(T: OperatorMatrix, w: Weight, shifts=None, C_size: float = 1.0, seed: int = 0) -> TestingReport:
    """All testing constants of (T, w), their duals for (Tᵗ, w⁻¹), norms and the characteristic."""
    mp = w.measures()
    T_dual, mp_dual = T.transpose(), mp.swapped()
    report = TestingReport(
        K_chi=local_testing(T, mp, "local", shifts),
        K_sl=local_testing(T, mp, "semilocal", shifts),
        K_gl=local_testing(T, mp, "global", shifts),
        K_WB=wbp_constant(T, mp, shifts),
        K_chi_dual=local_testing(T_dual, mp_dual, "local", shifts),
        K_sl_dual=local_testing(T_dual, mp_dual, "semilocal", shifts),
        K_gl_dual=local_testing(T_dual, mp_dual, "global", shifts),
        K_WB_tail_bound=wbp_tail_bound(mp, C_size),
        norm_L2w=weighted_operator_norm(T, w),
        weak_norm_T=weak_norm(T, w, 2, seed=seed),
        weak_norm_Tprime=weak_norm(T_dual, w.inverse(), 2, seed=seed),
        characteristic=ap_up_characteristic(w, 2, shifts=shifts),
    )
    logger.debug("testing report: %s", report.model_dump())
    return report


def sweep_row(weight_id: str, m: int, report: TestingReport) -> SweepRow:
    """Sweep table row; testing columns take the larger of the primal and dual constants."""
    char = report.characteristic
    K_gl = max(report.K_gl, report.K_gl_dual)
    log_char = math.log(char) if char > 0 else 0.0
    return SweepRow(
        weight_id=weight_id,
        m=m,
        char=char,
        norm=report.norm_L2w,
        K_chi=max(report.K_chi, report.K_chi_dual),
        K_sl=max(report.K_sl, report.K_sl_dual),
        K_gl=K_gl,
        K_WB=report.K_WB,
        weak2=report.weak_norm_T,
        weak2_dual=report.weak_norm_Tprime,
        ratio1=report.norm_L2w / (char * (1 + max(log_char, 0.0))),
        ratio2=math.sqrt(K_gl) / (char * math.log(math.e + char)),
        ratio3=report.norm_L2w / (char + math.sqrt(K_gl)),
    )


def a2_theorem_sweep(
    kernel: CausalKernel,
    weight_family: list[tuple[str, str, dict, int]],
    grid_sizes: list[int],
    lo: float = 0.0,
    hi: float = 1.0,
    band: int = 1,
    omegas=LATTICE_SHIFTS,
    threads: int = THREADS,
    min_span: float = MIN_CHARACTERISTIC_SPAN,
) -> list[SweepRow]:
    """Scaling table over (weight, m). Family entries are (weight_id, kind, params, seed).

    The characteristics of the family must spread over a factor of at least `min_span`;
    otherwise ValueError is raised before any operator norm is computed. Rows run in a thread pool and come back ordered by characteristic.
    """
    grids = {m: Grid(lo, hi, m) for m in grid_sizes}
    shifts = {m: lattice_shifts(grids[m], omegas) for m in grid_sizes}
    weights = {
        (m, entry[0]): family_generate(entry[1], entry[2], entry[3], grids[m])
        for m in grid_sizes
        for entry in weight_family
    }
    chars = [ap_up_characteristic(w, 2, shifts=shifts[key[0]]) for key, w in weights.items()]
    span = max(chars) / min(chars) if chars else 1.0
    if span < min_span:
        raise ValueError(f"characteristics span a factor {span:.3g}; the sweep needs at least {min_span:g}")
    logger.info("sweep family spans characteristics %.4g .. %.4g", min(chars), max(chars))
    operators = {m: discretize(kernel, grids[m], band) for m in grid_sizes}

    def run(task):
        m, (weight_id, kind, params, seed) = task
        w = weights[(m, weight_id)]
        report = testing_report(operators[m], w, shifts[m], kernel.C_size, seed)
        row = sweep_row(weight_id, m, report)
        logger.info("sweep row %s m=%d: char=%.4g norm=%.4g", weight_id, m, row.char, row.norm)
        return row

    tasks = [(m, entry) for m in grid_sizes for entry in weight_family]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        rows = list(executor.map(run, tasks))
    return sorted(rows, key=lambda r: (r.char, r.m, r.weight_id))


def loglog_slope(rows: list[SweepRow], x: str = "char", y: str = "norm") -> float:
    """Least-squares slope of log y against log x."""
    xs = np.array([getattr(r, x) for r in rows], dtype=float)
    ys = np.array([getattr(r, y) for r in rows], dtype=float)
    keep = (xs > 0) & (ys > 0)
    xs, ys = np.log(xs[keep]), np.log(ys[keep])
    if np.unique(xs).size < 2:
        raise ValueError("need at least two distinct positive x values for a slope")
    return float(np.polyfit(xs, ys, 1)[0])
