import logging

import numpy as np
from scipy import linalg

from app.config import DENSE_MODE_MAX_M, DENSE_NORM_MAX_CELLS, POWER_ITERATION_MAX_ITER, POWER_ITERATION_TOL
from app.exceptions import KernelEvaluationError, ResourceLimitError, WeightError
from app.models.grid import DyadicInterval, Grid
from app.models.operator import CausalKernel, OperatorMatrix
from app.models.weight import Weight
from app.schemas.reports import KernelAxiomsReport

logger = logging.getLogger(__name__)


# ---------------- built-in kernels ----------------

def hilbert_causal() -> CausalKernel:
    """χ_{x>y}/(x−y)."""

    def func(x, y):
        t = x - y
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(t > 0, 1.0 / np.where(t > 0, t, 1.0), 0.0)

    return CausalKernel(func, C_size=1.0, eps=1.0, direction="up", name="hilbert_causal")


def log_oscillating() -> CausalKernel:
    """χ_{x>y}·sin(log(x−y)) / ((x−y)(1+|log(x−y)|))."""

    def func(x, y):
        t = x - y
        safe = np.where(t > 0, t, 1.0)
        log_t = np.log(safe)
        return np.where(t > 0, np.sin(log_t) / (safe * (1.0 + np.abs(log_t))), 0.0)

    return CausalKernel(func, C_size=1.0, eps=1.0, direction="up", name="log_oscillating")


def zero_kernel() -> CausalKernel:
    return CausalKernel(lambda x, y: np.zeros(np.broadcast(x, y).shape), C_size=1.0, eps=1.0, name="zero")


# names usable inside config expressions
EXPRESSION_NAMESPACE = {
    name: getattr(np, name)
    for name in ("abs", "sin", "cos", "exp", "log", "sqrt", "where", "pi", "sign", "minimum", "maximum")
}


def kernel_from_expression(expression: str, C_size: float = 1.0, eps: float = 1.0, name: str | None = None) -> CausalKernel:
    """Kernel given as a numpy expression in x and y; causality is imposed by the χ_{x>y} factor."""
    try:
        code = compile(expression, "<kernel expression>", "eval")
    except SyntaxError as e:
        raise ValueError(f"invalid kernel expression {expression!r}: {e}") from e
    for ident in code.co_names:
        if ident not in EXPRESSION_NAMESPACE and ident not in ("x", "y"):
            raise ValueError(f"kernel expression uses unknown name {ident!r}")

    def func(x, y):
        t = x - y
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = eval(code, {"__builtins__": {}}, {**EXPRESSION_NAMESPACE, "x": x, "y": y})
        return np.where(t > 0, raw, 0.0)

    return CausalKernel(func, C_size=C_size, eps=eps, direction="up", name=name or expression)


BUILTIN_KERNELS = {
    "hilbert": hilbert_causal,
    "log_oscillating": log_oscillating,
    "zero": zero_kernel,
}


# ---------------- discretization ----------------

def discretize(kernel: CausalKernel, grid: Grid, band: int = 1) -> OperatorMatrix:
    """Midpoint-rule matrix T_ij = K(x_i, y_j)·cell_width for |i−j| ≥ band."""
    if band < 1:
        raise ValueError(f"band must be >= 1, got {band}")
    if grid.m > DENSE_MODE_MAX_M:
        raise ResourceLimitError(f"m={grid.m} is too large for a dense operator (limit m={DENSE_MODE_MAX_M})")
    n = grid.n
    i, j = np.indices((n, n))
    mask = (i - j >= band) if kernel.direction == "up" else (j - i >= band)
    x = grid.midpoints[i[mask]]
    y = grid.midpoints[j[mask]]
    values = kernel(x, y)
    if not np.all(np.isfinite(values)):
        k = int(np.argmax(~np.isfinite(values)))
        raise KernelEvaluationError(f"kernel {kernel.name} is not finite at x={x[k]:.6g}, y={y[k]:.6g}")
    entries = np.zeros((n, n))
    entries[mask] = values * grid.cell_width
    return OperatorMatrix(entries, grid, band, "plain", kernel.direction)


def kernel_axioms_check(kernel: CausalKernel, samples: int, seed: int, scale: float = 1.0, refine_steps: int = 20) -> KernelAxiomsReport:
    """Monte-Carlo check of causality, size and smoothness at random admissible triples."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-scale, scale, samples)
    y = rng.uniform(-scale, scale, samples)
    forward = (x > y) if kernel.direction == "up" else (x < y)
    values = kernel(x, y)

    forbidden = ~forward & (x != y)
    violations = int(np.count_nonzero(values[forbidden]))
    causality_worst = float(np.max(np.abs(values[forbidden]), initial=0.0))

    t = np.abs(x - y)
    size_ratio = float(np.max(np.abs(values[forward]) * t[forward], initial=0.0)) / kernel.C_size

    def smooth_quotient(xs, ys, hs):
        num = np.abs(kernel(xs, ys) - kernel(xs + hs, ys)) + np.abs(kernel(xs, ys) - kernel(xs, ys - hs))
        return num * np.abs(xs - ys) ** (1 + kernel.eps) / (np.abs(hs) ** kernel.eps * kernel.C_size)

    xs, ys = x[forward], y[forward]
    hs = rng.uniform(-0.5, 0.5, xs.size) * np.abs(xs - ys)
    hs = np.where(hs == 0, 1e-3 * np.abs(xs - ys), hs)
    quotient = smooth_quotient(xs, ys, hs)
    smoothness_ratio = float(np.max(quotient, initial=0.0))

    # local refinement around the worst sample
    if xs.size:
        k = int(np.argmax(quotient))
        bx, by, bh = xs[k], ys[k], hs[k]
        for _ in range(refine_steps):
            dist = abs(bx - by)
            cand_h = np.clip(bh + rng.normal(0, 0.1 * dist, 32), -0.5 * dist, 0.5 * dist)
            cand_h = np.where(cand_h == 0, 1e-3 * dist, cand_h)
            q = smooth_quotient(np.full(32, bx), np.full(32, by), cand_h)
            best = int(np.argmax(q))
            if q[best] > smoothness_ratio:
                smoothness_ratio, bh = float(q[best]), cand_h[best]

    logger.info("kernel %s: size ratio %.4g, smoothness ratio %.4g", kernel.name, size_ratio, smoothness_ratio)
    return KernelAxiomsReport(
        kernel=kernel.name,
        samples=samples,
        causality_violations=violations,
        causality_worst=causality_worst,
        size_ratio=size_ratio,
        smoothness_ratio=smoothness_ratio,
        smoothness_constant=smoothness_ratio * kernel.C_size,
        passes_causality=violations == 0,
        passes_size=size_ratio <= 1 + 1e-12,
        passes_smoothness=smoothness_ratio <= 1 + 1e-12,
    )


# ---------------- one-sided maximal operators ----------------

def cell_range(n: int, I0=None) -> tuple[int, int]:
    """Normalize an interval argument (None, DyadicInterval or (start, stop) cells)."""
    if I0 is None:
        return 0, n
    if isinstance(I0, DyadicInterval):
        a, b = I0.span()
    else:
        a, b = int(I0[0]), int(I0[1])
    if not (0 <= a < b <= n):
        raise ValueError(f"interval [{a}, {b}) is not a nonempty range of the {n} cells")
    return a, b


def _backward_sup(values: np.ndarray) -> np.ndarray:
    """sup over windows [j, i] of the mean, for every i, via the lower hull of the prefix sums.

    The best window ending at i starts at the tangent point from (i+1, P[i+1]) to the
    lower convex hull of the earlier prefix points; the tangent is found by bisection.
    """
    n = values.size
    P = np.concatenate(([0.0], np.cumsum(values)))
    hull: list[int] = []
    out = np.empty(n)
    for t in range(1, n + 1):
        j = t - 1
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            if (a - o) * (P[j] - P[o]) - (P[a] - P[o]) * (j - o) <= 0:
                hull.pop()
            else:
                break
        hull.append(j)
        lo, hi = 0, len(hull) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            h0, h1 = hull[mid], hull[mid + 1]
            if (P[h1] - P[h0]) * (t - h0) < (P[t] - P[h0]) * (h1 - h0):
                lo = mid + 1
            else:
                hi = mid
        h = hull[lo]
        out[t - 1] = (P[t] - P[h]) / (t - h)
    return out


def _backward_sup_naive(values: np.ndarray) -> np.ndarray:
    n = values.size
    P = np.concatenate(([0.0], np.cumsum(values)))
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        means = (P[i + 1] - P[j]) / (i + 1 - j)
    means = np.where(j <= i, means, -np.inf)
    return means.max(axis=1)


def _maximal(f, I0, r: float, direction: str, sweep) -> np.ndarray:
    if r < 1:
        raise ValueError(f"maximal exponent r must be >= 1, got {r}")
    g = np.abs(np.asarray(f, dtype=float)) ** r
    n = g.size
    a, b = cell_range(n, I0)
    out = np.full(n, np.nan)
    if direction == "up":
        out[a:b] = sweep(g[a:b])
    else:
        out[a:b] = sweep(g[a:b][::-1])[::-1]
    return out if r == 1 else out ** (1.0 / r)


def max_up(f: np.ndarray, I0=None, r: float = 1.0) -> np.ndarray:
    """M↑_{I0,r} f on the cells of I0 (NaN outside). Windows end at the cell itself."""
    return _maximal(f, I0, r, "up", _backward_sup)


def max_down(f: np.ndarray, I0=None, r: float = 1.0) -> np.ndarray:
    """M↓_{I0,r} f on the cells of I0 (NaN outside). Windows start at the cell itself."""
    return _maximal(f, I0, r, "down", _backward_sup)


def max_up_naive(f: np.ndarray, I0=None, r: float = 1.0) -> np.ndarray:
    return _maximal(f, I0, r, "up", _backward_sup_naive)


def max_down_naive(f: np.ndarray, I0=None, r: float = 1.0) -> np.ndarray:
    return _maximal(f, I0, r, "down", _backward_sup_naive)


def level_set_components(values: np.ndarray, lam: float) -> list[tuple[int, int]]:
    """Maximal runs of cells where values > lam (NaN counts as outside)."""
    mask = np.nan_to_num(np.asarray(values, dtype=float), nan=-np.inf) > lam
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [(int(a), int(b)) for a, b in zip(starts, stops)]


# ---------------- Poisson averages ----------------

def poisson_weights(center: float, length: float, grid: Grid, eps: float) -> np.ndarray:
    return length ** eps / (length + np.abs(center - grid.midpoints)) ** (1 + eps)


def poisson_average(I: DyadicInterval, measure: np.ndarray, eps: float, grid: Grid) -> float:
    """𝒫_I(dλ) = ∫ ℓ^ε / (ℓ + |c(I) − x|)^{1+ε} dλ(x) as a midpoint sum."""
    return float(poisson_weights(I.center(grid), I.length(grid), grid, eps) @ np.asarray(measure, dtype=float))


def lower_upper_components(J1, J2) -> tuple[tuple, tuple]:
    """For J2 = [b, c) ⊆ J1 = [a, d) return (𝓛, 𝓤) = ([a, b), [c, d)); empty parts have a = b."""
    a, d = J1.span() if isinstance(J1, DyadicInterval) else J1
    b, c = J2.span() if isinstance(J2, DyadicInterval) else J2
    if not (a <= b <= c <= d):
        raise ValueError(f"[{b}, {c}) is not contained in [{a}, {d})")
    return (a, b), (c, d)


# ---------------- norms ----------------

def spectral_norm(A: np.ndarray, seed: int = 0) -> float:
    """Largest singular value: dense SVD up to DENSE_NORM_MAX_CELLS, power iteration beyond."""
    A = np.asarray(A, dtype=float)
    if A.size == 0 or not np.any(A):
        return 0.0
    if max(A.shape) <= DENSE_NORM_MAX_CELLS:
        return float(linalg.svdvals(A)[0])

    rng = np.random.default_rng(seed)
    v = rng.normal(size=A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_ITERATION_MAX_ITER):
        u = A @ v
        z = A.T @ u
        z_norm = np.linalg.norm(z)
        if z_norm == 0:
            return 0.0
        sigma_new = float(np.sqrt(z_norm))
        v = z / z_norm
        if abs(sigma_new - sigma) <= POWER_ITERATION_TOL * sigma_new:
            return sigma_new
        sigma = sigma_new
    logger.warning("power iteration hit the iteration cap; returning %.6g", sigma)
    return sigma


def weighted_operator_norm(T: OperatorMatrix, w: Weight, mode: str = "L2w") -> float:
    """‖T‖ on L²(w) (mode L2w) or the norm of the bilinear form ⟨T_μ f, g⟩_ν (bilinear_mu_nu)."""
    if T.flavor != "plain":
        raise ValueError("weighted norms take the plain operator")
    h = w.support_cells
    if np.any(w.values[:h] <= 0):
        raise WeightError("weight vanishes inside its support")
    block = slice(0, h)
    if mode == "L2w":
        root = np.sqrt(w.positive)
        A = root[:, None] * T.entries[block, block] / root[None, :]
    elif mode == "bilinear_mu_nu":
        mp = w.measures()
        A = np.sqrt(mp.nu[block])[:, None] * T.kernel_matrix[block, block] * np.sqrt(mp.mu[block])[None, :]
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    return spectral_norm(A)


def lp_norm(f: np.ndarray, w: np.ndarray, p: float, grid: Grid) -> float:
    return float((np.abs(f) ** p * w).sum() * grid.cell_width) ** (1.0 / p)


def maximal_norm_estimate(w: Weight, trials: int = 16, seed: int = 0, iterations: int = 4, per_level: int = 8) -> float:
    """Randomized lower estimate of ‖M↑‖_{L²(w)→L²(w)} on ℍ.

    Seeds are the extremal candidates w⁻¹χ_I (at most `per_level` random I per
    scale) and random positive functions; each is improved by a few steps of the
    ascent f ← (M↑f)·χ_{supp f}.
    """
    grid = w.grid
    h = w.support_cells
    wv = w.positive
    rng = np.random.default_rng(seed)

    def ratio(f):
        mf = max_up(f, (0, h))
        den = lp_norm(f, wv, 2, grid)
        return lp_norm(mf, wv, 2, grid) / den if den > 0 else 0.0

    candidates = []
    for level in range(0, grid.m + 1):
        starts = np.arange(0, h - 2 ** level + 1, 2 ** level)
        if starts.size > per_level:
            starts = rng.choice(starts, per_level, replace=False)
        for start in starts:
            f = np.zeros(h)
            f[start : start + 2 ** level] = 1.0 / wv[start : start + 2 ** level]
            candidates.append(f)
    for _ in range(trials):
        candidates.append(rng.random(h) / wv ** rng.uniform(0, 1))

    best = 0.0
    for f in candidates:
        current = ratio(f)
        for _ in range(iterations):
            g = max_up(f, (0, h)) * (f > 0)
            r = ratio(g)
            if r <= current:
                break
            f, current = g, r
        best = max(best, current)
    return best


def mr_bound_ratio(T: OperatorMatrix, w: Weight, f: np.ndarray, p: float, r: float, I0=None) -> float:
    """‖Tf‖_{L^p(w,I0)} / (p p′ (r′)^{1/p′} ‖f‖_{L^p(M↓_{I0,r} w, I0)}) for f supported in I0."""
    if p <= 1 or r <= 1:
        raise ValueError("p and r must exceed 1")
    a, b = cell_range(T.n, I0)
    f_loc = np.zeros(T.n)
    f_loc[a:b] = np.asarray(f, dtype=float)[a:b]
    Tf = T.apply(f_loc)[a:b]
    mw = max_down(w.values, (a, b), r)[a:b]
    p_conj = p / (p - 1)
    r_conj = r / (r - 1)
    factor = p * p_conj * r_conj ** (1 / p_conj)
    den = factor * lp_norm(f_loc[a:b], mw, p, T.grid)
    if den == 0:
        return 0.0
    return lp_norm(Tf, w.values[a:b], p, T.grid) / den
