import logging
import math

import numpy as np

from app.exceptions import ConvergenceError, WeightError
from app.models.grid import DyadicInterval, Grid
from app.models.weight import MeasurePair, Weight
from app.schemas.reports import LocalCharacteristicGap, PictureBoundReport, ReverseHolderReport
from app.services.dyadic import dyadic_spans
from app.services.operators import cell_range, level_set_components, max_down

logger = logging.getLogger(__name__)

FAMILY_KINDS = ("power", "exp_monotone", "cutoff", "random_dyadic")


def _prefix(values: np.ndarray) -> np.ndarray:
    return np.concatenate(([0.0], np.cumsum(values)))


def _mean(prefix: np.ndarray, starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    return (prefix[stops] - prefix[starts]) / (stops - starts)


def _admissible(w: Weight, restrict_to, shifts) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = 0, w.support_cells
    if restrict_to is not None:
        a, b = cell_range(w.grid.n, restrict_to)
        lo, hi = max(lo, a), min(hi, b)
    starts, sizes = dyadic_spans(w.grid, lo, hi, shifts, min_level=1)
    if starts.size == 0:
        raise ValueError("no dyadic interval with at least two cells fits inside the support")
    return starts, sizes


def _dual_power(w: Weight, p: float) -> np.ndarray:
    if p <= 1:
        raise ValueError(f"p must exceed 1 (use a1_up_local_characteristic for p = 1), got {p}")
    return w.power(-1.0 / (p - 1))


# ---------------- characteristics ----------------

def ap_up_characteristic(w: Weight, p: float, restrict_to=None, shifts=None) -> float:
    """sup over dyadic I ⊆ ℍ of ⟨w⟩_{I⁺} ⟨w^{−1/(p−1)}⟩_{I⁻}^{p−1}, over both default lattices unless `shifts` is given."""
    dual = _dual_power(w, p)
    starts, sizes = _admissible(w, restrict_to, shifts)
    mids, stops = starts + sizes // 2, starts + sizes
    upper = _mean(_prefix(w.values), mids, stops)
    lower = _mean(_prefix(dual), starts, mids) ** (p - 1)
    return float(np.max(upper * lower))


def ap_down_characteristic(w: Weight, p: float, restrict_to=None, shifts=None) -> float:
    """Mirror image: ⟨w⟩_{I⁻} ⟨w^{−1/(p−1)}⟩_{I⁺}^{p−1}."""
    dual = _dual_power(w, p)
    starts, sizes = _admissible(w, restrict_to, shifts)
    mids, stops = starts + sizes // 2, starts + sizes
    lower = _mean(_prefix(w.values), starts, mids)
    upper = _mean(_prefix(dual), mids, stops) ** (p - 1)
    return float(np.max(upper * lower))


def ap_classical(w: Weight, p: float, restrict_to=None, shifts=None) -> float:
    dual = _dual_power(w, p)
    starts, sizes = _admissible(w, restrict_to, shifts)
    stops = starts + sizes
    return float(np.max(_mean(_prefix(w.values), starts, stops) * _mean(_prefix(dual), starts, stops) ** (p - 1)))


def joint_characteristic(mp: MeasurePair, shifts=None) -> float:
    """[μ,ν]_{A2↑} = sup μ(Q⁻)ν(Q⁺) / (|Q⁻||Q⁺|) over dyadic Q ⊆ ℍ."""
    starts, sizes = dyadic_spans(mp.grid, 0, mp.support_cells, shifts, min_level=1)
    if starts.size == 0:
        raise ValueError("no dyadic interval with at least two cells fits inside the support")
    mids, stops = starts + sizes // 2, starts + sizes
    half = (sizes // 2) * mp.grid.cell_width
    mu_lower = _prefix(mp.mu)[mids] - _prefix(mp.mu)[starts]
    nu_upper = _prefix(mp.nu)[stops] - _prefix(mp.nu)[mids]
    return float(np.max(mu_lower * nu_upper / half ** 2))


def a1_up_local_characteristic(w: Weight, I0=None) -> float:
    """sup over cells x of I0 of M↓_{I0} w(x) / w(x)."""
    a, b = cell_range(w.grid.n, I0)
    if np.any(w.values[a:b] <= 0):
        raise WeightError(f"weight vanishes inside [{a}, {b})")
    return float(np.max(max_down(w.values, (a, b))[a:b] / w.values[a:b]))


def a1_local_scan(w: Weight, I0=None) -> float:
    """The (c, x, d) form: sup (1/(d−c)) ∫_x^d w / inf_{[c,x)} w over grid edges c < x < d in I0.

    Cubic in the number of cells; meant for small grids. Satisfies
    scan ≤ a1_up_local_characteristic ≤ 1 + scan.
    """
    a, b = cell_range(w.grid.n, I0)
    values = w.values[a:b]
    if np.any(values <= 0):
        raise WeightError(f"weight vanishes inside [{a}, {b})")
    P = _prefix(values)
    n = values.size
    best = 0.0
    for x in range(1, n):
        run_min = np.minimum.accumulate(values[:x][::-1])[::-1]  # min over [c, x)
        c = np.arange(x)
        d = np.arange(x + 1, n + 1)
        num = P[d] - P[x]
        q = num[None, :] / ((d[None, :] - c[:, None]) * run_min[:, None])
        best = max(best, float(q.max()))
    return best


def ap_local_characteristic(w: Weight, p: float, I0=None) -> float:
    """Smallest C with ∫_x^d w (∫_c^x w^{−1/(p−1)})^{p−1} ≤ C (d−c)^p over grid edges in I0."""
    a, b = cell_range(w.grid.n, I0)
    dual = _dual_power(w, p)[a:b]
    values = w.values[a:b]
    if np.any(values <= 0):
        raise WeightError(f"weight vanishes inside [{a}, {b})")
    cw = w.grid.cell_width
    P, D = _prefix(values) * cw, _prefix(dual) * cw
    n = values.size
    best = 0.0
    for x in range(1, n):
        c = np.arange(x)
        d = np.arange(x + 1, n + 1)
        upper = P[d] - P[x]
        lower = (D[x] - D[c]) ** (p - 1)
        q = upper[None, :] * lower[:, None] / (((d[None, :] - c[:, None]) * cw) ** p)
        best = max(best, float(q.max()))
    return best


def ap_local_gap(w: Weight, p: float, I0=None) -> LocalCharacteristicGap:
    """Dyadic characteristic on I0 beside the all-subinterval localized one."""
    dyadic = ap_up_characteristic(w, p, restrict_to=I0)
    local = ap_local_characteristic(w, p, I0)
    return LocalCharacteristicGap(dyadic=dyadic, local=local, gap=local - dyadic)


# ---------------- averaging picture ----------------

def picture_bound(mp: MeasurePair, Q: DyadicInterval) -> PictureBoundReport:
    """(1/|Q|²) Σ_{x∈Q⁺} ν_x μ([x−|Q|/2, x)) against its Whitney-square cover and 2[μ,ν]."""
    if Q.level < 2 or Q.stop > mp.support_cells or Q.start < 0:
        raise ValueError(f"{Q} must have at least four cells inside the support")
    grid = mp.grid
    h = Q.size
    mid = Q.start + h // 2
    M = _prefix(mp.mu)
    x = np.arange(mid, Q.stop)
    double = float(mp.nu[x] @ (M[x] - M[x - h // 2]))
    N = _prefix(mp.nu)
    cover = (M[mid] - M[Q.start]) * (N[Q.stop] - N[mid])
    starts, sizes = dyadic_spans(grid, mid, Q.stop, (Q.shift,), min_level=1)
    mids = starts + sizes // 2
    cover += float(np.sum((M[mids] - M[starts]) * (N[starts + sizes] - N[mids])))
    scale = (h * grid.cell_width) ** 2
    joint = joint_characteristic(mp, (Q.shift,))
    value = double / scale
    return PictureBoundReport(
        double_integral=value,
        cover_bound=cover / scale,
        joint_characteristic=joint,
        bound=2 * joint,
        holds=value <= cover / scale * (1 + 1e-12) and value <= 2 * joint,
    )


# ---------------- reverse Hölder ----------------

def _forward_maxima(values: np.ndarray, starts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """max over 1 ≤ L ≤ size of the mean of values[start:start+L], per interval."""
    P = _prefix(values)
    out = np.empty(starts.size)
    for size in np.unique(sizes):
        sel = sizes == size
        s = starts[sel][:, None]
        L = np.arange(1, size + 1)[None, :]
        out[sel] = ((P[s + L] - P[s]) / L).max(axis=1)
    return out


def reverse_holder_verify(w: Weight, I, I0=None, C: float = 1.0) -> ReverseHolderReport:
    """∫_I w^r ≤ 2 (M↓_{I0}(wχ_I)(a))^{r−1} ∫_I w with r = 1 + 1/(C[w]_{A1↑(I0)}).

    The maximal term is taken at the left endpoint a of I = [a, b).
    """
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    a0, b0 = cell_range(w.grid.n, I0)
    a, b = cell_range(w.grid.n, I)
    if not (a0 <= a and b <= b0):
        raise ValueError(f"[{a}, {b}) is not inside I0=[{a0}, {b0})")
    r = 1 + 1 / (C * a1_up_local_characteristic(w, (a0, b0)))
    cw = w.grid.cell_width
    w_loc = np.zeros(w.grid.n)
    w_loc[a:b] = w.values[a:b]
    M = max_down(w_loc, (a0, b0))
    lhs = float(np.sum(w.values[a:b] ** r) * cw)
    rhs = float(2 * M[a] ** (r - 1) * np.sum(w.values[a:b]) * cw)
    Mr = max_down(w_loc, (a0, b0), r)
    active = np.nan_to_num(M, nan=0.0) > 0
    pointwise = float(np.max(Mr[active] / M[active])) if np.any(active) else 0.0
    return ReverseHolderReport(
        r=r,
        lhs=lhs,
        rhs=rhs,
        holds=lhs <= rhs * (1 + 1e-12),
        pointwise_ratio=pointwise,
        pointwise_holds=pointwise <= 2 * (1 + 1e-12),
    )


def _support_range(w: Weight, I0) -> tuple[int, int]:
    """I0 in cells; None means the support of w."""
    return (0, w.support_cells) if I0 is None else cell_range(w.grid.n, I0)


def reverse_holder_worst(w: Weight, I0=None, C: float = 1.0) -> float:
    """max over dyadic I ⊆ I0 (default: the support) of lhs/rhs in the reverse Hölder inequality."""
    a0, b0 = _support_range(w, I0)
    r = 1 + 1 / (C * a1_up_local_characteristic(w, (a0, b0)))
    starts, sizes = dyadic_spans(w.grid, a0, b0, min_level=0)
    stops = starts + sizes
    lhs = _prefix(w.values ** r)[stops] - _prefix(w.values ** r)[starts]
    mass = _prefix(w.values)[stops] - _prefix(w.values)[starts]
    rhs = 2 * _forward_maxima(w.values, starts, sizes) ** (r - 1) * mass
    return float(np.max(lhs / rhs))


def calibrate_reverse_holder(weights: list[Weight], I0=None, lo: float = 1e-3, hi: float = 1e6, iterations: int = 60, pointwise: bool = True) -> float:
    """Smallest C (by log-bisection) for which reverse Hölder holds on every dyadic I ⊆ I0 of every weight.

    I0=None takes each weight on its own support.
    With `pointwise`, C is then doubled until the pointwise form also holds on every interval.
    """

    def holds(C):
        return all(reverse_holder_worst(w, I0, C) <= 1 + 1e-12 for w in weights)

    if not holds(hi):
        raise ConvergenceError(f"reverse Hölder fails even at C={hi}")
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        if holds(mid):
            hi = mid
        else:
            lo = mid
    C = hi
    if pointwise:
        for _ in range(40):
            if all(pointwise_reverse_holder(w, I0, C) for w in weights):
                break
            C *= 2
        else:
            raise ConvergenceError("pointwise reverse Hölder does not settle")
    logger.info("reverse Hölder calibrated at C=%.6g over %d weights", C, len(weights))
    return C


def pointwise_reverse_holder(w: Weight, I0, C: float) -> bool:
    """Pointwise reverse Hölder on every dyadic I ⊆ I0 (default: the support)."""
    a0, b0 = _support_range(w, I0)
    starts, sizes = dyadic_spans(w.grid, a0, b0, min_level=0)
    return all(
        reverse_holder_verify(w, (int(s), int(s + z)), (a0, b0), C).pointwise_holds
        for s, z in zip(starts, sizes)
    )


def level_set_average_gaps(values: np.ndarray, lam: float, I0=None) -> list[tuple[int, int, float, bool]]:
    """Components [s, t) of {M↓_{I0} values > λ} with their mean and whether they touch a0."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    a0, _ = cell_range(len(values), I0)
    out = []
    for s, t in level_set_components(max_down(values, I0), lam):
        out.append((s, t, float(np.mean(values[s:t])), s == a0))
    return out


# ---------------- families ----------------

def family_generate(kind: str, params: dict, seed: int, grid: Grid) -> Weight:
    """Deterministic corpus weight of the given kind."""
    params = dict(params or {})
    x = grid.midpoints
    cutoff = params.get("cutoff")
    if kind == "power":
        a = float(params.get("a", 0.0))
        center = float(params.get("center", grid.lo + grid.length / 2))
        values = np.abs(x - center) ** a
    elif kind == "exp_monotone":
        if "beta" not in params:
            raise ValueError("exp_monotone needs 'beta'")
        values = np.exp(float(params["beta"]) * (x - grid.lo) / grid.length)
    elif kind == "cutoff":
        if "z" not in params:
            raise ValueError("cutoff needs 'z'")
        cutoff = float(params["z"])
        a = float(params.get("a", 0.0))
        center = float(params.get("center", grid.lo))
        values = np.abs(x - center) ** a if a else np.ones(grid.n)
    elif kind == "random_dyadic":
        beta = float(params.get("beta", 2.0))
        if beta < 1:
            raise ValueError(f"random_dyadic needs beta >= 1, got {beta}")
        rng = np.random.default_rng(seed)
        values = np.ones(grid.n)
        log_beta = math.log(beta)
        for level in range(grid.m - 1, -1, -1):
            size = 2 ** level
            factors = np.exp(rng.uniform(-log_beta, log_beta, grid.n // size))
            values *= np.repeat(factors, size)
    else:
        raise ValueError(f"unknown weight family {kind!r}; expected one of {FAMILY_KINDS}")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ValueError(f"{kind} weight with {params} is not finite and positive on the grid")
    if cutoff is not None:
        values = np.where(x < float(cutoff), values, 0.0)
    return Weight(grid, values, None if cutoff is None else float(cutoff))
