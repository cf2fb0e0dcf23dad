import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app.config import RUBIO_TERMS
from app.exceptions import ConvergenceError, WeightError
from app.models.operator import OperatorMatrix
from app.models.weight import Weight
from app.schemas.reports import (
    CZInvariantReport,
    ExtrapolationReport,
    RubioReport,
    TwoWeightInstance,
    TwoWeightMaximalReport,
    Weak11Instance,
    Weak11Report,
)
from app.services.operators import cell_range, level_set_components, max_down, max_up, maximal_norm_estimate
from app.services.weights import a1_up_local_characteristic, ap_up_characteristic

logger = logging.getLogger(__name__)

_TOL = 1e-12


def _distribution_sup(values: np.ndarray, masses: np.ndarray) -> float:
    """sup_λ λ·mass({values > λ}): max over the decreasing rearrangement of v_k · Σ_{i≤k} m_i."""
    if values.size == 0:
        return 0.0
    order = np.argsort(-values, kind="stable")
    return float(np.max(values[order] * np.cumsum(masses[order])))


# ---------------- Calderón–Zygmund decomposition ----------------

@dataclass
class CZDecomposition:
    """f = g + h at height λ on I0; intervals are cell ranges [start, stop)."""

    f: np.ndarray
    lam: float
    I0: tuple[int, int]
    omega_intervals: list[tuple[int, int]]
    extended: list[tuple[int, int]]
    g: np.ndarray
    h: np.ndarray
    h_parts: list[np.ndarray] = field(default_factory=list)

    @property
    def omega_tilde(self) -> list[tuple[int, int]]:
        """I_j ∪ I_j⁺ for every component."""
        return [(s, d) for (s, _), (_, d) in zip(self.omega_intervals, self.extended)]

    def omega_tilde_mask(self) -> np.ndarray:
        mask = np.zeros(self.f.size, dtype=bool)
        for s, d in self.omega_tilde:
            mask[s:d] = True
        return mask

    def check_invariants(self) -> CZInvariantReport:
        """Component averages, g ≤ λ, mean-zero h_j, the L¹ bound and f = g + h.

        Components ending before b0 have λ < ⟨f⟩ ≤ λ + ‖f‖_∞/|I_j|; those reaching b0
        only ⟨f⟩ > λ. g equals f off Ω and the component average on Ω.
        """
        _, b0 = self.I0
        sup_f = float(np.max(self.f)) if self.f.size else 0.0
        averages_ok, g_bounded = True, bool(np.all(self.g[~self._omega_mask()] <= self.lam * (1 + _TOL)))
        worst_excess = 0.0
        for s, t in self.omega_intervals:
            avg = float(np.mean(self.f[s:t]))
            excess = avg - self.lam
            if avg < self.lam * (1 - _TOL):
                averages_ok = False
            if t < b0:
                slack = sup_f / (t - s)
                worst_excess = max(worst_excess, excess / slack if slack > 0 else 0.0)
                if excess > slack * (1 + _TOL):
                    averages_ok = False
                    g_bounded = False
        scale = max(1.0, float(np.abs(self.f).sum()))
        h_mean_zero = all(abs(float(part.sum())) <= 1e-10 * scale for part in self.h_parts)
        l1_f = float(np.abs(self.f).sum())
        l1_h = float(sum(np.abs(part).sum() for part in self.h_parts))
        ratio = l1_h / l1_f if l1_f > 0 else 0.0
        return CZInvariantReport(
            components=len(self.omega_intervals),
            averages_ok=averages_ok,
            max_average_excess=worst_excess,
            g_bounded=g_bounded,
            h_mean_zero=h_mean_zero,
            h_l1_ratio=ratio,
            h_l1_ok=ratio <= 2 * (1 + _TOL),
            reconstructs=bool(np.allclose(self.g + self.h, self.f, rtol=1e-12, atol=1e-12 * scale)),
        )

    def _omega_mask(self) -> np.ndarray:
        mask = np.zeros(self.f.size, dtype=bool)
        for s, t in self.omega_intervals:
            mask[s:t] = True
        return mask


def _check_nonnegative_in(f: np.ndarray, I0) -> tuple[np.ndarray, int, int]:
    f = np.asarray(f, dtype=float)
    a0, b0 = cell_range(f.size, I0)
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite")
    if np.any(f < 0):
        raise ValueError("f must be nonnegative")
    if np.any(f[:a0]) or np.any(f[b0:]):
        raise ValueError(f"f must be supported in I0=[{a0}, {b0})")
    return f, a0, b0


def maximal_level_set(f: np.ndarray, lam: float, I0=None) -> list[tuple[int, int]]:
    """Maximal runs of cells of I0 where M↑_{I0} f > λ."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return level_set_components(max_up(f, I0), lam)


def cz_split(f: np.ndarray, lam: float, I0=None) -> CZDecomposition:
    f, a0, b0 = _check_nonnegative_in(f, I0)
    intervals = maximal_level_set(f, lam, (a0, b0))
    g = f.copy()
    h = np.zeros(f.size)
    parts, extended = [], []
    for s, t in intervals:
        avg = float(np.mean(f[s:t]))
        part = np.zeros(f.size)
        part[s:t] = f[s:t] - avg
        g[s:t] = avg
        h += part
        parts.append(part)
        extended.append((t, min(b0, t + 2 * (t - s))))
    logger.debug("CZ split at λ=%.4g: %d components", lam, len(intervals))
    return CZDecomposition(f, float(lam), (a0, b0), intervals, extended, g, h, parts)


def causal_tail_ratio(T: OperatorMatrix, cz: CZDecomposition, eps: float) -> float:
    """max over components j and cells x ∈ I0∖Ω̃ beyond d_j of

    |T h_j(x)| / ∫_{I_j} |y − b_j|^ε / |x − b_j|^{1+ε} |h_j(y)| dy.
    """
    grid = T.grid
    cw = grid.cell_width
    x_all = grid.midpoints
    outside = ~cz.omega_tilde_mask()
    _, b0 = cz.I0
    worst = 0.0
    for (s, t), (_, d), part in zip(cz.omega_intervals, cz.extended, cz.h_parts):
        cells = np.flatnonzero(outside[d:b0]) + d
        if cells.size == 0:
            continue
        b = grid.position(t)
        y = x_all[s:t]
        lhs = np.abs(T.entries[cells][:, s:t] @ part[s:t])
        dist = np.abs(x_all[cells] - b)
        rhs = (np.abs(y - b) ** eps * np.abs(part[s:t])).sum() * cw / dist ** (1 + eps)
        active = rhs > 0
        if np.any(active):
            worst = max(worst, float(np.max(lhs[active] / rhs[active])))
    return worst


# ---------------- weak (1,1) experiment ----------------

def weak11_experiment(T: OperatorMatrix, w: Weight, f_corpus: list[tuple[str, np.ndarray, float]], I0=None) -> Weak11Report:
    """Weak (1,1) ratios of T_{I0} on L¹(w, I0) with the Ω̃ / E₁ / E₂ pieces at each (f, λ)."""
    a0, b0 = cell_range(w.grid.n, I0)
    if b0 > w.support_cells:
        raise WeightError(f"I0=[{a0}, {b0}) leaves the support of the weight")
    a1 = a1_up_local_characteristic(w, (a0, b0))
    cw = w.grid.cell_width
    wv = w.values
    Mw = max_down(wv, (a0, b0))

    def mass(mask):
        return float(wv[a0:b0][mask].sum() * cw)

    instances = []
    for f_id, f, lam in f_corpus:
        f, _, _ = _check_nonnegative_in(f, (a0, b0))
        norm_f = float(f[a0:b0] @ wv[a0:b0]) * cw
        if norm_f == 0:
            continue
        Tf = np.abs(T.apply(f))[a0:b0]
        weak_sup = _distribution_sup(Tf, wv[a0:b0] * cw) / norm_f

        cz = cz_split(f, lam, (a0, b0))
        tilde = cz.omega_tilde_mask()[a0:b0]
        Tg = np.abs(T.apply(cz.g))[a0:b0]
        Th = np.abs(T.apply(cz.h))[a0:b0]
        level = Tf > lam
        e1 = ~tilde & (Th > lam / 2)
        e2 = ~tilde & (Tg > lam / 2)
        extended_ok = True
        for (s, t), (_, d) in zip(cz.omega_intervals, cz.extended):
            upper = float(wv[t:d].sum())
            if np.any(upper > 3 * (t - s) * Mw[s:t] * (1 + _TOL)):
                extended_ok = False

        omega_tilde_mass = mass(tilde)
        instances.append(
            Weak11Instance(
                f_id=f_id,
                lam=float(lam),
                weak_ratio=weak_sup,
                omega_tilde_mass=omega_tilde_mass,
                e1_mass=mass(e1),
                e2_mass=mass(e2),
                level_set_mass=mass(level),
                split_covers=bool(np.all(~level | tilde | e1 | e2)),
                omega_tilde_ratio=omega_tilde_mass * lam / (a1 * norm_f),
                extended_check=extended_ok,
            )
        )
    max_weak = max((i.weak_ratio for i in instances), default=0.0)
    return Weak11Report(
        a1_characteristic=a1,
        instances=instances,
        max_weak_ratio=max_weak,
        normalized_ratio=max_weak / (a1 * math.log(math.e + a1)),
        max_omega_tilde_ratio=max((i.omega_tilde_ratio for i in instances), default=0.0),
        all_extended_checks=all(i.extended_check for i in instances),
        all_splits_cover=all(i.split_covers for i in instances),
    )


# ---------------- Rubio de Francia ----------------

def _reflected(w: Weight) -> Weight:
    """w on ℍ read backwards, same support: turns M↓ questions into M↑ ones."""
    values = np.zeros(w.grid.n)
    values[: w.support_cells] = w.positive[::-1]
    return Weight(w.grid, values, w.cutoff)


def rubio_operator(h: np.ndarray, w: Weight) -> np.ndarray:
    """Sh = w⁻¹ M↓(|h| w) on ℍ, zero above."""
    k = w.support_cells
    out = np.zeros(w.grid.n)
    out[:k] = max_down(np.abs(h) * w.values, (0, k))[:k] / w.positive
    return out


def rubio_constant(w: Weight, characteristic: float | None = None) -> float:
    """max(1, ‖M↓‖_{L²(w⁻¹)} / [w]_{A2↑}) with the norm estimated from below."""
    characteristic = characteristic or ap_up_characteristic(w, 2)
    return max(1.0, maximal_norm_estimate(_reflected(w.inverse())) / characteristic)


def rubio_de_francia(h: np.ndarray, w: Weight, terms: int = RUBIO_TERMS, C: float | None = None) -> tuple[np.ndarray, RubioReport]:
    """Rh = Σ_{k<terms} S^k h / (2C[w])^k with the geometric tail reported alongside."""
    if terms < 1:
        raise ValueError(f"terms must be >= 1, got {terms}")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("h must be nonnegative")
    char = ap_up_characteristic(w, 2)
    C = rubio_constant(w, char) if C is None else C
    denom = 2 * C * char
    cw = w.grid.cell_width
    k = w.support_cells

    def norm(u):
        return math.sqrt(float(u[:k] ** 2 @ w.positive) * cw)

    term = np.zeros(w.grid.n)
    term[:k] = h[:k]
    Rh = np.zeros(w.grid.n)
    norms = []
    for _ in range(terms):
        Rh += term
        norms.append(norm(term))
        term = rubio_operator(term, w) / denom
    # `term` now holds the first omitted summand
    norms.append(norm(term))

    ratios = [b / a for a, b in zip(norms, norms[1:]) if a > 0]
    tail_ratios = ratios[len(ratios) // 2 :]
    q = max(tail_ratios, default=0.0)
    if q >= 1:
        raise ConvergenceError(f"Rubio de Francia terms do not decay (ratio {q:.4g}); C={C:.4g} is too small")
    h_norm = norm(h)
    tail = norms[-1] / (1 - q) / h_norm if h_norm > 0 else 0.0

    positive = Rh[:k] > 0
    S_Rh = rubio_operator(Rh, w)[:k]
    a1_ratio = float(np.max(S_Rh[positive] / Rh[:k][positive])) if np.any(positive) else 0.0
    a1_bound = denom * (1 + (float(np.max(term[:k][positive] / Rh[:k][positive])) if np.any(positive) else 0.0))
    report = RubioReport(
        C=C,
        characteristic=char,
        terms=terms,
        norm_ratio=norm(Rh) / h_norm if h_norm > 0 else 0.0,
        tail_bound=tail,
        a1_ratio=a1_ratio,
        a1_bound=a1_bound,
    )
    return Rh, report


def rubio_with_backoff(h: np.ndarray, w: Weight, terms: int = RUBIO_TERMS, attempts: int = 5) -> tuple[np.ndarray, RubioReport]:
    """rubio_de_francia, doubling C each time the terms fail to decay."""
    C = None
    for _ in range(attempts):
        try:
            return rubio_de_francia(h, w, terms, C)
        except ConvergenceError as e:
            C = 2 * (C or rubio_constant(w))
            logger.warning("%s; retrying with C=%.4g", e.detail, C)
    raise ConvergenceError(f"Rubio de Francia series still diverging after {attempts} attempts (C={C:.4g})")


def extrapolation_check(
    T: OperatorMatrix,
    w: Weight,
    f_corpus: list[np.ndarray],
    h_corpus: list[np.ndarray],
    terms: int = RUBIO_TERMS,
    C: float | None = None,
) -> ExtrapolationReport:
    """The A₂ → A₁ extrapolation chain through u = w·Rh for unit f, h in L²(w)."""
    char = ap_up_characteristic(w, 2)
    C = rubio_constant(w, char) if C is None else C
    cw = w.grid.cell_width
    k = w.support_cells

    def unit(u):
        u = np.zeros(w.grid.n) + np.abs(np.asarray(u, dtype=float))
        u[k:] = 0.0
        n2 = math.sqrt(float(u[:k] ** 2 @ w.positive) * cw)
        if n2 == 0:
            raise ValueError("corpus function vanishes on the support")
        return u / n2

    a1s, l1s, weak = [], [], []
    cs_ok = majorant_ok = True
    for h in h_corpus:
        h = unit(h)
        Rh, report = rubio_de_francia(h, w, terms, C)
        majorant_ok &= bool(np.all(Rh >= h - 1e-15))
        u = Weight.from_prefix(w.grid, w.values * Rh)
        a1s.append(a1_up_local_characteristic(u, (0, u.support_cells)))
        rh_norm = report.norm_ratio
        for f in f_corpus:
            f = unit(f)
            l1 = float(f @ u.values) * cw
            cs_ok &= l1 <= rh_norm * (1 + 1e-10)
            l1s.append(l1)
            if l1 > 0:
                Tf = np.abs(T.apply(f))[: u.support_cells]
                weak.append(_distribution_sup(Tf, u.positive * cw) / l1)
    return ExtrapolationReport(
        characteristic=char,
        rubio_a1_characteristics=a1s,
        a1_ratio=max(a1s, default=0.0) / char,
        l1_norms=l1s,
        max_l1_norm=max(l1s, default=0.0),
        max_weak_ratio=max(weak, default=0.0),
        cauchy_schwarz_holds=bool(cs_ok),
        majorant_holds=bool(majorant_ok),
    )


# ---------------- two-weight maximal estimate ----------------

def two_weight_constant(u: np.ndarray, v: np.ndarray, I0) -> float:
    """sup over I0 of M↓_{I0} u / v."""
    a0, b0 = I0
    if np.any(v[a0:b0] <= 0):
        raise WeightError("v must be positive on I0")
    return float(np.max(max_down(u, (a0, b0))[a0:b0] / v[a0:b0]))


def auxiliary_weight(u: np.ndarray, I: tuple[int, int], I0: tuple[int, int]) -> np.ndarray:
    """min_{a≤y≤x} M↓_{I0}(χ_I u)(y) for x in I = [a, b)."""
    a, b = I
    local = np.zeros(u.size)
    local[a:b] = u[a:b]
    return np.minimum.accumulate(max_down(local, I0)[a:b])


def two_weight_maximal_check(
    u: Weight,
    v: Weight,
    I0,
    f_corpus: list[tuple[str, np.ndarray, float]],
    direction: str = "up",
) -> TwoWeightMaximalReport:
    """Level sets of M↑_{I0} f against the decreasing auxiliary weights and sup M↓u/v.

    `direction="down"` checks the mirror image on the reversed grid.
    """
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    n = u.grid.n
    a0, b0 = cell_range(n, I0)
    uv, vv = u.values, v.values
    if direction == "down":
        uv, vv = uv[::-1], vv[::-1]
        a0, b0 = n - b0, n - a0
    C = two_weight_constant(uv, vv, (a0, b0))
    cw = u.grid.cell_width
    instances = []
    for f_id, f, lam in f_corpus:
        f = np.asarray(f, dtype=float)
        if direction == "down":
            f = f[::-1]
        f, _, _ = _check_nonnegative_in(f, (a0, b0))
        components = maximal_level_set(f, lam, (a0, b0))
        nonincreasing = mass_ok = averages_ok = abel_ok = True
        level_mass = 0.0
        for a, b in components:
            aux = auxiliary_weight(uv, (a, b), (a0, b0))
            nonincreasing &= bool(np.all(np.diff(aux) <= 0))
            u_I, aux_I = float(uv[a:b].sum()), float(aux.sum())
            mass_ok &= u_I <= aux_I * (1 + 1e-9)
            means = np.cumsum(f[a:b]) / np.arange(1, b - a + 1)
            averages_ok &= bool(np.all(means >= lam * (1 - _TOL)))
            abel_ok &= float(f[a:b] @ aux) >= lam * aux_I * (1 - 1e-10)
            level_mass += u_I * cw
        norm_f = float(f[a0:b0] @ vv[a0:b0]) * cw
        ratio = lam * level_mass / (C * norm_f) if norm_f > 0 and C > 0 else 0.0
        instances.append(
            TwoWeightInstance(
                f_id=f_id,
                lam=float(lam),
                components=len(components),
                nonincreasing=nonincreasing,
                mass_dominated=mass_ok,
                averages_hold=averages_ok,
                abel_holds=abel_ok,
                weak_ratio=ratio,
            )
        )
    return TwoWeightMaximalReport(
        direction=direction,
        two_weight_constant=C,
        instances=instances,
        all_pass=all(i.nonincreasing and i.mass_dominated and i.averages_hold and i.abel_holds for i in instances),
        max_weak_ratio=max((i.weak_ratio for i in instances), default=0.0),
    )


# ---------------- proof parameters ----------------

def proof_parameter_factor(characteristic: float, C: float = 1.0) -> float:
    """(p p′ (r′)^{1/p′})^p / log(e + [w]) with p = 1 + 1/log(e+[w]) and r = 1 + 1/(C[w])."""
    if characteristic < 1:
        raise ValueError(f"A1 characteristics are at least 1, got {characteristic}")
    log_term = math.log(math.e + characteristic)
    p = 1 + 1 / log_term
    p_conj = p / (p - 1)
    r_conj = 1 + C * characteristic
    return (p * p_conj * r_conj ** (1 / p_conj)) ** p / log_term


def proof_parameter_sweep(points: int = 1000, lo: float = 1.0, hi: float = 1e6, C: float = 1.0) -> float:
    """max of proof_parameter_factor over log-spaced characteristics in [lo, hi]."""
    return max(proof_parameter_factor(float(c), C) for c in np.geomspace(lo, hi, points))
