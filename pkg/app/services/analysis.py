import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from app.config import STOP_MULTIPLIER
from app.exceptions import ConvergenceError, DegenerateMeasureError
from app.models.grid import DyadicInterval, Grid, Lattice
from app.models.operator import OperatorMatrix
from app.models.weight import MeasurePair
from app.services.operators import cell_range, poisson_average, spectral_norm

logger = logging.getLogger(__name__)


def _prefix(values: np.ndarray) -> np.ndarray:
    return np.concatenate(([0.0], np.cumsum(values)))


def _span(I) -> tuple[int, int]:
    return I.span() if isinstance(I, DyadicInterval) else (int(I[0]), int(I[1]))


# ---------------- disbalanced Haar projections ----------------

def haar_project(f: np.ndarray, I: DyadicInterval, lam: np.ndarray) -> np.ndarray:
    """Δ_I^λ f: the λ-mean of f on each child minus its λ-mean on I, zero elsewhere.

    Zero map when λ vanishes on a child.
    """
    f = np.asarray(f, dtype=float)
    lam = np.asarray(lam, dtype=float)
    lower, upper = I.halves()
    out = np.zeros(f.size)
    m_lower, m_upper = lam[lower.cells].sum(), lam[upper.cells].sum()
    if m_lower <= 0 or m_upper <= 0:
        logger.debug("degenerate Haar projection on %s", I)
        return out
    s_lower, s_upper = f[lower.cells] @ lam[lower.cells], f[upper.cells] @ lam[upper.cells]
    mean = (s_lower + s_upper) / (m_lower + m_upper)
    out[lower.cells] = s_lower / m_lower - mean
    out[upper.cells] = s_upper / m_upper - mean
    return out


class HaarSystem:
    """Haar projections Δ_I^λ for the lattice intervals (≥ 2 cells) inside [lo, hi)."""

    def __init__(self, measure: np.ndarray, grid: Grid, shift: int = 0, lo: int = 0, hi: int | None = None):
        self.measure = np.asarray(measure, dtype=float)
        self.grid = grid
        self.lattice = Lattice(grid, shift)
        self.lo, self.hi = cell_range(grid.n, (lo, grid.n if hi is None else hi))
        starts, sizes = [], []
        for level in range(1, grid.m + 1):
            s = self.lattice.starts(level, self.lo, self.hi)
            starts.append(s)
            sizes.append(np.full(s.size, 2 ** level))
        self.starts = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
        self.sizes = np.concatenate(sizes) if sizes else np.zeros(0, dtype=np.int64)
        self.coefficients: dict[DyadicInterval, float] = {}

    def project(self, f: np.ndarray, I: DyadicInterval) -> np.ndarray:
        return haar_project(f, I, self.measure)

    def degenerate(self, I: DyadicInterval) -> bool:
        lower, upper = I.halves()
        return self.measure[lower.cells].sum() <= 0 or self.measure[upper.cells].sum() <= 0

    def energies(self, f: np.ndarray) -> np.ndarray:
        """‖Δ_I^λ f‖²_λ for every interval of the system, aligned with self.starts."""
        f = np.asarray(f, dtype=float)
        F = _prefix(f * self.measure)
        L = _prefix(self.measure)
        mids, stops = self.starts + self.sizes // 2, self.starts + self.sizes
        m_lower, m_upper = L[mids] - L[self.starts], L[stops] - L[mids]
        s_lower, s_upper = F[mids] - F[self.starts], F[stops] - F[mids]
        ok = (m_lower > 0) & (m_upper > 0)
        out = np.zeros(self.starts.size)
        ml, mu_, sl, su = m_lower[ok], m_upper[ok], s_lower[ok], s_upper[ok]
        mean = (sl + su) / (ml + mu_)
        out[ok] = ml * (sl / ml - mean) ** 2 + mu_ * (su / mu_ - mean) ** 2
        return out

    def decompose(self, f: np.ndarray) -> dict[DyadicInterval, float]:
        energies = self.energies(f)
        self.coefficients = {
            self.lattice.interval_at(int(np.log2(z)), int(s)): float(e)
            for s, z, e in zip(self.starts, self.sizes, energies)
        }
        return self.coefficients

    def energy_within(self, energies: np.ndarray, start: int, stop: int) -> float:
        """Σ ‖Δ_J f‖² over the system's intervals J ⊆ [start, stop)."""
        inside = (self.starts >= start) & (self.starts + self.sizes <= stop)
        return float(energies[inside].sum())

    def parseval_check(self, f: np.ndarray, I0: DyadicInterval) -> tuple[float, float]:
        """(‖f − ⟨f⟩_{λ,I0}‖²_λ on I0, Σ_{I ⊆ I0} ‖Δ_I f‖²_λ)."""
        a, b = I0.span()
        f = np.asarray(f, dtype=float)
        lam = self.measure[a:b]
        if lam.sum() <= 0:
            raise DegenerateMeasureError(f"measure vanishes on {I0}")
        mean = f[a:b] @ lam / lam.sum()
        lhs = float(((f[a:b] - mean) ** 2) @ lam)
        return lhs, self.energy_within(self.energies(f), a, b)


def mean_split(f: np.ndarray, lam: np.ndarray, I0) -> tuple[np.ndarray, np.ndarray]:
    """f1 = ⟨f⟩_{λ,I0} χ_{I0}, f2 = f − f1."""
    f = np.asarray(f, dtype=float)
    lam = np.asarray(lam, dtype=float)
    a, b = cell_range(f.size, I0)
    mass = lam[a:b].sum()
    if mass <= 0:
        raise DegenerateMeasureError(f"measure vanishes on [{a}, {b})")
    f1 = np.zeros(f.size)
    f1[a:b] = f[a:b] @ lam[a:b] / mass
    return f1, f - f1


# ---------------- pivotal condition ----------------

def _lower_poisson(lower_start: int, starts: np.ndarray, sizes: np.ndarray, mu: np.ndarray, grid: Grid, eps: float) -> np.ndarray:
    """𝒫_Q(χ_{[lower_start, Q.start)} dμ) for each Q = [start, start+size)."""
    if starts.size == 0:
        return np.zeros(0)
    reach = int(starts.max())
    if reach <= lower_start:
        return np.zeros(starts.size)
    cw = grid.cell_width
    x = grid.midpoints[lower_start:reach]
    centers = grid.position(starts + sizes / 2)[:, None]
    lengths = (sizes * cw)[:, None]
    kernel = lengths ** eps / (lengths + np.abs(centers - x[None, :])) ** (1 + eps)
    kernel *= np.arange(lower_start, reach)[None, :] < starts[:, None]
    return kernel @ mu[lower_start:reach]


def pivotal_ratio(I, family, mp: MeasurePair, eps: float) -> float:
    """Σ_α [𝒫_{I_α}(χ_{𝓛(I∖I_α)} dμ)]² ν(I_α) / μ(I) for a disjoint family inside I."""
    a, b = _span(I)
    mu_I = mp.mu[a:b].sum()
    if mu_I <= 0:
        raise DegenerateMeasureError(f"μ vanishes on [{a}, {b})")
    spans = sorted(_span(J) for J in family)
    for (s0, t0), (s1, t1) in zip(spans, spans[1:]):
        if s1 < t0:
            raise ValueError(f"family members [{s0}, {t0}) and [{s1}, {t1}) overlap")
    if not spans:
        return 0.0
    for s, t in spans:
        if not (a <= s < t <= b):
            raise ValueError(f"[{s}, {t}) is not inside [{a}, {b})")
    starts = np.array([s for s, _ in spans])
    sizes = np.array([t - s for s, t in spans])
    P = _lower_poisson(a, starts, sizes, mp.mu, mp.grid, eps)
    N = _prefix(mp.nu)
    return float(np.sum(P ** 2 * (N[starts + sizes] - N[starts])) / mu_I)


def _subtree_terms(I: DyadicInterval, mp: MeasurePair, eps: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level (coarsest first): starts and pivotal terms [𝒫_Q(χ_{𝓛(I∖Q)}dμ)]² ν(Q) of Q ⊆ I."""
    lattice = Lattice(mp.grid, I.shift)
    N = _prefix(mp.nu)
    out = []
    for level in range(I.level, -1, -1):
        starts = lattice.starts(level, I.start, I.stop)
        sizes = np.full(starts.size, 2 ** level)
        P = _lower_poisson(I.start, starts, sizes, mp.mu, mp.grid, eps)
        out.append((starts, P ** 2 * (N[starts + sizes] - N[starts])))
    return out


def pivotal_sup(I: DyadicInterval, mp: MeasurePair, eps: float) -> float:
    """Exact sup of pivotal_ratio over disjoint dyadic families inside I (tree dynamic programming)."""
    mu_I = mp.mu[I.cells].sum()
    if mu_I <= 0:
        raise DegenerateMeasureError(f"μ vanishes on {I}")
    levels = _subtree_terms(I, mp, eps)
    best = levels[-1][1]
    for _, terms in reversed(levels[:-1]):
        best = np.maximum(terms, best[0::2] + best[1::2])
    return float(best[0] / mu_I)


def pivotal_constant(mp: MeasurePair, eps: float, shift: int = 0) -> float:
    """sup over dyadic I ⊆ ℍ of pivotal_sup: the measured constant K of the stopping rule."""
    lattice = Lattice(mp.grid, shift)
    K = 0.0
    for I in lattice.all_intervals(0, mp.support_cells, min_level=1):
        if mp.mu[I.cells].sum() > 0:
            K = max(K, pivotal_sup(I, mp, eps))
    return K


# ---------------- stopping trees ----------------

def stopping_children(S: DyadicInterval, K: float, mp: MeasurePair, eps: float, multiplier: float = STOP_MULTIPLIER) -> list[DyadicInterval]:
    """Maximal dyadic Q ⊊ S with [𝒫_Q(χ_{𝓛(S∖Q)}dμ)]² ν(Q) ≥ multiplier·K·μ(Q) and μ(Q) > 0."""
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    lattice = Lattice(mp.grid, S.shift)
    M = _prefix(mp.mu)
    covered = np.zeros(mp.grid.n, dtype=bool)
    selected = []
    for level, (starts, terms) in zip(range(S.level, -1, -1), _subtree_terms(S, mp, eps)):
        if level == S.level:
            continue
        mass = M[starts + 2 ** level] - M[starts]
        hit = (mass > 0) & (terms >= multiplier * K * mass) & ~covered[starts]
        for s in starts[hit]:
            selected.append(lattice.interval_at(level, int(s)))
            covered[s : s + 2 ** level] = True
    return sorted(selected, key=lambda Q: Q.start)


@dataclass
class SparseTree:
    root: DyadicInterval
    K: float
    stopping_constant: float
    mu: np.ndarray
    parent: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    stopping_value: dict = field(default_factory=dict)
    _children: dict = field(default_factory=dict, repr=False)

    @property
    def nodes(self) -> list[DyadicInterval]:
        return sorted(self.generation, key=lambda S: (self.generation[S], S.start))

    def children(self, S: DyadicInterval) -> list[DyadicInterval]:
        return self._children.get(S, [])

    def mass(self, S: DyadicInterval) -> float:
        return float(self.mu[S.cells].sum())

    def tree_distance(self, S_prime: DyadicInterval, S: DyadicInterval) -> int:
        """Length of the parent chain from S′ up to S."""
        steps, node = 0, S_prime
        while node != S:
            node = self.parent.get(node)
            if node is None:
                raise ValueError(f"{S} is not an ancestor of {S_prime} in the tree")
            steps += 1
        return steps

    def descendants_at(self, S: DyadicInterval, j: int) -> list[DyadicInterval]:
        layer = [S]
        for _ in range(j):
            layer = [c for node in layer for c in self.children(node)]
            if not layer:
                break
        return layer

    def sparse_ratio(self) -> float:
        """max over nodes of Σ_{children} μ / μ(S)."""
        worst = 0.0
        for S in self.nodes:
            kids = self.children(S)
            if kids:
                worst = max(worst, sum(self.mass(Q) for Q in kids) / self.mass(S))
        return worst

    def packing_ratio(self) -> float:
        """max over nodes I of Σ_{Q ⊆ I} μ(Q) / μ(I)."""
        nodes = self.nodes
        worst = 0.0
        for I in nodes:
            total = sum(self.mass(Q) for Q in nodes if I.contains(Q))
            worst = max(worst, total / self.mass(I))
        return worst

    def check_sparse(self) -> bool:
        return self.sparse_ratio() <= 0.5 * (1 + 1e-12)

    def check_packing(self) -> bool:
        return self.packing_ratio() <= 2 * (1 + 1e-12)

    def to_json(self) -> list[dict]:
        return [
            {
                "start": S.start,
                "stop": S.stop,
                "level": S.level,
                "index": S.index,
                "parent": None if self.parent.get(S) is None else [self.parent[S].start, self.parent[S].stop],
                "generation": self.generation[S],
                "stopping_value": self.stopping_value.get(S),
            }
            for S in self.nodes
        ]


def build_sparse(I0: DyadicInterval, K: float, mp: MeasurePair, eps: float, multiplier: float = STOP_MULTIPLIER) -> SparseTree:
    """Iterate stopping_children from I0 until no node has children."""
    tree = SparseTree(root=I0, K=K, stopping_constant=multiplier * K, mu=mp.mu)
    tree.parent[I0] = None
    tree.generation[I0] = 0
    M = _prefix(mp.mu)
    queue = deque([I0])
    while queue:
        S = queue.popleft()
        if tree.generation[S] > mp.grid.m + 1:
            raise ConvergenceError(f"stopping tree deeper than the grid at {S}")
        kids = stopping_children(S, K, mp, eps, multiplier)
        tree._children[S] = kids
        if kids:
            starts = np.array([Q.start for Q in kids])
            sizes = np.array([Q.size for Q in kids])
            terms = _lower_poisson(S.start, starts, sizes, mp.mu, mp.grid, eps) ** 2
            terms *= np.array([mp.nu[Q.cells].sum() for Q in kids])
        for i, Q in enumerate(kids):
            tree.parent[Q] = S
            tree.generation[Q] = tree.generation[S] + 1
            tree.stopping_value[Q] = float(terms[i] / (M[Q.stop] - M[Q.start]))
            queue.append(Q)
    logger.info("sparse tree from %s: %d nodes, depth %d", I0, len(tree.generation), max(tree.generation.values()))
    return tree


# ---------------- averaging lemma ----------------

def _avg_matrix(k: int, n: int, mp: MeasurePair, eps: float, mirrored: bool, shift: int = 0):
    if n < 0 or k - n < 0:
        raise ValueError(f"need 0 <= n <= k, got k={k}, n={n}")
    grid = mp.grid
    lattice = Lattice(grid, shift)
    J_starts = lattice.starts(k)
    I_starts = lattice.starts(k - n)
    size_j, size_i = 2 ** k, 2 ** (k - n)
    cw = grid.cell_width
    l_j = size_j * cw
    J0, J1 = J_starts[:, None], (J_starts + size_j)[:, None]
    I0, I1 = I_starts[None, :], (I_starts + size_i)[None, :]
    if mirrored:
        order = J1 <= I0
        dist = (I0 - J1) * cw
    else:
        order = I1 <= J0
        dist = (J0 - I1) * cw
    W = np.where(order, l_j ** eps / (np.maximum(dist, 0) + l_j) ** (1 + eps), 0.0)
    M, N = _prefix(mp.mu), _prefix(mp.nu)
    mu_I = M[I_starts + size_i] - M[I_starts]
    nu_J = N[J_starts + size_j] - N[J_starts]
    return W, mu_I, nu_J, I_starts


def lemma_avg_ratio(k: int, n: int, a, mp: MeasurePair, eps: float, mirrored: bool = False) -> float:
    """Σ_J ν(J) (Σ_{I<J} μ(I)^{1/2} ℓ(J)^ε/(dist(I,J)+ℓ(J))^{1+ε} a_I)² / Σ a_I².

    ℓ(J) = 2^k cells, ℓ(I) = 2^{k−n} cells. `a` is an array aligned with the level-(k−n)
    intervals or a map DyadicInterval → value. `mirrored` sums over I above J instead.
    """
    W, mu_I, nu_J, I_starts = _avg_matrix(k, n, mp, eps, mirrored)
    if isinstance(a, dict):
        size = 2 ** (k - n)
        lookup = {I.start: v for I, v in a.items() if I.size == size}
        a = np.array([lookup.get(int(s), 0.0) for s in I_starts])
    a = np.asarray(a, dtype=float)
    if a.shape != I_starts.shape:
        raise ValueError(f"coefficients need shape {I_starts.shape}, got {a.shape}")
    total = float(a @ a)
    if total == 0:
        raise ValueError("coefficients are identically zero")
    b = W @ (np.sqrt(mu_I) * a)
    return float(nu_J @ b ** 2) / total


def lemma_avg_sup(k: int, n: int, mp: MeasurePair, eps: float, mirrored: bool = False) -> float:
    """sup over a of lemma_avg_ratio: the squared norm of diag(√ν_J) W diag(√μ_I)."""
    W, mu_I, nu_J, _ = _avg_matrix(k, n, mp, eps, mirrored)
    return spectral_norm(np.sqrt(nu_J)[:, None] * W * np.sqrt(mu_I)[None, :]) ** 2


# ---------------- Carleson coefficients ----------------

def _mu_operator(T: OperatorMatrix, mu: np.ndarray) -> OperatorMatrix:
    if T.flavor == "mu_weighted":
        return T
    return OperatorMatrix(T.entries * (mu / T.grid.cell_width)[None, :], T.grid, T.band, "mu_weighted", T.direction)


def carleson_a(S: DyadicInterval, j: int, T: OperatorMatrix, tree: SparseTree, haar_nu: HaarSystem) -> float:
    """a_S^j = Σ_{S′ ⊆ S, r(S′,S)=j} ‖P_{ν,𝒟(S′)} T_μ χ_{Ŝ∖S}‖²_ν."""
    parent = tree.parent.get(S, "missing")
    if parent == "missing":
        raise ValueError(f"{S} is not a node of the tree")
    if parent is None:
        raise ValueError("the root has no parent in the tree")
    T_mu = _mu_operator(T, tree.mu)
    indicator = np.zeros(T.n)
    indicator[parent.cells] = 1.0
    indicator[S.cells] = 0.0
    energies = haar_nu.energies(T_mu.apply(indicator))
    return sum(haar_nu.energy_within(energies, D.start, D.stop) for D in tree.descendants_at(S, j) if tree.tree_distance(D, S) == j)


def carleson_sum(I: DyadicInterval, j: int, T: OperatorMatrix, tree: SparseTree, haar_nu: HaarSystem) -> float:
    """Σ a_S^j over tree nodes S whose dyadic father lies inside I."""
    return sum(
        carleson_a(S, j, T, tree, haar_nu)
        for S in tree.nodes
        if tree.parent.get(S) is not None and I.contains(S.parent())
    )


def carleson_ratio(I: DyadicInterval, j: int, T: OperatorMatrix, tree: SparseTree, haar_nu: HaarSystem, eps: float) -> float:
    """carleson_sum / (2^{−jε} K μ(I))."""
    return carleson_sum(I, j, T, tree, haar_nu) / (2 ** (-j * eps) * tree.K * tree.mass(I))


def poisson_decay_ratio(S: DyadicInterval, I: DyadicInterval, J: DyadicInterval, T: OperatorMatrix, mp: MeasurePair, g: np.ndarray, eps: float) -> float:
    """|⟨T_μ χ_{S∖I}, Δ_J^ν g⟩_ν| / (ν(J)^{1/2} ‖Δ_J^ν g‖_ν (ℓ(J)/ℓ(I))^{ε/2} 𝒫_{I_in}(χ_{𝓛(S∖I)}dμ))."""
    if not (S.contains(I) and I.contains(J) and J.level < I.level):
        raise ValueError("need J ⊊ I ⊆ S")
    T_mu = _mu_operator(T, mp.mu)
    indicator = np.zeros(T.n)
    indicator[S.cells] = 1.0
    indicator[I.cells] = 0.0
    delta = haar_project(g, J, mp.nu)
    lhs = abs(float(np.sum(mp.nu * T_mu.apply(indicator) * delta)))
    inner = next(child for child in I.halves() if child.contains(J))
    lower = np.zeros(mp.grid.n)
    lower[S.start : I.start] = mp.mu[S.start : I.start]
    P = poisson_average(inner, lower, eps, mp.grid)
    norm_delta = float(np.sqrt(mp.nu @ delta ** 2))
    rhs = np.sqrt(mp.nu[J.cells].sum()) * norm_delta * (J.size / I.size) ** (eps / 2) * P
    if lhs <= 1e-14 * max(1.0, rhs):
        return 0.0
    return float(lhs / rhs) if rhs > 0 else float("inf")
