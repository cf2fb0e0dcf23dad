import logging
from collections import Counter

import numpy as np

from app.config import LATTICE_SHIFTS
from app.exceptions import SingularConfigurationError
from app.models.grid import DyadicInterval, Grid, Lattice, RegionTag

logger = logging.getLogger(__name__)


# ---------------- geometry ----------------

def halves(I: DyadicInterval) -> tuple[DyadicInterval, DyadicInterval]:
    return I.halves()


def delta_from_eps(eps: float, d: int = 1) -> float:
    """Goodness exponent δ = ε/(2(d+ε)), so that ε − δ(d+ε) = ε/2."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if d != 1:
        raise ValueError(f"only dimension d=1 is supported, got d={d}")
    return eps / (2 * (d + eps))


def interval_distance(I: DyadicInterval, J: DyadicInterval) -> int:
    """Distance in cells between the closed hulls of I and J."""
    return max(0, J.start - I.stop, I.start - J.stop)


def point_distance(p: float, J: DyadicInterval) -> float:
    return max(0.0, J.start - p, p - J.stop)


def boundary_distance(I: DyadicInterval, J: DyadicInterval) -> float:
    """dist(∂I, J) as the smaller distance of the two endpoints of I to J."""
    return min(point_distance(I.start, J), point_distance(I.stop, J))


def _nearest_point_distance(starts: np.ndarray, stops: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance from each closed hull [start, stop] to the nearest of the sorted points."""
    if points.size == 0:
        return np.full(starts.shape, np.inf)
    left = np.searchsorted(points, starts, side="right") - 1
    right = np.searchsorted(points, starts, side="left")
    d_left = np.where(left >= 0, starts - points[np.clip(left, 0, None)], np.inf)
    p_right = np.where(right < points.size, points[np.clip(right, None, points.size - 1)], np.inf)
    d_right = np.maximum(p_right - stops, 0)
    return np.minimum(d_left, d_right)


def lattice_shifts(grid: Grid, omegas=LATTICE_SHIFTS) -> tuple[int, ...]:
    """Cell shifts of the lattices with the given ω, duplicates dropped."""
    return tuple(sorted({Lattice.from_omega(grid, omega).shift for omega in omegas}))


def dyadic_spans(grid: Grid, lo: int = 0, hi: int | None = None, shifts=None, min_level: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Starts and sizes (cells) of every lattice interval inside [lo, hi), for each shift.

    `shifts` are cell shifts; None means the default lattices. Intervals shared by
    several shifted lattices are listed once.
    """
    hi = grid.n if hi is None else hi
    shifts = lattice_shifts(grid) if shifts is None else shifts
    seen = set()
    starts, sizes = [], []
    for shift in shifts:
        lattice = Lattice(grid, int(shift))
        for level in range(min_level, grid.m + 1):
            for s in lattice.starts(level, lo, hi):
                key = (int(s), 2 ** level)
                if key not in seen:
                    seen.add(key)
                    starts.append(key[0])
                    sizes.append(key[1])
    return np.array(starts, dtype=np.int64), np.array(sizes, dtype=np.int64)


# ---------------- goodness ----------------

def bad_mask(starts: np.ndarray, level: int, lattice: Lattice, r: int, delta: float) -> np.ndarray:
    """Badness of the level-`level` intervals with the given starts against `lattice`."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    starts = np.asarray(starts, dtype=float)
    stops = starts + 2 ** level
    bad = np.zeros(starts.shape, dtype=bool)
    size_j = 2.0 ** level
    for k in range(level + r, lattice.grid.m + 1):
        threshold = size_j ** delta * (2.0 ** k) ** (1 - delta)
        dist = _nearest_point_distance(starts, stops, lattice.boundary_points(k).astype(float))
        bad |= dist <= threshold
    return bad


def is_bad(J: DyadicInterval, lattice: Lattice, r: int, delta: float) -> bool:
    """J is r-bad if some I of `lattice` with ℓ(I) ≥ 2^r ℓ(J) has dist(∂I, J) ≤ ℓ(J)^δ ℓ(I)^{1−δ}.

    Scales run up to the ambient grid; lattice points outside [lo, hi] are ignored.
    """
    if not (0 <= J.start and J.stop <= lattice.grid.n):
        raise ValueError(f"{J} lies outside the grid")
    return bool(bad_mask(np.array([J.start]), J.level, lattice, r, delta)[0])


def bad_fraction(grid: Grid, level: int, rs: list[int], delta: float, samples: int, seed: int) -> dict[int, float]:
    """Monte-Carlo frequency of bad level-`level` intervals of the unshifted lattice.

    The same random shifts of the opposing lattice are used for every r.
    """
    rng = np.random.default_rng(seed)
    starts = Lattice(grid).starts(level)
    counts = {r: 0 for r in rs}
    for _ in range(samples):
        opposing = Lattice.from_omega(grid, rng.uniform(-0.25, 0.25))
        for r in rs:
            counts[r] += int(bad_mask(starts, level, opposing, r, delta).sum())
    total = samples * starts.size
    return {r: counts[r] / total for r in rs}


def good_estimate_check(I: DyadicInterval, J: DyadicInterval, x: float, eps: float, delta: float, grid: Grid) -> bool:
    """ℓ(J)^ε / dist(x,J)^{1+ε} ≤ (ℓ(J)/ℓ(I))^{ε/2} ℓ(I)^{−1} at the point x."""
    a, b = J.bounds(grid)
    dist = max(0.0, a - x, x - b)
    if dist == 0:
        raise SingularConfigurationError(f"x={x} touches {J}")
    l_i, l_j = I.length(grid), J.length(grid)
    lhs = l_j ** eps / dist ** (1 + eps)
    rhs = (l_j / l_i) ** (eps / 2) / l_i
    return lhs <= rhs * (1 + 1e-12)


def good_estimate_sweep(grid: Grid, lattice_j: Lattice, lattice_i: Lattice, r: int, eps: float) -> tuple[int, int]:
    """Check the good-interval estimate at both endpoints of every admissible pair.

    Returns (checked, failures). Only intervals I inside the grid are used.
    """
    delta = delta_from_eps(eps)
    checked = failures = 0
    for level_j in range(0, grid.m - r + 1):
        starts = lattice_j.starts(level_j)
        good = ~bad_mask(starts, level_j, lattice_i, r, delta)
        for start in starts[good]:
            J = lattice_j.interval_at(level_j, int(start))
            for level_i in range(level_j + r, grid.m + 1):
                for I in lattice_i.intervals(level_i):
                    for edge in (I.start, I.stop):
                        checked += 1
                        if not good_estimate_check(I, J, grid.position(edge), eps, delta, grid):
                            failures += 1
    logger.debug("good estimate sweep: %d checks, %d failures", checked, failures)
    return checked, failures


# ---------------- region splitting ----------------

def region_classify(I: DyadicInterval, J: DyadicInterval, r: int, good_J: bool, good_I: bool) -> RegionTag:
    """Tag the pair (I, J); I carries the input side, J the output side."""
    l_i, l_j = I.size, J.size
    if J.is_below(I):
        return RegionTag.JltI
    dist = interval_distance(I, J)
    scale = 2 ** r
    if l_j <= scale * l_i and l_i <= scale * l_j and dist <= l_i + l_j:
        return RegionTag.Diagonal
    if I.is_below(J):
        if dist >= l_i + l_j:
            return RegionTag.I1 if l_j <= l_i else RegionTag.I2
        if l_i >= scale * l_j:
            return RegionTag.I3 if good_J else RegionTag.IltJ
        return RegionTag.I4 if good_I else RegionTag.IltJ
    # in one dimension the remaining pairs overlap
    if l_i >= scale * l_j:
        return RegionTag.I5 if good_J else RegionTag.Bad
    return RegionTag.I6 if good_I else RegionTag.Bad


def _goodness(grid: Grid, lattice: Lattice, opposing: Lattice, r: int, delta: float) -> dict[tuple[int, int], bool]:
    """(level, start) -> goodness of every grid interval of `lattice` against `opposing`."""
    good = {}
    for level in range(grid.m + 1):
        starts = lattice.starts(level)
        for s, b in zip(starts, bad_mask(starts, level, opposing, r, delta)):
            good[(level, int(s))] = not b
    return good


def classify_all_pairs(grid: Grid, lattice_i: Lattice, lattice_j: Lattice, r: int, eps: float) -> Counter:
    """Tag counts over every pair of grid intervals from the two lattices."""
    delta = delta_from_eps(eps)
    goodness_i = _goodness(grid, lattice_i, lattice_j, r, delta)
    goodness_j = _goodness(grid, lattice_j, lattice_i, r, delta)
    tags = Counter()
    intervals_i = lattice_i.all_intervals()
    intervals_j = lattice_j.all_intervals()
    for I in intervals_i:
        for J in intervals_j:
            tag = region_classify(I, J, r, goodness_j[(J.level, J.start)], goodness_i[(I.level, I.start)])
            tags[tag] += 1
    return tags


def region_memberships(I: DyadicInterval, J: DyadicInterval, r: int, good_J: bool, good_I: bool) -> list[RegionTag]:
    """Every region whose defining condition (I, J) meets, each condition tested on its own."""
    l_i, l_j = I.size, J.size
    scale = 2 ** r
    dist = interval_distance(I, J)
    below = J.is_below(I)
    above = I.is_below(J)
    overlap = I.overlaps(J)
    near = not below and l_j <= scale * l_i and l_i <= scale * l_j and dist <= l_i + l_j
    far = dist >= l_i + l_j
    big_i = l_i >= scale * l_j
    side = above and not near
    nested = overlap and not near
    conditions = {
        RegionTag.JltI: below,
        RegionTag.Diagonal: near,
        RegionTag.I1: side and far and l_j <= l_i,
        RegionTag.I2: side and far and l_j > l_i,
        RegionTag.I3: side and not far and big_i and good_J,
        RegionTag.I4: side and not far and not big_i and good_I,
        RegionTag.IltJ: side and not far and ((big_i and not good_J) or (not big_i and not good_I)),
        RegionTag.I5: nested and big_i and good_J,
        RegionTag.I6: nested and not big_i and good_I,
        RegionTag.Bad: nested and ((big_i and not good_J) or (not big_i and not good_I)),
    }
    return [tag for tag, holds in conditions.items() if holds]


def region_partition_check(grid: Grid, lattice_i: Lattice, lattice_j: Lattice, r: int, eps: float) -> tuple[int, int]:
    """(pairs, failures): a failure is a pair outside exactly one region or tagged differently by region_classify."""
    delta = delta_from_eps(eps)
    goodness_i = _goodness(grid, lattice_i, lattice_j, r, delta)
    goodness_j = _goodness(grid, lattice_j, lattice_i, r, delta)
    pairs = failures = 0
    for I in lattice_i.all_intervals():
        for J in lattice_j.all_intervals():
            good_J, good_I = goodness_j[(J.level, J.start)], goodness_i[(I.level, I.start)]
            members = region_memberships(I, J, r, good_J, good_I)
            pairs += 1
            if members != [region_classify(I, J, r, good_J, good_I)]:
                failures += 1
                logger.debug("pair %s, %s lies in %s", I, J, members)
    return pairs, failures


def good_nested_pairs(grid: Grid, lattice_i: Lattice, lattice_j: Lattice, r: int, eps: float) -> list[tuple[DyadicInterval, DyadicInterval]]:
    """Pairs J ⊊ I tagged I5: J good against lattice_i, ℓ(I) > 2^r ℓ(J), J inside one half of I."""
    delta = delta_from_eps(eps)
    out = []
    for level_i in range(r + 1, grid.m + 1):
        for I in lattice_i.intervals(level_i):
            for level_j in range(0, level_i - r):
                starts = lattice_j.starts(level_j, I.start, I.stop)
                good = ~bad_mask(starts, level_j, lattice_i, r, delta)
                for s in starts[good]:
                    J = lattice_j.interval_at(level_j, int(s))
                    if region_classify(I, J, r, True, True) is RegionTag.I5 and any(h.contains(J) for h in I.halves()):
                        out.append((I, J))
    return out
