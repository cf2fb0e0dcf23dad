import hashlib
import json
import logging

import numpy as np

from app.models.grid import Grid
from app.models.weight import Weight
from app.services.operators import cell_range, max_up
from app.services.weights import family_generate

logger = logging.getLogger(__name__)

WeightSpec = tuple[str, str, dict, int]

# hand-picked members; random_dyadic seeds fill the rest
_FIXED: list[WeightSpec] = [
    ("constant", "power", {"a": 0.0}, 0),
    *[(f"power_{a:+.2f}", "power", {"a": a}, 0) for a in (-0.9, -0.6, -0.3, 0.3, 0.6, 0.9)],
    *[(f"exp_{b:+g}", "exp_monotone", {"beta": b}, 0) for b in (-8.0, -2.0, 2.0, 8.0)],
    *[(f"cutoff_{z:g}", "cutoff", {"z": z}, 0) for z in (0.5, 0.8)],
    ("cutoff_power", "cutoff", {"z": 0.75, "a": -0.5, "center": 0.0}, 0),
]


def corpus_specs(size: int = 100, betas=(2.0, 4.0, 8.0)) -> list[WeightSpec]:
    """Deterministic weight specs for a grid on [0, 1)."""
    specs = list(_FIXED[:size])
    seed = 0
    while len(specs) < size:
        beta = betas[seed % len(betas)]
        specs.append((f"random_dyadic_b{beta:g}_s{seed}", "random_dyadic", {"beta": beta}, seed))
        seed += 1
    return specs


def sparse_specs(per_beta: int = 3, betas=(2.0, 4.0, 8.0)) -> list[WeightSpec]:
    return [
        (f"random_dyadic_b{beta:g}_s{seed}", "random_dyadic", {"beta": beta}, seed)
        for beta in betas
        for seed in range(per_beta)
    ]


# exponents past 1 keep the characteristic spread over two decades on the sweep grids
def power_specs(exponents=(0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 1.25, 1.5, 2.0, 2.5)) -> list[WeightSpec]:
    return [(f"power_{a:.2f}", "power", {"a": a}, 0) for a in exponents]


def build_weights(specs: list[WeightSpec], grid: Grid) -> list[tuple[str, Weight]]:
    return [(weight_id, family_generate(kind, params, seed, grid)) for weight_id, kind, params, seed in specs]


def corpus_hash(specs: list[WeightSpec], grid: Grid, extra: dict | None = None) -> str:
    """sha256 over the specs, the grid and any extra run parameters."""
    payload = {
        "grid": [grid.lo, grid.hi, grid.m],
        "weights": [[weight_id, kind, params, seed] for weight_id, kind, params, seed in specs],
        "extra": extra or {},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def test_functions(grid: Grid, I0, count: int, seed: int) -> list[tuple[str, np.ndarray, float]]:
    """Nonnegative functions supported in I0, each with a height λ inside the range of M↑_{I0} f.

    Indicators, random step functions and single-cell spikes in turn.
    """
    a0, b0 = cell_range(grid.n, I0)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        f = np.zeros(grid.n)
        kind = ("indicator", "steps", "spike")[k % 3]
        if kind == "indicator":
            s = int(rng.integers(a0, b0 - 1))
            t = int(rng.integers(s + 1, b0 + 1))
            f[s:t] = 1.0
        elif kind == "steps":
            f[a0:b0] = rng.exponential(1.0, b0 - a0) * (rng.random(b0 - a0) < 0.5)
            if not f.any():
                f[a0] = 1.0
        else:
            f[int(rng.integers(a0, b0))] = rng.uniform(1.0, 10.0)
        M = max_up(f, (a0, b0))[a0:b0]
        lam = float(rng.uniform(0.2, 0.9) * M.max())
        out.append((f"{kind}_{k}", f, lam))
    return out


# pytest would otherwise collect this helper from test modules that import it
test_functions.__test__ = False
