import json
import logging
import os

import numpy as np
import pandas as pd

from app.exceptions import ConfigError
from app.models.grid import Grid
from app.models.operator import OperatorMatrix
from app.models.weight import Weight
from app.schemas.reports import SweepRow
from app.services.analysis import SparseTree

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = list(SweepRow.model_fields)


def _target(out_dir: str, filename: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, filename)


def save_weight_csv(w: Weight, out_dir: str, filename: str) -> str:
    """`#` header lines lo, hi, m, cutoff, then the cell,value table."""
    file_path = _target(out_dir, filename)
    cutoff = "" if w.cutoff is None else repr(w.cutoff)
    with open(file_path, "w", newline="") as buffer:
        buffer.write(f"# lo={w.grid.lo!r}\n# hi={w.grid.hi!r}\n# m={w.grid.m}\n# cutoff={cutoff}\n")
        pd.DataFrame({"cell": np.arange(w.grid.n), "value": w.values}).to_csv(buffer, index=False, float_format="%.17g")
    return filename


def load_weight_csv(file_path: str) -> Weight:
    header = {}
    with open(file_path) as buffer:
        for line in buffer:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
    try:
        grid = Grid(float(header["lo"]), float(header["hi"]), int(header["m"]))
    except KeyError as e:
        raise ConfigError(f"{file_path}: missing header field {e.args[0]}") from e
    table = pd.read_csv(file_path, comment="#")
    if list(table.columns) != ["cell", "value"] or len(table) != grid.n:
        raise ConfigError(f"{file_path}: expected {grid.n} rows of cell,value")
    cutoff = float(header["cutoff"]) if header.get("cutoff") else None
    return Weight(grid, table.sort_values("cell")["value"].to_numpy(), cutoff)


def save_matrix_csv(T: OperatorMatrix, out_dir: str, filename: str) -> str:
    np.savetxt(_target(out_dir, filename), T.entries, delimiter=",", fmt="%.17g")
    return filename


def load_matrix_csv(file_path: str, grid: Grid, band: int = 1, direction: str = "up") -> OperatorMatrix:
    entries = np.loadtxt(file_path, delimiter=",", ndmin=2)
    return OperatorMatrix(entries, grid, band, "plain", direction)


def save_json(payload, out_dir: str, filename: str) -> str:
    with open(_target(out_dir, filename), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
    return filename


def save_tree_json(tree: SparseTree, out_dir: str, filename: str) -> str:
    return save_json(tree.to_json(), out_dir, filename)


def save_sweep(rows: list[SweepRow], metadata: dict, out_dir: str) -> list[str]:
    """sweep.csv with its sidecar and the two plot-data tables."""
    table = pd.DataFrame([row.model_dump() for row in rows], columns=SWEEP_COLUMNS)
    table.to_csv(_target(out_dir, "sweep.csv"), index=False, float_format="%.12g")
    save_json(metadata, out_dir, "sweep.json")
    table[["char", "norm"]].to_csv(_target(out_dir, "plot_char_vs_norm.csv"), index=False, float_format="%.12g")
    plot = pd.DataFrame({"char": table["char"], "sqrt_K_gl": np.sqrt(table["K_gl"])})
    plot.to_csv(_target(out_dir, "plot_char_vs_sqrtKgl.csv"), index=False, float_format="%.12g")
    logger.info("wrote sweep table with %d rows to %s", len(rows), out_dir)
    return ["sweep.csv", "sweep.json", "plot_char_vs_norm.csv", "plot_char_vs_sqrtKgl.csv"]


def load_sweep(file_path: str) -> list[SweepRow]:
    table = pd.read_csv(file_path)
    missing = [c for c in SWEEP_COLUMNS if c not in table.columns]
    if missing:
        raise ConfigError(f"{file_path}: missing sweep columns {missing}")
    return [SweepRow(**record) for record in table[SWEEP_COLUMNS].to_dict(orient="records")]


def save_table(records: list[dict], out_dir: str, filename: str) -> str:
    pd.DataFrame(records).to_csv(_target(out_dir, filename), index=False, float_format="%.12g")
    return filename
