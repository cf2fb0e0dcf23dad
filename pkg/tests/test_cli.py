import json
from pathlib import Path

import numpy as np
import pytest

from app.exceptions import ConfigError
from app.main import main
from app.models.grid import Grid
from app.routers.experiments import run
from app.schemas.experiment import ExperimentConfig
from app.services import file_handler
from app.services.operators import discretize, hilbert_causal
from app.services.weights import family_generate


def _write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def _config(tmp_path, **fields):
    return ExperimentConfig.model_validate({"output_dir": str(tmp_path / "out"), **fields})


def test_characteristic_of_default_config(tmp_path, capsys):
    code = main(["--subcommand", "characteristic", "--out", str(tmp_path), "--m", "4"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"power_a0_s0@m4": 1.0}
    assert (tmp_path / "characteristics.csv").exists()


@pytest.mark.parametrize(
    "payload",
    [{"grid": {"m": [20]}}, {"bogus": 1}, {"shifts": [0.5]}, {"lambdas": [1.5]}, {"kernel": {"kind": "expression"}}],
)
def test_invalid_config_exits_with_two(tmp_path, payload, capsys):
    code = main(["--subcommand", "characteristic", "--config", _write_config(tmp_path, payload), "--out", str(tmp_path)])
    assert code == 2
    assert "config:" in capsys.readouterr().err


def test_unreadable_config_exits_with_two(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["--subcommand", "norm", "--config", str(broken)]) == 2
    assert main(["--subcommand", "norm", "--config", str(tmp_path / "missing.json")]) == 2


def test_unknown_subcommand_is_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["--subcommand", "bogus"])
    with pytest.raises(ConfigError):
        run("bogus", _config(tmp_path))


def test_bad_kernel_expression_is_a_config_error(tmp_path):
    config = _config(tmp_path, kernel={"kind": "expression", "expression": "__import__('os')"}, grid={"m": [4]})
    with pytest.raises(ConfigError) as info:
        run("norm", config)
    assert info.value.exit_code == 2


def test_czdecomp_writes_its_table(tmp_path):
    config = _write_config(tmp_path, {"grid": {"m": [5]}, "test_functions": 6})
    assert main(["--subcommand", "czdecomp", "--config", config, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "czdecomp.csv").exists()


def test_sparse_writes_one_tree_per_weight(tmp_path):
    payload = {"grid": {"m": [5]}, "weights": {"kind": "random_dyadic", "params": [{"beta": 4.0}], "seeds": [0, 1]}}
    assert main(["--subcommand", "sparse", "--config", _write_config(tmp_path, payload), "--out", str(tmp_path)]) == 0
    trees = sorted(tmp_path.glob("tree_*.json"))
    assert len(trees) == 2
    nodes = json.loads(trees[0].read_text())
    assert nodes[0]["generation"] == 0 and nodes[0]["parent"] is None


def test_norm_writes_the_operator_matrix(tmp_path):
    bundle = run("norm", _config(tmp_path, grid={"m": [4]}))
    assert "operator_m4.csv" in bundle.files
    grid = Grid(0.0, 1.0, 4)
    T = file_handler.load_matrix_csv(str(tmp_path / "out" / "operator_m4.csv"), grid)
    np.testing.assert_array_equal(T.entries, discretize(hilbert_causal(), grid).entries)


def test_weak_experiment_passes_its_checks(tmp_path):
    bundle = run("weak", _config(tmp_path, grid={"m": [4]}, weights={"params": [{"a": 0.5}]}, test_functions=4, rubio_terms=15))
    assert bundle.failed == []
    assert bundle.invariants
    payload = json.loads((tmp_path / "out" / "weak.json").read_text())
    assert set(payload["power_a0.5_s0@m4"]) == {"weak11", "two_weight_up", "two_weight_down", "rubio", "extrapolation"}


def test_sweep_table_can_be_read_back(tmp_path):
    config = _config(
        tmp_path,
        grid={"m": [4]},
        weights={"params": [{"a": 0.0}, {"a": 0.5}]},
        min_characteristic_span=1.0,
        pins_file=str(tmp_path / "pins.json"),
    )
    bundle = run("sweep", config)
    assert {"sweep.csv", "sweep.json", "plot_char_vs_norm.csv", "plot_char_vs_sqrtKgl.csv", "fitted_constants.json"} <= set(bundle.files)
    rows = file_handler.load_sweep(str(tmp_path / "out" / "sweep.csv"))
    assert len(rows) == 2
    assert rows[0].char <= rows[1].char
    assert {c.name for c in bundle.fitted_constants} == {"sweep_ratio_norm", "sweep_ratio_global_testing", "sweep_ratio_norm_vs_testing"}
    metadata = json.loads((tmp_path / "out" / "sweep.json").read_text())
    assert metadata["m"] == [4]
    assert len(metadata["corpus_hash"]) == 64


def test_sweep_of_a_narrow_family_is_a_config_error(tmp_path):
    config = _config(tmp_path, grid={"m": [4]}, weights={"params": [{"a": 0.0}, {"a": 0.5}]})
    with pytest.raises(ConfigError) as info:
        run("sweep", config)
    assert "span" in info.value.detail
    payload = {"grid": {"m": [4]}, "weights": {"params": [{"a": 0.0}, {"a": 0.5}]}}
    assert main(["--subcommand", "sweep", "--config", _write_config(tmp_path, payload), "--out", str(tmp_path)]) == 2


def test_sweep_pins_are_compared_on_the_next_run(tmp_path):
    pins = tmp_path / "pins.json"
    config = _config(
        tmp_path, grid={"m": [4]}, weights={"params": [{"a": 0.0}, {"a": 2.5}]}, min_characteristic_span=1.0, pins_file=str(pins)
    )
    run("sweep", config, pin=True)
    (digest,) = json.loads(pins.read_text())
    bundle = run("sweep", config)
    assert all(c.pinned is not None and c.within_pin for c in bundle.fitted_constants)
    assert {f"pinned_{c.name}" for c in bundle.fitted_constants} <= {i.name for i in bundle.invariants}
    assert bundle.summary["corpus_hash"] == digest


def test_default_config_spans_two_decades():
    with open(Path(__file__).parent.parent / "configs" / "default.json") as fh:
        config = ExperimentConfig.model_validate(json.load(fh))
    assert config.shifts == [0.0, -1 / 6]
    assert config.min_characteristic_span == 100.0
    assert max(p["a"] for p in config.weights.params) > 1


def test_weight_csv_round_trip(tmp_path, grid6):
    w = family_generate("cutoff", {"z": 0.5}, 0, grid6)
    file_handler.save_weight_csv(w, str(tmp_path), "w.csv")
    loaded = file_handler.load_weight_csv(str(tmp_path / "w.csv"))
    np.testing.assert_array_equal(loaded.values, w.values)
    assert loaded.cutoff == w.cutoff
    assert loaded.grid.m == 6


def test_weight_csv_needs_its_header(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("cell,value\n0,1\n")
    with pytest.raises(ConfigError):
        file_handler.load_weight_csv(str(path))


def test_sweep_table_needs_every_column(tmp_path):
    path = tmp_path / "sweep.csv"
    path.write_text("char,norm\n1,2\n")
    with pytest.raises(ConfigError):
        file_handler.load_sweep(str(path))
