from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.config import (
    build_device,
    config_hash,
    deep_merge,
    load_document,
    load_run_config,
    parse_overrides,
)
from src.errors import ConfigError

DEVICE = """
[device]
cells = 1
noise = 0.0

[coupling]
matrix = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]

[offsets]
values = [0.1, 0.2, 0.3]
"""


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_deep_merge_prefers_the_override() -> None:
    merged = deep_merge({"a": {"x": 1, "y": 2}, "b": 1}, {"a": {"y": 3}, "c": 4})
    assert merged == {"a": {"x": 1, "y": 3}, "b": 1, "c": 4}


def test_includes_merge_before_the_including_file(tmp_path: Path) -> None:
    _write(tmp_path / "shared.toml", "[physics]\ndepth = 0.5\nlinewidth = 0.01\n")
    path = _write(tmp_path / "device.toml", 'include = ["shared.toml"]\n[physics]\ndepth = 0.7\n')
    document = load_document(path)
    assert document["physics"] == {"depth": 0.7, "linewidth": 0.01}
    assert "include" not in document


def test_include_cycle_is_reported(tmp_path: Path) -> None:
    _write(tmp_path / "a.toml", 'include = ["b.toml"]\n')
    _write(tmp_path / "b.toml", 'include = ["a.toml"]\n')
    with pytest.raises(ConfigError, match="include cycle"):
        load_document(tmp_path / "a.toml")


def test_syntax_errors_carry_the_line(tmp_path: Path) -> None:
    path = _write(tmp_path / "broken.toml", "[device]\ncells = 1\nnoise = = 2\n")
    with pytest.raises(ConfigError, match=r"broken.toml:3"):
        load_document(path)
    with pytest.raises(ConfigError, match="file not found"):
        load_document(tmp_path / "missing.toml")


def test_unknown_tables_and_keys(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match=r"unknown table \[colours\]"):
        build_device({"device": {"cells": 1}, "colours": {}}, tmp_path / "d.toml")
    with pytest.raises(ConfigError, match="device.colour: unknown key"):
        build_device({"device": {"cells": 1, "colour": "red"}}, tmp_path / "d.toml")
    with pytest.raises(ConfigError, match="device.roles"):
        build_device({"device": {"cells": 2, "roles": ["qubit"]}}, tmp_path / "d.toml")


def test_explicit_matrix_and_offsets(tmp_path: Path) -> None:
    path = _write(tmp_path / "device.toml", DEVICE)
    spec = build_device(load_document(path), path)
    assert spec.name == "device"
    assert spec.C_true.C[0, 1] == pytest.approx(0.1)
    np.testing.assert_allclose(spec.f0_true.values, [0.1, 0.2, 0.3])
    assert spec.voltage_limit == pytest.approx(10.0)


def test_voltage_limit_can_be_switched_off(tmp_path: Path) -> None:
    path = _write(tmp_path / "device.toml", DEVICE.replace("noise", "voltage_limit = false\nnoise"))
    assert build_device(load_document(path), path).voltage_limit is None


def test_default_element_mutuals(configs: Path) -> None:
    path = configs / "three_cell.toml"
    spec = build_device(load_document(path), path)
    assert [(m.a, m.b) for m in spec.mutuals] == [(1, 2), (2, 3)]
    assert all(m.value == pytest.approx(30.2) for m in spec.mutuals)
    assert spec.roles == ["qubit", "coupler", "qubit"]


def test_disabled_interactions_decouple(configs: Path) -> None:
    path = configs / "linear_one_cell.toml"
    spec = build_device(load_document(path), path)
    assert spec.mutuals == ()
    assert not spec.persistent_flux


def test_coupling_from_mutual_inductances(tmp_path: Path) -> None:
    mutuals = np.diag([2.0, 2.0, 2.0]) + 0.1
    document = {
        "device": {"cells": 1},
        "coupling": {"mutuals_pH": mutuals.tolist(), "resistances_ohm": [1000.0] * 3},
    }
    spec = build_device(document, tmp_path / "d.toml")
    np.testing.assert_allclose(spec.C_true.to_mutuals(spec.resistances), mutuals)
    document["coupling"]["resistances_ohm"] = [1000.0, 0.0, 1000.0]
    with pytest.raises(ConfigError, match="resistances_ohm"):
        build_device(document, tmp_path / "d.toml")


def test_random_coupling_is_seeded(tmp_path: Path) -> None:
    document = {
        "device": {"cells": 2},
        "coupling": {"random": {"crosstalk": 0.1, "spread": 0.05, "seed": 4}},
    }
    first = build_device(document, tmp_path / "d.toml")
    again = build_device(document, tmp_path / "d.toml")
    np.testing.assert_array_equal(first.C_true.C, again.C_true.C)
    off = first.C_true.C[~np.eye(6, dtype=bool)]
    assert np.all(np.abs(off) <= 0.1)
    assert np.all(np.abs(np.diag(first.C_true.C) - 1) <= 0.05)


def test_parse_overrides() -> None:
    assert parse_overrides(["a=1", " b = x "]) == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    with pytest.raises(ConfigError):
        parse_overrides(["=3"])


def test_run_table_defaults_and_command_line_precedence(configs: Path, tmp_path: Path) -> None:
    path = configs / "three_cell.toml"
    config = load_run_config(path, "calibrate", tmp_path)
    assert config.iterations == 3
    assert config.seed == 3
    assert config.output == tmp_path
    assert config.sigmas == (0.02,)
    overridden = load_run_config(path, "calibrate", tmp_path, iterations=1, seed=9, skip_cells=[2])
    assert (overridden.iterations, overridden.seed) == (1, 9)
    assert overridden.skip_cells == (2,)
    assert overridden.hash != config.hash
    assert load_run_config(path, "calibrate", tmp_path).hash == config.hash


def test_run_config_validation(configs: Path, tmp_path: Path) -> None:
    path = configs / "three_cell.toml"
    with pytest.raises(ConfigError, match="--estimate"):
        load_run_config(path, "offsets", tmp_path)
    with pytest.raises(ConfigError, match="skip_cells"):
        load_run_config(path, "calibrate", tmp_path, skip_cells=[4])
    with pytest.raises(ConfigError, match="unknown mode"):
        load_run_config(path, "dance", tmp_path)
    with pytest.raises(ConfigError, match="--iterations"):
        load_run_config(path, "calibrate", tmp_path, iterations=0)


def test_simulate_request(configs: Path, tmp_path: Path) -> None:
    config = load_run_config(configs / "qubit_coupler.toml", "simulate", tmp_path)
    request = config.simulate
    assert request.cell == 1
    assert request.source == 3
    assert request.settings == (0.0, 0.25)
    assert request.points == 400


def test_config_hash_ignores_key_order() -> None:
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
