"""Device and run configuration files.

Device files are TOML. A top-level ``include = [...]`` list pulls in shared blocks
(paths relative to the including file); included documents are merged first and the
including file's keys win.
"""

from __future__ import annotations

import hashlib
import json
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from src import constants, log
from src.device import DeviceSpec, DriftModel, ElementMutual
from src.errors import CalibrationError, ConfigError
from src.fluxmodel import CouplingMatrix, FluxVector, LoopIndex
from src.physics import CellPhysics, ElementModel, RfSquidModel

logger = log.get_logger(__name__)

__all__ = (
    "MODES",
    "RunConfig",
    "SimulateRequest",
    "build_device",
    "config_hash",
    "deep_merge",
    "load_document",
    "load_run_config",
    "parse_overrides",
)

MODES: tuple[str, ...] = ("calibrate", "offsets", "verify-error", "simulate", "resample")
NEEDS_ESTIMATE: frozenset[str] = frozenset({"offsets", "verify-error"})

_LINE_RE = re.compile(r"at line (\d+)")
_TABLES = frozenset({"include", "device", "physics", "offsets", "coupling", "drift", "run", "simulate"})


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursively merge two tables; values from ``override`` win."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_document(path: Path | str, _chain: tuple[Path, ...] = ()) -> dict[str, Any]:
    """Read a TOML file and resolve its includes.

    Raises
    ------
    ConfigError
        On syntax errors (with the line number), missing files and include cycles.
    """
    path = Path(path).resolve()
    if path in _chain:
        cycle = " -> ".join(p.name for p in (*_chain, path))
        raise ConfigError(path, f"include cycle: {cycle}")
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(path, "file not found") from None
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = _LINE_RE.search(str(exc))
        raise ConfigError(path, str(exc), int(match.group(1)) if match else None) from exc

    includes = document.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    if not isinstance(includes, list) or not all(isinstance(i, str) for i in includes):
        raise ConfigError(path, "'include' must be a list of paths")

    merged: dict[str, Any] = {}
    for include in includes:
        merged = deep_merge(merged, load_document(path.parent / include, (*_chain, path)))
    return deep_merge(merged, document)


def config_hash(document: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form of a merged document."""
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


class _Table:
    """Typed access to one TOML table with errors pointing at the offending key."""

    def __init__(self, path: Path, name: str, values: Mapping[str, Any] | None) -> None:
        self.path = path
        self.name = name
        if values is not None and not isinstance(values, Mapping):
            raise ConfigError(path, f"[{name}] must be a table")
        self.values = dict(values or {})

    def key(self, key: str) -> str:
        return f"{self.name}.{key}" if self.name else key

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(self.path, f"{self.key(key)}: {message}")

    def has(self, key: str) -> bool:
        return key in self.values

    def table(self, key: str) -> _Table:
        return _Table(self.path, self.key(key), self.values.get(key))

    def number(self, key: str, default: float | None = None, *, positive: bool = False) -> float:
        value = self.values.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {value!r}")
        if positive and value <= 0:
            raise self.error(key, f"must be positive, got {value}")
        return float(value)

    def integer(self, key: str, default: int | None = None, *, minimum: int | None = None) -> int:
        value = self.values.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be at least {minimum}, got {value}")
        return value

    def boolean(self, key: str, default: bool) -> bool:  # noqa: FBT001
        value = self.values.get(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"expected true or false, got {value!r}")
        return value

    def string(self, key: str, default: str | None = None) -> str:
        value = self.values.get(key, default)
        if not isinstance(value, str):
            raise self.error(key, f"expected a string, got {value!r}")
        return value

    def array(self, key: str, shape: tuple[int, ...]) -> np.ndarray:
        try:
            value = np.array(self.values[key], dtype=float)
        except (TypeError, ValueError) as exc:
            raise self.error(key, "expected a numeric array") from exc
        if value.shape != shape:
            raise self.error(key, f"expected shape {shape}, got {value.shape}")
        return value

    def check_keys(self, known: Iterable[str]) -> None:
        unknown = sorted(set(self.values) - set(known))
        if unknown:
            raise self.error(unknown[0], "unknown key")


def _cell_physics(physics: _Table, role: str, index: int) -> CellPhysics:
    element = physics.table(role)
    element.check_keys({"current", "squid_mutual", "shape"})
    current = constants.Physics.qubit_current if role == "qubit" else constants.Physics.coupler_current
    mutual = (
        constants.Physics.qubit_squid_mutual if role == "qubit" else constants.Physics.coupler_squid_mutual
    )
    length = physics.number("waveguide_length", constants.Physics.waveguide_length, positive=True)
    length -= physics.number("length_step", constants.Physics.length_step) * (index - 1)
    try:
        return CellPhysics(
            squid=RfSquidModel(
                Ic=physics.number("critical_current", constants.Physics.critical_current, positive=True),
                Lg=physics.number("geometric_inductance", constants.Physics.geometric_inductance, positive=True),
                length=length,
                phase_velocity=physics.number("phase_velocity", constants.Physics.phase_velocity, positive=True),
                Z0=physics.number("impedance", constants.Physics.impedance, positive=True),
            ),
            element=ElementModel(
                role=role,
                Imax=element.number("current", current),
                shape=element.string("shape", "cos_sin"),
            ),
            squid_mutual=element.number("squid_mutual", mutual),
            depth=physics.number("depth", constants.Readout.depth, positive=True),
            linewidth=physics.number("linewidth", constants.Readout.linewidth, positive=True),
        )
    except CalibrationError as exc:
        raise ConfigError(physics.path, f"cell {index} ({role}): {exc}") from exc


def _element_mutuals(device: _Table, roles: Sequence[str], interactions: bool) -> tuple[ElementMutual, ...]:  # noqa: FBT001
    if not interactions:
        return ()
    given = device.values.get("mutuals")
    if given is None:
        mutuals = []
        for a in range(1, len(roles)):
            pair = {roles[a - 1], roles[a]}
            if pair == {"qubit", "coupler"}:
                mutuals.append(ElementMutual(a, a + 1, constants.Physics.qubit_coupler_mutual))
            elif pair == {"coupler"}:
                mutuals.append(ElementMutual(a, a + 1, constants.Physics.coupler_coupler_mutual))
        return tuple(mutuals)
    if not isinstance(given, list):
        raise device.error("mutuals", "expected an array of tables")
    mutuals = []
    for number, entry in enumerate(given):
        table = _Table(device.path, f"device.mutuals[{number}]", entry)
        table.check_keys({"a", "b", "value"})
        mutuals.append(
            ElementMutual(table.integer("a", minimum=1), table.integer("b", minimum=1), table.number("value")),
        )
    return tuple(mutuals)


def _coupling(coupling: _Table, n: int) -> tuple[CouplingMatrix, np.ndarray | None]:
    coupling.check_keys({"matrix", "mutuals_pH", "resistances_ohm", "random"})
    if coupling.has("matrix"):
        return CouplingMatrix(coupling.array("matrix", (n, n))), None
    if coupling.has("mutuals_pH") or coupling.has("resistances_ohm"):
        mutuals = coupling.array("mutuals_pH", (n, n))
        resistances = coupling.array("resistances_ohm", (n,))
        if np.any(resistances <= 0):
            raise coupling.error("resistances_ohm", "line resistances must be positive")
        return CouplingMatrix.from_mutuals(mutuals, resistances), resistances

    random = coupling.table("random")
    random.check_keys({"diagonal", "crosstalk", "spread", "seed"})
    diagonal = random.number("diagonal", 1.0, positive=True)
    crosstalk = random.number("crosstalk", 0.1)
    spread = random.number("spread", 0.0)
    rng = np.random.default_rng(random.integer("seed", 0))
    matrix = diagonal * rng.uniform(-crosstalk, crosstalk, (n, n))
    np.fill_diagonal(matrix, diagonal * (1 + spread * rng.uniform(-1, 1, n)))
    return CouplingMatrix(matrix), None


def _offsets(offsets: _Table, n: int) -> FluxVector:
    offsets.check_keys({"values", "random"})
    if offsets.has("values"):
        return FluxVector(offsets.array("values", (n,)))
    random = offsets.table("random")
    random.check_keys({"scale", "seed"})
    scale = random.number("scale", 0.0)
    return FluxVector(np.random.default_rng(random.integer("seed", 0)).uniform(-scale, scale, n))


def build_device(document: Mapping[str, Any], path: Path | str = "<config>") -> DeviceSpec:
    """Turn a merged device document into a :class:`DeviceSpec`."""
    path = Path(path)
    root = _Table(path, "", document)
    unknown = sorted(set(document) - _TABLES)
    if unknown:
        raise ConfigError(path, f"unknown table [{unknown[0]}]")

    device = _Table(path, "device", document.get("device"))
    device.check_keys({"name", "cells", "roles", "noise", "voltage_limit", "interactions", "mutuals"})
    cells = device.integer("cells", minimum=1)
    roles = device.values.get("roles", ["qubit"] * cells)
    if not isinstance(roles, list) or len(roles) != cells or not all(r in ("qubit", "coupler") for r in roles):
        raise device.error("roles", f"expected {cells} entries of 'qubit' or 'coupler'")
    interactions = device.boolean("interactions", True)  # noqa: FBT003

    physics = _Table(path, "physics", document.get("physics"))
    physics.check_keys(
        {
            "critical_current",
            "geometric_inductance",
            "waveguide_length",
            "length_step",
            "phase_velocity",
            "impedance",
            "depth",
            "linewidth",
            "qubit",
            "coupler",
        },
    )
    cell_physics = tuple(_cell_physics(physics, role, index) for index, role in enumerate(roles, start=1))

    n = 3 * cells
    matrix, resistances = _coupling(root.table("coupling"), n)
    drift = root.table("drift")
    drift.check_keys({"rms_target", "reference_hours", "jump_size", "jump_rate"})
    limit = device.values.get("voltage_limit", constants.Readout.voltage_limit)

    try:
        spec = DeviceSpec(
            name=device.string("name", path.stem),
            cells=cell_physics,
            C_true=matrix,
            f0_true=_offsets(root.table("offsets"), n),
            mutuals=_element_mutuals(device, roles, interactions),
            noise=device.number("noise", constants.Readout.noise),
            drift=DriftModel(
                rms_target=drift.number("rms_target", constants.Drift.rms_target),
                reference_hours=drift.number("reference_hours", constants.Drift.reference_hours, positive=True),
                jump_size=drift.number("jump_size", constants.Drift.jump_size),
                jump_rate=drift.number("jump_rate", constants.Drift.jump_rate),
            ),
            voltage_limit=None if limit is False else device.number("voltage_limit", limit, positive=True),
            resistances=resistances,
        )
    except CalibrationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc
    return spec if interactions else spec.decoupled()


@dataclass(frozen=True)
class SimulateRequest:
    """What ``simulate`` renders: spectra of ``cell`` at several settings of ``source``."""

    cell: int = 1
    source: int = 0
    settings: tuple[float, ...] = (0.0, 0.25)
    points: int = 400


def _simulate(table: _Table, device: DeviceSpec) -> SimulateRequest:
    table.check_keys({"cell", "source", "settings", "points"})
    cell = table.integer("cell", 1, minimum=1)
    if cell > device.m:
        raise table.error("cell", f"device has {device.m} cell(s)")
    source = table.string("source", device.labels[LoopIndex(cell, "z").flat])
    if source not in device.labels:
        raise table.error("source", f"unknown line {source!r}, known: {', '.join(device.labels)}")
    settings = table.values.get("settings", [0.0, 0.25])
    if not isinstance(settings, list) or len(settings) < 2:  # noqa: PLR2004
        raise table.error("settings", "expected at least two source settings")
    if device.labels.index(source) == LoopIndex(cell, "r").flat:
        raise table.error("source", "the source must differ from the swept resonator line")
    return SimulateRequest(
        cell,
        device.labels.index(source),
        tuple(float(s) for s in settings),
        table.integer("points", 400, minimum=16),
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs, with command-line values taking precedence."""

    path: Path
    mode: str
    device: DeviceSpec
    iterations: int
    output: Path
    seed: int
    stage_overrides: dict[str, object] = field(default_factory=dict)
    skip_cells: tuple[int, ...] = ()
    estimate: Path | None = None
    drift_hours: tuple[float, ...] = ()
    sigmas: tuple[float, ...] = ()
    count: int = 10
    simulate: SimulateRequest = field(default_factory=SimulateRequest)
    document: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(
            {
                "document": self.document,
                "mode": self.mode,
                "iterations": self.iterations,
                "seed": self.seed,
                "stage_overrides": self.stage_overrides,
                "skip_cells": list(self.skip_cells),
                "drift_hours": list(self.drift_hours),
                "sigmas": list(self.sigmas),
                "count": self.count,
            },
        )


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    """Split ``KEY=VALUE`` strings."""
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError("--stage-override", f"expected KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(  # noqa: PLR0913
    path: Path | str,
    mode: str,
    output: Path | str | None = None,
    *,
    iterations: int | None = None,
    seed: int | None = None,
    skip_cells: Sequence[int] = (),
    stage_overrides: Mapping[str, object] | None = None,
    estimate: Path | str | None = None,
    drift_hours: Sequence[float] = (),
    sigmas: Sequence[float] = (),
    count: int | None = None,
) -> RunConfig:
    """Read a device file and combine its ``[run]`` table with command-line values."""
    path = Path(path)
    if mode not in MODES:
        raise ConfigError(path, f"unknown mode {mode!r}, known: {', '.join(MODES)}")
    document = load_document(path)
    device = build_device(document, path)

    run = _Table(path, "run", document.get("run"))
    run.check_keys({"iterations", "seed", "skip_cells", "stage_overrides", "drift_hours", "sigmas", "count"})
    overrides = dict(run.values.get("stage_overrides", {}))
    overrides.update(stage_overrides or {})

    skip = tuple(skip_cells) or tuple(run.values.get("skip_cells", ()))
    if any(not isinstance(cell, int) or not 1 <= cell <= device.m for cell in skip):
        raise run.error("skip_cells", f"cells are numbered 1..{device.m}, got {list(skip)}")
    hours = tuple(drift_hours) or tuple(run.values.get("drift_hours", ()))
    if any(h < 0 for h in hours):
        raise run.error("drift_hours", "drift epochs must be non-negative")
    noise = tuple(sigmas) or tuple(run.values.get("sigmas", (device.noise or 0.01,)))

    config = RunConfig(
        path=path,
        mode=mode,
        device=device,
        iterations=iterations if iterations is not None else run.integer(
            "iterations",
            constants.Convergence.iterations,
            minimum=1,
        ),
        output=Path(output) if output is not None else constants.Paths.output_dir / f"{path.stem}-{mode}",
        seed=seed if seed is not None else run.integer("seed", 0),
        stage_overrides=overrides,
        skip_cells=skip,
        estimate=Path(estimate) if estimate is not None else None,
        drift_hours=tuple(float(h) for h in hours),
        sigmas=tuple(float(s) for s in noise),
        count=count if count is not None else run.integer("count", 10, minimum=2),
        simulate=_simulate(_Table(path, "simulate", document.get("simulate")), device),
        document=document,
    )
    if config.iterations < 1:
        raise ConfigError("--iterations", "at least one iteration is required")
    if mode in NEEDS_ESTIMATE and config.estimate is None:
        raise ConfigError("--estimate", f"'{mode}' needs an estimate file")
    logger.debug(f"Loaded {path} ({device.m} cell(s), config hash {config.hash[:12]})")
    return config
