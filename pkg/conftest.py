from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.config import build_device, load_document
from src.device import DeviceSpec
from src.fluxmodel import CouplingMatrix, FluxVector
from src.physics import CellPhysics, ElementModel, RfSquidModel

CONFIGS = Path(__file__).parent / "configs"


def make_squid(Lg: float = 60.0, Ic: float = 1.1) -> RfSquidModel:  # noqa: N803
    return RfSquidModel(Ic=Ic, Lg=Lg, length=4.8, phase_velocity=118.0, Z0=50.0)


def make_cell(role: str = "qubit", squid_mutual: float = 29.5) -> CellPhysics:
    return CellPhysics(
        squid=make_squid(),
        element=ElementModel(role=role, Imax=0.14 if role == "qubit" else 0.45),
        squid_mutual=squid_mutual,
    )


def device_from(name: str) -> DeviceSpec:
    path = CONFIGS / name
    return build_device(load_document(path), path)


@pytest.fixture
def configs() -> Path:
    return CONFIGS


@pytest.fixture
def linear_spec() -> DeviceSpec:
    """One qubit cell, no persistent-current flux, no noise."""
    return device_from("linear_one_cell.toml")


@pytest.fixture
def qubit_coupler_spec() -> DeviceSpec:
    return device_from("qubit_coupler.toml")


@pytest.fixture
def qubit_coupler_decoupled_spec() -> DeviceSpec:
    return device_from("qubit_coupler_decoupled.toml")


@pytest.fixture
def small_spec() -> DeviceSpec:
    """Hand-built one-cell device for tests that do not need a config file."""
    matrix = np.array([[1.0, 0.05, 0.02], [0.03, 0.98, 0.01], [0.04, 0.02, 1.01]])
    return DeviceSpec(
        name="small",
        cells=(make_cell(),),
        C_true=CouplingMatrix(matrix),
        f0_true=FluxVector([0.1, -0.05, 0.2]),
        noise=0.0,
        persistent_flux=False,
    )
