from __future__ import annotations

import numpy as np
import pytest

from conftest import make_cell, make_squid
from src.errors import ContractViolationError, HystereticRegimeError, OverCouplingError
from src.physics import (
    PHI0,
    ElementModel,
    element_effective_inductance,
    loaded_resonator_frequency,
    resonator_frequency,
    squid_effective_inductance,
    squid_phase,
)


def test_squid_phase_solves_the_flux_relation() -> None:
    squid = make_squid()
    flux = np.linspace(-1.5, 1.5, 301)
    phi = squid_phase(flux, squid)
    np.testing.assert_allclose(phi + squid.beta_l * np.sin(phi), 2 * np.pi * flux, atol=1e-9)
    assert squid_phase(0.0, squid) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(squid_phase(-flux, squid), -phi, atol=1e-9)


def test_hysteretic_squid_is_rejected() -> None:
    with pytest.raises(HystereticRegimeError):
        make_squid(Ic=6.0)
    with pytest.raises(ContractViolationError):
        make_squid(Lg=-1.0)


def test_effective_inductance_at_zero_phase() -> None:
    squid = make_squid()
    expected = 1 / (1 / squid.Lg + 2 * np.pi * squid.Ic / PHI0)
    assert squid_effective_inductance(0.0, squid) == pytest.approx(expected)


def test_resonator_frequency_limits() -> None:
    squid = make_squid()
    shorted = np.pi * 118.0 / (2 * 4.8)
    assert resonator_frequency(0.0, squid) == pytest.approx(shorted, rel=1e-9)
    assert resonator_frequency(np.inf, squid) == pytest.approx(2 * shorted)
    omegas = resonator_frequency(np.array([10.0, 50.0, 100.0]), squid)
    assert np.all(np.diff(omegas) < 0)
    with pytest.raises(ContractViolationError):
        resonator_frequency(-1.0, squid)


def test_resonator_frequency_satisfies_the_boundary_condition() -> None:
    squid = make_squid()
    inductance = 55.0
    omega = resonator_frequency(inductance, squid)
    left = np.exp(2j * omega * squid.length / squid.phase_velocity)
    reactance = 1j * omega * inductance * 1e-3
    assert left == pytest.approx((reactance - squid.Z0) / (reactance + squid.Z0), abs=1e-9)


def test_element_inductance_is_infinite_at_stationary_points() -> None:
    element = ElementModel(role="qubit", Imax=0.14)
    # dI/df_z vanishes where cos(2 pi f_z) = 0
    assert np.isinf(element_effective_inductance(0.25, 0.0, element))
    assert element_effective_inductance(0.0, 0.0, element) == pytest.approx(
        PHI0 / (0.14 * 2 * np.pi),
        rel=1e-6,
    )


def test_loaded_frequency_without_mutual_is_the_bare_squid() -> None:
    cell = make_cell(squid_mutual=0.0)
    flux = np.linspace(-0.6, 0.6, 25)
    inductance = squid_effective_inductance(squid_phase(flux, cell.squid), cell.squid)
    expected = resonator_frequency(inductance, cell.squid)
    loaded = loaded_resonator_frequency(flux, 0.3, 0.1, cell)
    np.testing.assert_allclose(loaded, expected, rtol=1e-12)


def test_loaded_frequency_periodicity_and_mirror_symmetry() -> None:
    cell = make_cell()
    rng = np.random.default_rng(5)
    f_r, f_z, f_x = rng.uniform(-1, 1, (3, 1000))
    omega = loaded_resonator_frequency(f_r, f_z, f_x, cell)
    for moved in (
        (f_r + 1, f_z, f_x),
        (f_r, f_z + 1, f_x),
        (f_r, f_z, f_x + 2),
        (-f_r, -f_z, -f_x),
    ):
        np.testing.assert_allclose(loaded_resonator_frequency(*moved, cell), omega, atol=1e-10)


def test_over_coupling_is_reported() -> None:
    cell = make_cell(squid_mutual=400.0)
    with pytest.raises(OverCouplingError):
        loaded_resonator_frequency(0.2, 0.0, 0.0, cell, cell_number=1)


def test_unknown_current_shape() -> None:
    with pytest.raises(ContractViolationError):
        ElementModel(role="qubit", Imax=0.14, shape="triangle")
    with pytest.raises(ContractViolationError):
        ElementModel(role="transmon", Imax=0.14)
