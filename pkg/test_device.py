from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from conftest import make_cell
from src.device import (
    FREQUENCY,
    DeviceSpec,
    ImageAxis,
    LinearTie,
    SimulatedDevice,
    Sweep,
    apply_drift,
    derive_seed,
    s21,
    translation_residual,
)
from src.errors import ContractViolationError, VoltageRangeError
from src.fluxmodel import CouplingMatrix, FluxVector, LoopIndex


def _probe_sweep(spec: DeviceSpec, artifact_id: str = "probe") -> Sweep:
    return Sweep(
        ImageAxis("q1r", np.linspace(-0.5, 0.5, 21)),
        ImageAxis(FREQUENCY, np.linspace(37.0, 39.0, 41)),
        (LoopIndex(1, "r").flat, None),
        np.zeros(spec.n),
        artifact_id,
    )


def test_spec_validation(small_spec: DeviceSpec) -> None:
    with pytest.raises(ContractViolationError):
        DeviceSpec("bad", (make_cell(),), CouplingMatrix(np.eye(6)), FluxVector.zeros(6))
    with pytest.raises(ContractViolationError):
        DeviceSpec("bad", (make_cell(),), CouplingMatrix(np.zeros((3, 3))), FluxVector.zeros(3))
    assert small_spec.labels == ["q1z", "q1x", "q1r"]
    assert not small_spec.injection().any()


def test_injection_wires_mutuals_into_z_loops(qubit_coupler_spec: DeviceSpec) -> None:
    injection = qubit_coupler_spec.injection()
    # coupler current reaches the qubit z loop and the qubit current the coupler z loop
    assert injection[LoopIndex(1, "z").flat, 1] == pytest.approx(30.2e-3)
    assert injection[LoopIndex(2, "z").flat, 0] == pytest.approx(30.2e-3)
    assert injection[LoopIndex(1, "r").flat, 0] == pytest.approx(29.5e-3)
    assert injection[LoopIndex(2, "r").flat, 1] == pytest.approx(28.7e-3)
    assert not qubit_coupler_spec.decoupled().injection().any()


def test_s21_notch_depth(small_spec: DeviceSpec) -> None:
    voltages = np.zeros(3)
    resonance = float(small_spec.resonances(voltages)[0, 0])
    assert abs(s21(resonance, voltages, small_spec)) == pytest.approx(1 - small_spec.cells[0].depth)
    assert abs(s21(resonance + 1.0, voltages, small_spec)) == pytest.approx(1.0, abs=1e-4)


def test_measurements_are_seeded_per_artifact(small_spec: DeviceSpec) -> None:
    noisy = SimulatedDevice(replace(small_spec, noise=0.05), seed=4)
    first = noisy.measure(_probe_sweep(noisy.spec, "a"))
    again = noisy.measure(_probe_sweep(noisy.spec, "a"))
    other = noisy.measure(_probe_sweep(noisy.spec, "b"))
    np.testing.assert_array_equal(first.values, again.values)
    assert not np.array_equal(first.values, other.values)
    assert noisy.points == 3 * 21 * 41
    assert derive_seed(4, "a") == derive_seed(4, "a") != derive_seed(5, "a")


def test_flux_coordinates_need_an_estimate(small_spec: DeviceSpec) -> None:
    device = SimulatedDevice(small_spec)
    sweep = _probe_sweep(small_spec)
    flux_sweep = Sweep(
        sweep.axis1,
        sweep.axis2,
        sweep.loops,
        sweep.base,
        "flux",
        coordinates="flux",
    )
    with pytest.raises(ContractViolationError):
        device.measure(flux_sweep)
    truth = small_spec.truth()
    image = device.measure(flux_sweep, truth)
    assert image.shape == (21, 41)
    # the middle row sits at zero flux on every loop
    zero = np.linalg.solve(small_spec.C_true.C, -small_spec.f0_true.values)
    np.testing.assert_allclose(
        image.values[10],
        s21(sweep.axis2.values, zero, small_spec)[0],
        rtol=1e-9,
    )


def test_voltage_limit_is_enforced(small_spec: DeviceSpec) -> None:
    limited = replace(small_spec, voltage_limit=0.2)
    with pytest.raises(VoltageRangeError):
        SimulatedDevice(limited).measure(_probe_sweep(limited))


def test_linear_tie_slaves_a_coordinate() -> None:
    tie = LinearTie(2, np.array([0.5, -1.0, 0.0]), 0.1)
    sweep = Sweep(
        ImageAxis("q1z", [0.0, 1.0]),
        ImageAxis("q1x", [0.0, 2.0]),
        (0, 1),
        np.zeros(3),
        "tied",
        probe=38.0,
        ties=(tie,),
    )
    controls, frequencies = sweep.controls()
    np.testing.assert_allclose(controls[:, 2], 0.1 + 0.5 * controls[:, 0] - controls[:, 1])
    assert frequencies.tolist() == [38.0]
    with pytest.raises(ContractViolationError):
        LinearTie(0, np.array([1.0, 0.0, 0.0]))


def test_image_axis_pixels() -> None:
    axis = ImageAxis("v", np.linspace(-1.0, 1.0, 21))
    assert axis.step == pytest.approx(0.1)
    assert axis.px(0.25) == pytest.approx(12.5)
    assert axis.at(12.5) == pytest.approx(0.25)
    with pytest.raises(ContractViolationError):
        ImageAxis("v", [0.0, 1.0, 0.5])


def test_drift_scale(small_spec: DeviceSpec) -> None:
    f0 = FluxVector.zeros(4000)
    assert apply_drift(f0, 0.0, small_spec, 1) is f0
    drifted = apply_drift(f0, small_spec.drift.reference_hours, small_spec, 1)
    rms = float(np.sqrt(np.mean(drifted.values**2)))
    assert rms == pytest.approx(small_spec.drift.rms_target, rel=0.1)
    with pytest.raises(ContractViolationError):
        apply_drift(f0, -1.0, small_spec, 1)


def test_translation_residual_of_shifted_traces() -> None:
    grid = np.arange(200) / 200
    trace = np.cos(2 * np.pi * grid) + 0.3 * np.cos(4 * np.pi * grid + 0.4)
    shifted = np.roll(trace, 17)
    assert translation_residual(trace, shifted, 200) < 1e-12
    assert translation_residual(trace, np.cos(2 * np.pi * grid), 200) > 1e-2


def test_persistent_currents_break_translation_symmetry(
    qubit_coupler_spec: DeviceSpec,
    qubit_coupler_decoupled_spec: DeviceSpec,
) -> None:
    source = qubit_coupler_spec.labels.index("c2z")
    residuals = []
    for spec in (qubit_coupler_spec, qubit_coupler_decoupled_spec):
        _, traces = SimulatedDevice(spec).spectrum_pair(1, source, (0.0, 0.25), 400)
        residuals.append(translation_residual(traces[0], traces[1], 400))
    coupled, decoupled = residuals
    assert coupled > 0
    assert coupled > 100 * decoupled


def test_readout_band_contains_the_resonances(linear_spec: DeviceSpec) -> None:
    device = SimulatedDevice(linear_spec)
    low, high = device.readout_band(1)
    rng = np.random.default_rng(0)
    resonances = linear_spec.resonances(rng.uniform(-2, 2, (200, 3)))[:, 0]
    assert low < resonances.min() and resonances.max() < high
