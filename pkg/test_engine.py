from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from src import engine
from src.device import FREQUENCY, DeviceSpec, ImageAxis, SimulatedDevice, Sweep
from src.engine import (
    EffectiveCellCalibration,
    EngineSettings,
    ErrorMatrix,
    IterationState,
    RecordingBackend,
    ReplayBackend,
    error_characterization,
    fast_offsets,
    iteration_statistics,
    noise_resampling_error,
    run_calibration,
    run_iteration,
    stage3b,
    stage4,
)
from src.errors import ConfigError, ContractViolationError, ReplayError
from src.fluxmodel import (
    CouplingMatrix,
    FluxVector,
    IterationRecord,
    LoopIndex,
    UnitKind,
)


def test_settings_overrides_are_coerced() -> None:
    settings = EngineSettings().with_overrides(
        {"points_per_period": "80", "skip_failed_cells": "yes", "source_span": "0.2"},
    )
    assert settings.points_per_period == 80
    assert settings.skip_failed_cells is True
    assert settings.source_span == pytest.approx(0.2)


@pytest.mark.parametrize(
    "overrides",
    [{"no_such_knob": "1"}, {"points_per_period": "1.5"}, {"skip_failed_cells": "maybe"}],
)
def test_bad_overrides_are_config_errors(overrides: dict[str, str]) -> None:
    with pytest.raises(ConfigError):
        EngineSettings().with_overrides(overrides)


def test_settings_validation() -> None:
    with pytest.raises(ContractViolationError):
        EngineSettings(source_settings=2)
    with pytest.raises(ContractViolationError):
        EngineSettings(first_periods=1.5)
    with pytest.raises(ContractViolationError):
        EngineSettings(points_per_period=8)


def test_error_matrix_ignores_the_diagonal() -> None:
    theta = np.array([[5.0, 1.0, -2.0], [0.5, 9.0, 0.0], [0.0, 2.0, 3.0]])
    errors = ErrorMatrix(theta, (1,), ("q1z", "q1x", "q1r"))
    assert np.all(np.diag(errors.Theta) == 0)
    assert errors.max == pytest.approx(2.0)
    assert errors.rms == pytest.approx(np.sqrt((1 + 4 + 0.25 + 4) / 6))
    with pytest.raises(ContractViolationError):
        ErrorMatrix(np.array([[0.0, np.nan], [0.0, 0.0]]), (1,), ("a", "b"))


def test_iteration_statistics_units() -> None:
    first = IterationRecord(
        1,
        CouplingMatrix(np.array([[1.0, 0.1, 0.0], [0.2, 1.0, 0.0], [0.0, 0.0, 1.0]])),
        FluxVector([0.1, 0.2, 0.3]),
    )
    second = IterationRecord(
        2,
        CouplingMatrix(
            np.array([[1.002, 0.001, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.999]]),
            unit=UnitKind.FLUX,
        ),
        FluxVector([0.001, 0.0, -0.002]),
        skipped=(2,),
    )
    rows = iteration_statistics((first, second))
    assert [row["iteration"] for row in rows] == [1, 2]
    assert rows[0]["off_max"] == pytest.approx(0.2)
    # later iterations are reported in mPhi0/Phi0 and mPhi0
    assert rows[1]["off_max"] == pytest.approx(1.0)
    assert rows[1]["diagonal_median"] == pytest.approx(1.0)
    assert rows[1]["offset_median"] == pytest.approx(1.0)
    assert rows[1]["skipped"] == 1


def test_replay_backend_needs_the_recorded_image(linear_spec: DeviceSpec) -> None:
    device = SimulatedDevice(linear_spec)
    replay = ReplayBackend(
        {},
        linear_spec.labels,
        {1: device.readout_band(1)},
        {1: device.linewidth(1)},
    )
    assert replay.n_cells == 1
    sweep = Sweep(
        ImageAxis("q1r", [0.0, 0.1]),
        ImageAxis(FREQUENCY, [37.0, 37.1]),
        (LoopIndex(1, "r").flat, None),
        np.zeros(3),
        "it1-c1-s1",
    )
    with pytest.raises(ReplayError):
        replay.measure(sweep)
    with pytest.raises(ContractViolationError):
        ReplayBackend({}, linear_spec.labels, {}, {}, sigma=-1.0)


def test_skipped_cells_keep_nominal_rows(linear_spec: DeviceSpec) -> None:
    device = SimulatedDevice(linear_spec)
    outcome = run_iteration(device, skip=(1,))
    settings = EngineSettings()
    np.testing.assert_allclose(outcome.record.C_n.C, settings.nominal_coupling * np.eye(3))
    assert not outcome.record.f0_n.values.any()
    assert outcome.record.skipped == (1,)
    assert outcome.points == 0
    assert device.points == 0


def test_calibration_needs_an_iteration(linear_spec: DeviceSpec) -> None:
    with pytest.raises(ContractViolationError):
        run_calibration(SimulatedDevice(linear_spec), iterations=0)


@pytest.mark.slow
def test_one_iteration_on_a_linear_device(linear_spec: DeviceSpec) -> None:
    outcome = run_iteration(SimulatedDevice(linear_spec, seed=1))
    assert outcome.record.n == 1
    assert outcome.record.C_n.unit is UnitKind.VOLT
    np.testing.assert_allclose(outcome.estimate.C_prime.C, linear_spec.C_true.C, atol=2e-2)
    np.testing.assert_allclose(
        outcome.estimate.f0_prime.values,
        linear_spec.f0_true.values,
        atol=2e-2,
    )
    assert {report.stage for report in outcome.reports} == {"1", "2", "3a", "3b"}
    assert outcome.points > 0


@pytest.mark.slow
def test_truth_is_a_fixed_point(linear_spec: DeviceSpec) -> None:
    outcome = run_iteration(SimulatedDevice(linear_spec, seed=1), previous=linear_spec.truth())
    record = outcome.record
    assert record.n == 2
    assert record.C_n.unit is UnitKind.FLUX
    assert np.max(np.abs(record.C_n.C - np.eye(3))) < 1e-6
    assert np.max(np.abs(record.f0_n.values)) < 1e-6


@pytest.mark.slow
def test_reruns_are_identical(linear_spec: DeviceSpec) -> None:
    noisy = replace(linear_spec, noise=0.02)
    first = run_iteration(SimulatedDevice(noisy, seed=7))
    second = run_iteration(SimulatedDevice(noisy, seed=7))
    np.testing.assert_array_equal(first.record.C_n.C, second.record.C_n.C)
    np.testing.assert_array_equal(first.record.f0_n.values, second.record.f0_n.values)
    for key, image in first.images.items():
        np.testing.assert_array_equal(image.values, second.images[key].values)


@pytest.mark.slow
def test_fast_offsets_recover_an_injected_shift(linear_spec: DeviceSpec) -> None:
    injected = np.array([0.005, -0.005, 0.005])
    moved = linear_spec.with_offsets(FluxVector(linear_spec.f0_true.values + injected))
    result = fast_offsets(SimulatedDevice(moved, seed=1), linear_spec.truth())
    # the located centres sit at minus the injected offset change
    np.testing.assert_allclose(result.shift.values, -injected, atol=5e-4)
    np.testing.assert_allclose(result.estimate.f0_prime.values, moved.f0_true.values, atol=5e-4)
    assert result.estimate.iterations == 2


def _element_flux(K: np.ndarray, sweep: Sweep, pair: list[int]) -> np.ndarray:  # noqa: N803
    """Element-loop flux at the scan origin, ties applied, without offsets."""
    u = np.array(sweep.base)
    for tie in sweep.ties:
        u[tie.loop] = tie.offset + tie.weights @ u
    return (K @ u)[pair]


def test_stage3b_and_stage4_algebra_is_exact(
    qubit_coupler_spec: DeviceSpec,
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    truth = qubit_coupler_spec.C_true.C
    offsets = qubit_coupler_spec.f0_true.values
    z, x, r = (LoopIndex(1, kind).flat for kind in ("z", "x", "r"))
    pair = [z, x]
    source = LoopIndex(2, "z").flat
    held = truth[np.ix_(pair, pair)] - np.outer(truth[pair, r], truth[r, pair]) / truth[r, r]
    f0eff = offsets[pair] - truth[pair, r] * offsets[r] / truth[r, r]

    state = IterationState(SimulatedDevice(qubit_coupler_spec), None, EngineSettings())
    # resonator rows from stages 1 and 2, element rows still unknown
    state.K = truth.copy()
    state.K[np.ix_(pair, pair)] = 0.0
    state.K[pair, r] = 0.0
    state.K[pair, source] = 0.0
    state.g = offsets.copy()
    state.g[pair] = 0.0
    state.effective[1] = EffectiveCellCalibration(1, held, f0eff, residual=0.0)
    reference = state.element_scan(1, np.zeros(state.size), 0.0, 0.0, "reference")
    state.scan_refs[1] = reference

    def translate(_: IterationState, ref: Sweep, sweep: Sweep) -> np.ndarray:
        moved = _element_flux(truth, sweep, pair) - _element_flux(truth, ref, pair)
        return -np.linalg.solve(held, moved)

    monkeypatch.setattr(state, "measure", lambda sweep, _report: sweep)
    monkeypatch.setattr(engine, "_shift", translate)

    block, found, _ = stage3b(state, 1)
    np.testing.assert_allclose(state.K[pair, r], truth[pair, r], atol=1e-12)
    np.testing.assert_allclose(block[:2, :2], truth[np.ix_(pair, pair)], atol=1e-12)
    np.testing.assert_allclose(found, offsets[pair], atol=1e-12)

    value, report = stage4(state, 1, source)
    np.testing.assert_allclose(value, truth[pair, source], atol=1e-12)
    assert report.source == "c2z"


@pytest.mark.slow
def test_iterations_shrink_the_residual_crosstalk(qubit_coupler_spec: DeviceSpec) -> None:
    device = SimulatedDevice(qubit_coupler_spec, seed=1)
    _, outcomes = run_calibration(device, iterations=3)
    rows = iteration_statistics([outcome.record for outcome in outcomes])
    assert rows[2]["off_max"] < rows[1]["off_max"]
    first = error_characterization(device, outcomes[0].estimate)
    last = error_characterization(device, outcomes[2].estimate)
    assert last.rms * 3 <= first.rms


@pytest.mark.slow
def test_resampling_spread_is_normalised_per_source_column(linear_spec: DeviceSpec) -> None:
    recording = RecordingBackend(SimulatedDevice(linear_spec, seed=1))
    run_iteration(recording)
    spread = noise_resampling_error(recording, None, 0.02, 3, seed=2)
    positive = spread.spread > 0
    assert positive.any(axis=0).all()
    diagonal = np.abs(np.diag(linear_spec.C_true.C))
    for column in range(3):
        rows = positive[:, column]
        scale = spread.normalized[rows, column] / spread.spread[rows, column]
        # one divisor per column: the diagonal entry of the source loop
        np.testing.assert_allclose(scale, scale[0], rtol=1e-9)
        assert scale[0] == pytest.approx(1e3 / diagonal[column], rel=0.05)
