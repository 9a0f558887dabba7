from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from src import symmetry
from src.device import FREQUENCY, DeviceSpec, ImageAxis, SimulatedDevice, Sweep, TransmissionImage
from src.errors import (
    InsufficientLatticeError,
    LineDetectionError,
    LowConfidenceError,
    PeakFitError,
    RankDeficiencyError,
)
from src.fluxmodel import CouplingMatrix, FluxVector, LoopIndex
from src.symmetry import CorrelationProfile


def _smooth_noise(shape: tuple[int, int], seed: int, sigma: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")


def test_recurrence_plot_with_fixed_threshold() -> None:
    rows = np.array([[0.0], [1.0], [0.0], [2.0]])
    plot = symmetry.recurrence_plot(rows, rows, epsilon=0.5)
    assert plot.values.diagonal().all()
    assert plot.values[0, 2] and not plot.values[0, 1]
    assert not plot.automatic


def test_detect_lines_finds_the_diagonal_offset() -> None:
    plot = np.zeros((60, 60), dtype=bool)
    for i in range(55):
        plot[i, i + 5] = True
    lines = symmetry.detect_lines(plot)
    assert lines[0].offset == 5
    assert lines[0].position == pytest.approx(5.0, abs=0.5)
    with pytest.raises(LineDetectionError):
        symmetry.detect_lines(np.zeros((20, 20), dtype=bool))


def test_recurrence_line_of_a_shifted_periodic_signal() -> None:
    i = np.arange(200)
    signal = np.column_stack([np.cos(2 * np.pi * i / 40), np.sin(2 * np.pi * i / 40)])
    lines = symmetry.detect_lines(symmetry.recurrence_plot(signal, signal), (20, 60))
    assert lines[0].position == pytest.approx(40.0, abs=0.5)


def test_reflection_correlation_peaks_on_the_mirror() -> None:
    i = np.arange(61.0)
    image = np.column_stack([np.exp(-((i - 20.0) ** 2) / 30), np.cos((i - 20.0) / 4)])
    profile = symmetry.reflection_correlation(image, mask_width=5)
    assert profile.best() == 20
    assert profile.rho[20] == pytest.approx(1.0)


def test_point_reflection_correlation_of_symmetric_and_antisymmetric_images() -> None:
    y, x = np.mgrid[-20:21, -20:21].astype(float)
    symmetric = np.exp(-(x**2 + 2 * y**2) / 50) + 0.3 * np.cos(x / 3 + y / 5)
    profile = symmetry.point_reflection_correlation(symmetric, mask_width=6)
    assert profile.best() == (20, 20)
    assert profile.rho[20, 20] == pytest.approx(1.0)
    antisymmetric = x * np.exp(-(x**2 + y**2) / 80)
    assert symmetry.point_reflection_correlation(antisymmetric).rho[20, 20] == pytest.approx(-1.0)


def test_lorentzian_refinement_recovers_subsample_peak() -> None:
    x = np.arange(41.0)
    rho = 0.9 / (1 + ((x - 20.3) / 3.0) ** 2)
    profile = CorrelationProfile(rho, np.ones_like(rho, dtype=bool))
    assert symmetry.refine_peak_lorentzian(profile, 20) == pytest.approx(20.3, abs=1e-3)
    with pytest.raises(PeakFitError):
        symmetry.refine_peak_lorentzian(profile, 1)


def test_affine_lattice_recovery() -> None:
    matrix = np.array([[1.05, 0.1], [-0.05, 0.95]])
    offset = np.array([0.1, -0.2])
    a, b = np.meshgrid(np.arange(-2, 3), np.arange(-2, 3), indexing="ij")
    lattice = 0.5 * np.column_stack([a.ravel(), b.ravel()])
    centers = np.linalg.solve(matrix, (lattice - offset).T).T
    fit = symmetry.fit_affine_lattice(centers)
    np.testing.assert_allclose(fit.matrix, matrix, atol=1e-6)
    np.testing.assert_allclose(fit.offset, offset, atol=1e-6)
    assert fit.residual < 1e-6
    np.testing.assert_allclose(fit.predict(lattice[:3]), centers[:3], atol=1e-6)


def test_affine_lattice_rejects_degenerate_geometry() -> None:
    with pytest.raises(InsufficientLatticeError):
        symmetry.fit_affine_lattice(np.array([[0.0, 0.0], [0.5, 0.0]]))
    with pytest.raises(RankDeficiencyError):
        symmetry.fit_affine_lattice(np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]))


def test_register_translation_of_a_circular_shift() -> None:
    image = _smooth_noise((64, 64), 1)
    shifted = np.roll(image, (3, -5), axis=(0, 1))
    found = symmetry.register_translation(image, shifted)
    assert found.shift == pytest.approx((3.0, -5.0), abs=0.1)
    assert found.confidence > 0.5


def test_register_translation_of_a_subpixel_shift() -> None:
    image = _smooth_noise((64, 64), 2, sigma=4.0)
    k1 = np.fft.fftfreq(64)[:, None]
    k2 = np.fft.fftfreq(64)[None, :]
    phase = np.exp(-2j * np.pi * (k1 * 2.4 - k2 * 1.3))
    moved = np.real(np.fft.ifft2(np.fft.fft2(image) * phase))
    found = symmetry.register_translation(image, moved)
    assert found.shift == pytest.approx((2.4, -1.3), abs=0.1)


def test_register_translation_refuses_unrelated_images() -> None:
    with pytest.raises(LowConfidenceError):
        symmetry.register_translation(
            _smooth_noise((64, 64), 3),
            _smooth_noise((64, 64), 4),
            floor=0.5,
        )


def test_symmetry_centers_of_a_periodic_pattern() -> None:
    y, x = np.mgrid[0:81, 0:81].astype(float)
    pattern = np.cos(2 * np.pi * x / 20) * np.cos(2 * np.pi * y / 20)
    rho = symmetry.point_reflection_correlation(pattern, mask_width=10)
    centers = symmetry.detect_symmetry_centers(rho, 10.0, pattern)
    assert len(centers) >= 3
    # centers sit every half period, on (10a, 10b) and (10a + 5, 10b + 5)
    np.testing.assert_allclose(np.mod(centers + 1.0, 5.0) - 1.0, 0.0, atol=0.3)
    diagonal = centers[:, 0] - centers[:, 1]
    np.testing.assert_allclose(np.mod(diagonal + 1.0, 10.0) - 1.0, 0.0, atol=0.3)


def test_dip_frequency_finds_the_notch() -> None:
    frequencies = np.linspace(37.0, 38.0, 101)
    trace = 1 - 0.8 / (1 + (2 * (frequencies - 37.4213) / 0.02) ** 2)
    image = TransmissionImage(
        ImageAxis("q1r", [0.0]),
        ImageAxis(FREQUENCY, frequencies),
        trace[None, :],
    )
    assert symmetry.dip_frequency(image, 0) == pytest.approx(37.4213, abs=2e-3)


def test_period_and_offset_on_a_simulated_resonator(linear_spec: DeviceSpec) -> None:
    device = SimulatedDevice(linear_spec)
    r = LoopIndex(1, "r").flat
    band = device.readout_band(1)
    step = 0.5 * device.linewidth(1)
    sweep = Sweep(
        ImageAxis("q1r", np.arange(-150, 151) / 100),
        ImageAxis(FREQUENCY, np.arange(band[0], band[1], step)),
        (r, None),
        np.zeros(3),
        "period",
    )
    found = symmetry.period_and_offset(device.measure(sweep), 1.0)
    coupling = linear_spec.C_true.C[r, r]
    assert found.period == pytest.approx(1 / coupling, abs=0.005)
    # zero flux on the resonator loop closest to zero volts
    expected = -linear_spec.f0_true.values[r] / coupling
    assert found.zero == pytest.approx(expected, abs=0.005)
    assert found.dip_frequencies[0] > found.dip_frequencies[1]


def _resonator_example(spec: DeviceSpec, low: float = -3.0, high: float = 3.0) -> TransmissionImage:
    """C_rr = 0.8 and f0_r = 0.3: a 1.25 V period with integer flux at -0.375 V."""
    matrix = np.array([[1.0, 0.05, 0.0], [0.03, 0.98, 0.0], [0.04, 0.02, 0.8]])
    example = replace(spec, C_true=CouplingMatrix(matrix), f0_true=FluxVector([0.1, -0.05, 0.3]))
    device = SimulatedDevice(example)
    band = device.readout_band(1)
    sweep = Sweep(
        ImageAxis("q1r", np.arange(round(low * 100), round(high * 100) + 1) / 100),
        ImageAxis(FREQUENCY, np.arange(band[0], band[1], 0.5 * device.linewidth(1))),
        (LoopIndex(1, "r").flat, None),
        np.zeros(3),
        "example",
    )
    return device.measure(sweep)


def test_period_and_offset_of_a_resonator_with_a_fractional_half_period(
    small_spec: DeviceSpec,
) -> None:
    found = symmetry.period_and_offset(_resonator_example(small_spec), 1.25)
    assert found.period == pytest.approx(1.25, abs=0.005 * 1.25)
    assert found.zero == pytest.approx(-0.375, abs=0.005 * 1.25)


def test_mirror_centers_mirror_only_the_bias_axis(small_spec: DeviceSpec) -> None:
    magnitude = symmetry.preprocess(_resonator_example(small_spec)).values
    radius, halfwidth = symmetry.mirror_window(125.0)
    # mirrors every 62.5 px starting from -1.625 V
    for centre in (137.5, 200.0, 262.5, 325.0):
        found = symmetry.locate_reflection_center(magnitude, centre, radius, halfwidth)
        assert found == pytest.approx(centre, abs=0.1)


def test_period_and_offset_do_not_depend_on_cropping(small_spec: DeviceSpec) -> None:
    full = symmetry.period_and_offset(_resonator_example(small_spec), 1.25)
    cropped = symmetry.period_and_offset(_resonator_example(small_spec, low=-2.4), 1.25)
    assert cropped.period == pytest.approx(full.period, abs=1e-3)
    assert cropped.zero == pytest.approx(full.zero, abs=1e-3)


def test_register_translation_is_antisymmetric() -> None:
    image = _smooth_noise((64, 64), 5, sigma=4.0)
    k1 = np.fft.fftfreq(64)[:, None]
    k2 = np.fft.fftfreq(64)[None, :]
    moved = np.real(np.fft.ifft2(np.fft.fft2(image) * np.exp(-2j * np.pi * (k1 * 1.7 + k2 * 0.6))))
    forward = symmetry.register_translation(image, moved)
    backward = symmetry.register_translation(moved, image)
    assert forward.shift == pytest.approx((1.7, 0.6), abs=0.05)
    np.testing.assert_allclose(np.add(forward.shift, backward.shift), 0.0, atol=1e-6)
    assert forward.confidence == pytest.approx(backward.confidence, abs=1e-3)
    assert forward.confidence > 0.9
