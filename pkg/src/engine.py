"""The four-stage crosstalk calibration, its iteration loop and the follow-up procedures.

Each iteration measures in its own control coordinates ``u``: raw voltages in the
first iteration, the previous estimate's fluxes afterwards. The iteration's result is
the affine map ``f = K u + g`` expressed as an :class:`IterationRecord`.
"""

from __future__ import annotations

import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import humanfriendly
import numpy as np
from scipy import stats

from src import constants, log, symmetry
from src.device import (
    FREQUENCY,
    ImageAxis,
    LinearTie,
    MeasurementBackend,
    SimulatedDevice,
    Sweep,
    TransmissionImage,
    derive_seed,
)
from src.errors import (
    ConfigError,
    ContractViolationError,
    ReplayError,
    SingularMatrixError,
    StageError,
    TranslationError,
)
from src.fluxmodel import (
    CalibrationEstimate,
    CouplingMatrix,
    FluxVector,
    IterationRecord,
    LoopIndex,
    UnitKind,
    periodic_step,
)

logger = log.get_logger(__name__)

__all__ = (
    "DriftEpoch",
    "EffectiveCellCalibration",
    "EngineSettings",
    "ErrorMatrix",
    "IterationOutcome",
    "IterationState",
    "OffsetShift",
    "RecordingBackend",
    "ReplayBackend",
    "ResamplingSpread",
    "StageReport",
    "drift_study",
    "error_characterization",
    "fast_offsets",
    "iteration_statistics",
    "locate_offsets",
    "noise_resampling_error",
    "offset_resampling_error",
    "run_calibration",
    "run_iteration",
    "stage1",
    "stage2",
    "stage3a",
    "stage3b",
    "stage4",
)

# (z', x) -> (z, x)
SHEAR = np.array([[1.0, 0.5], [0.0, 1.0]])
PARITIES: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: object, kind: type) -> object:
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        msg = f"expected a boolean, got {raw!r}"
        raise ValueError(msg)
    if kind is int:
        value = float(raw)
        if not value.is_integer():
            msg = f"expected an integer, got {raw!r}"
            raise ValueError(msg)
        return int(value)
    return kind(raw)


@dataclass(frozen=True)
class EngineSettings:
    """Per-run knobs of the calibration stages, defaulting to :mod:`src.constants`."""

    nominal_coupling: float = constants.Sweep.nominal_coupling
    first_periods: float = constants.Sweep.first_periods
    later_periods: float = constants.Sweep.later_periods
    scan_periods: float = constants.Sweep.scan_periods
    points_per_period: int = constants.Sweep.points_per_period
    scan_points_per_period: int = constants.Sweep.scan_points_per_period
    frequency_step: float = constants.Sweep.frequency_step
    source_settings: int = constants.Sweep.source_settings
    source_span: float = constants.Sweep.source_span
    offset_span: float = constants.Sweep.offset_span
    offset_scan_span: float = constants.Sweep.offset_scan_span
    offset_points_per_period: int = constants.Sweep.offset_points_per_period
    offset_scan_points_per_period: int = constants.Sweep.offset_scan_points_per_period
    median_window: int = constants.Analysis.median_window
    registration_window: bool = True
    skip_failed_cells: bool = False

    def __post_init__(self) -> None:
        if self.nominal_coupling <= 0:
            msg = "nominal coupling must be positive"
            raise ContractViolationError(msg)
        if self.source_settings < 3:  # noqa: PLR2004
            msg = "slope fits need at least 3 source settings"
            raise ContractViolationError(msg)
        if min(self.first_periods, self.later_periods) < 2:  # noqa: PLR2004
            msg = "resonator sweeps must cover at least two periods"
            raise ContractViolationError(msg)
        if min(self.points_per_period, self.scan_points_per_period) < 16:  # noqa: PLR2004
            msg = "sweeps need at least 16 points per period"
            raise ContractViolationError(msg)

    def with_overrides(self, overrides: Mapping[str, object]) -> EngineSettings:
        """Return a copy with ``KEY=VALUE`` overrides applied, type-checked per field."""
        hints = typing.get_type_hints(EngineSettings)
        changes: dict[str, object] = {}
        for key, raw in overrides.items():
            if key not in hints:
                known = ", ".join(f.name for f in fields(self))
                raise ConfigError("--stage-override", f"unknown setting {key!r} (known: {known})")
            try:
                changes[key] = _coerce(raw, hints[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError("--stage-override", f"{key}: {exc}") from exc
        return replace(self, **changes)


@dataclass
class StageReport:
    """What one stage measured and concluded, traceable to its image artifacts."""

    stage: str
    iteration: int
    cell: int | None
    source: str | None = None
    estimates: dict[str, float] = field(default_factory=dict)
    errors: dict[str, float] = field(default_factory=dict)
    extractions: dict[str, list[float]] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    notes: dict[str, Any] = field(default_factory=dict)
    points: int = 0
    duration: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EffectiveCellCalibration:
    """Effective 2x2 relation of a cell's element loops with the resonator held at zero flux."""

    cell: int
    Ceff: np.ndarray  # noqa: N815
    f0eff: np.ndarray
    residual: float
    origin_parity: tuple[int, int] = (0, 0)
    probe: float = 0.0
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self) -> None:
        matrix = np.asarray(self.Ceff, dtype=float)
        if matrix.shape != (2, 2):
            msg = f"effective matrix must be 2x2, got {matrix.shape}"
            raise ContractViolationError(msg)
        condition = float(np.linalg.cond(matrix))
        if not np.isfinite(condition) or condition > constants.Convergence.condition_limit:
            raise SingularMatrixError(f"effective matrix of cell {self.cell}", condition)
        object.__setattr__(self, "Ceff", matrix)
        object.__setattr__(self, "f0eff", np.asarray(self.f0eff, dtype=float))


@dataclass(frozen=True)
class ErrorMatrix:
    """Residual crosstalk ``Theta[i, j]`` in mPhi0/Phi0; the diagonal is zero."""

    Theta: np.ndarray  # noqa: N815
    steps: tuple[int, ...]
    labels: tuple[str, ...]
    reports: tuple[StageReport, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        theta = np.array(self.Theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:  # noqa: PLR2004
            msg = "error matrix must be square"
            raise ContractViolationError(msg)
        if not np.all(np.isfinite(theta)):
            msg = "error matrix has non-finite entries"
            raise ContractViolationError(msg)
        np.fill_diagonal(theta, 0.0)
        object.__setattr__(self, "Theta", theta)

    @property
    def off_diagonal(self) -> np.ndarray:
        return self.Theta[~np.eye(self.Theta.shape[0], dtype=bool)]

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.off_diagonal**2))) if self.off_diagonal.size else 0.0

    @property
    def max(self) -> float:
        return float(np.max(np.abs(self.off_diagonal))) if self.off_diagonal.size else 0.0


@dataclass(frozen=True)
class IterationOutcome:
    """Result of :func:`run_iteration`."""

    record: IterationRecord
    estimate: CalibrationEstimate
    reports: tuple[StageReport, ...]
    effective: dict[int, EffectiveCellCalibration]
    images: dict[str, TransmissionImage] = field(default_factory=dict, repr=False)
    duration: float = 0.0

    @property
    def points(self) -> int:
        return sum(report.points for report in self.reports)


def _frequency_axis(backend: MeasurementBackend, cell: int, settings: EngineSettings) -> ImageAxis:
    low, high = backend.readout_band(cell)
    step = settings.frequency_step * backend.linewidth(cell)
    return ImageAxis(FREQUENCY, np.arange(low, high + step / 2, step), "rad/ns")


def _measure(
    backend: MeasurementBackend,
    sweep: Sweep,
    estimate: CalibrationEstimate | None,
    report: StageReport,
) -> TransmissionImage:
    image = backend.measure(sweep, estimate)
    report.points += image.points
    report.artifacts.append(sweep.artifact_id)
    return image


def _spectrum_dip(
    backend: MeasurementBackend,
    estimate: CalibrationEstimate | None,
    settings: EngineSettings,
    cell: int,
    base: np.ndarray,
    ties: tuple[LinearTie, ...],
    artifact_id: str,
    report: StageReport,
) -> float:
    """Resonance frequency of ``cell`` at a single bias point."""
    z = LoopIndex(cell, "z").flat
    labels = backend.labels
    sweep = Sweep(
        ImageAxis(labels[z], [base[z]]),
        _frequency_axis(backend, cell, settings),
        (z, None),
        base,
        artifact_id,
        ties=ties,
        coordinates="voltage" if estimate is None else "flux",
    )
    image = _measure(backend, sweep, estimate, report)
    return symmetry.dip_frequency(image, 0)


class IterationState:
    """Working matrix and per-cell references of one calibration iteration.

    Parameters
    ----------
    backend : MeasurementBackend
        The device.
    previous : CalibrationEstimate | None
        Estimate whose fluxes are the control coordinates; ``None`` sweeps voltages.
    settings : EngineSettings
        Sweep and analysis knobs.
    skip : Iterable[int]
        Cells not calibrated as targets.
    """

    def __init__(
        self,
        backend: MeasurementBackend,
        previous: CalibrationEstimate | None,
        settings: EngineSettings,
        skip: Iterable[int] = (),
    ) -> None:
        self.backend = backend
        self.previous = previous
        self.settings = settings
        self.first = previous is None
        self.n = 1 if previous is None else previous.iterations + 1
        self.labels = list(backend.labels)
        self.size = len(self.labels)
        self.cells = backend.n_cells
        if previous is not None and previous.n != self.size:
            msg = f"estimate has {previous.n} loops, device has {self.size}"
            raise ContractViolationError(msg)

        self.period_guess = 1 / settings.nominal_coupling if self.first else 1.0
        self.identity_scale = settings.nominal_coupling if self.first else 1.0
        self.K = np.eye(self.size) * self.identity_scale
        self.g = np.zeros(self.size)
        self.skipped: set[int] = set(skip)
        self.reports: list[StageReport] = []
        self.effective: dict[int, EffectiveCellCalibration] = {}
        self.images: dict[str, TransmissionImage] = {}
        self.resonator_refs: dict[int, tuple[TransmissionImage, symmetry.PeriodOffset, float]] = {}
        self.scan_refs: dict[int, TransmissionImage] = {}

    @property
    def coordinates(self) -> str:
        return "voltage" if self.first else "flux"

    def artifact(self, *parts: object) -> str:
        return "-".join([f"it{self.n}", *(str(part) for part in parts)])

    def open_report(self, stage: str, cell: int, source: int | None = None) -> StageReport:
        report = StageReport(
            stage=stage,
            iteration=self.n,
            cell=cell,
            source=None if source is None else self.labels[source],
        )
        self.reports.append(report)
        return report

    def measure(self, sweep: Sweep, report: StageReport) -> TransmissionImage:
        return _measure(self.backend, sweep, self.previous, report)

    def grid(self, periods: float, points_per_period: int) -> np.ndarray:
        step = self.period_guess / points_per_period
        half = int(round(periods * points_per_period / 2))
        return step * np.arange(-half, half + 1)

    def source_settings(self, source: int) -> np.ndarray:
        count = self.settings.source_settings
        if self.first:
            span = self.settings.source_span * self.period_guess
            return np.linspace(-span, span, count)
        return periodic_step(LoopIndex.from_flat(source)) * (np.arange(count) - count // 2)

    def resonator_tie(self, cell: int, target: float) -> LinearTie:
        """Hold the cell's resonator at ``target`` estimated flux while other lines move."""
        r = LoopIndex(cell, "r").flat
        diagonal = self.K[r, r]
        weights = -self.K[r] / diagonal
        weights[r] = 0.0
        return LinearTie(r, weights, (target - self.g[r]) / diagonal)

    def resonator_sweep(self, cell: int, base: np.ndarray, artifact_id: str) -> Sweep:
        r = LoopIndex(cell, "r").flat
        periods = self.settings.first_periods if self.first else self.settings.later_periods
        return Sweep(
            ImageAxis(self.labels[r], self.grid(periods, self.settings.points_per_period)),
            _frequency_axis(self.backend, cell, self.settings),
            (r, None),
            base,
            artifact_id,
            coordinates=self.coordinates,
        )

    def element_scan(
        self,
        cell: int,
        base: np.ndarray,
        probe: float,
        target: float,
        artifact_id: str,
    ) -> Sweep:
        z = LoopIndex(cell, "z").flat
        x = LoopIndex(cell, "x").flat
        grid = self.grid(self.settings.scan_periods, self.settings.scan_points_per_period)
        return Sweep(
            ImageAxis(self.labels[z], grid),
            ImageAxis(self.labels[x], grid),
            (z, x),
            base,
            artifact_id,
            probe=probe,
            ties=(self.resonator_tie(cell, target),),
            coordinates=self.coordinates,
        )

    def resonator_reference(self, cell: int) -> tuple[TransmissionImage, symmetry.PeriodOffset, float]:
        if cell not in self.resonator_refs:
            msg = f"stage 1 has not run for cell {cell}"
            raise ContractViolationError(msg)
        return self.resonator_refs[cell]

    def scan_reference(self, cell: int) -> tuple[EffectiveCellCalibration, TransmissionImage]:
        if cell not in self.effective:
            msg = f"stage 3(a) has not run for cell {cell}"
            raise ContractViolationError(msg)
        return self.effective[cell], self.scan_refs[cell]

    def reset_cell(self, cell: int) -> None:
        """Carry ``cell`` with identity rows and flag it as skipped."""
        rows = [LoopIndex(cell, kind).flat for kind in ("z", "x", "r")]
        self.K[rows] = 0.0
        self.K[rows, rows] = self.identity_scale
        self.g[rows] = 0.0
        self.skipped.add(cell)
        self.effective.pop(cell, None)

    def attempt(self, cell: int, work: Callable[[], object]) -> None:
        if cell in self.skipped:
            return
        try:
            work()
        except StageError as exc:
            if not self.settings.skip_failed_cells:
                raise
            logger.warning(f"Cell {cell} failed ({exc}); it stays uncalibrated this iteration")
            self.reset_cell(cell)

    def record(self) -> IterationRecord:
        unit = UnitKind.VOLT if self.first else UnitKind.FLUX
        return IterationRecord(
            self.n,
            CouplingMatrix(self.K.copy(), unit=unit),
            FluxVector(self.g.copy()),
            skipped=tuple(sorted(self.skipped)),
        )


def _timed(report: StageReport, started: float) -> None:
    report.duration = time.perf_counter() - started


def stage1(state: IterationState, cell: int) -> tuple[float, float, StageReport]:
    """Resonator period and zero-flux bias: ``C'_rr = 1 / P`` and ``f0'_r = -V* / P``."""
    started = time.perf_counter()
    report = state.open_report("1", cell)
    r = LoopIndex(cell, "r").flat
    sweep = state.resonator_sweep(cell, np.zeros(state.size), state.artifact(f"c{cell}", "s1"))
    image = state.measure(sweep, report)
    found = symmetry.period_and_offset(
        image,
        state.period_guess,
        median_window=state.settings.median_window,
    )

    coupling = 1 / found.period
    offset = -found.zero / found.period
    state.K[r, r] = coupling
    state.g[r] = offset

    clean = symmetry.preprocess(image, state.settings.median_window)
    radius, halfwidth = symmetry.mirror_window(found.period_px)
    centre = symmetry.locate_reflection_center(clean.values, found.zero_px, radius, halfwidth)
    state.resonator_refs[cell] = (clean, found, centre)
    state.images[sweep.artifact_id] = image

    label = state.labels[r]
    report.estimates = {f"C[{label},{label}]": coupling, f"f0[{label}]": offset}
    report.extractions = {"period": [found.period], "zero": [found.zero]}
    report.notes = {"dip_frequencies": list(found.dip_frequencies), "centers": len(found.centers_px)}
    _timed(report, started)
    logger.info(
        f"[it{state.n} c{cell} stage 1] C'{label} = {coupling:.6f}, f0'{label} = {offset:+.6f} "
        f"({humanfriendly.format_timespan(report.duration)})",
    )
    return coupling, offset, report


def stage2(state: IterationState, cell: int, source: int) -> tuple[float, StageReport]:
    """Crosstalk of ``source`` into the resonator loop from translations of its mirror center."""
    started = time.perf_counter()
    r = LoopIndex(cell, "r").flat
    if source == r:
        msg = "the resonator line is not a stage 2 source"
        raise ContractViolationError(msg)
    reference, found, centre = state.resonator_reference(cell)
    report = state.open_report("2", cell, source)
    radius, halfwidth = symmetry.mirror_window(found.period_px)
    period_px = found.period_px

    settings = state.source_settings(source)
    shifts = []
    for index, setting in enumerate(settings):
        base = np.zeros(state.size)
        base[source] = setting
        artifact_id = state.artifact(f"c{cell}", "s2", state.labels[source], index)
        image = state.measure(state.resonator_sweep(cell, base, artifact_id), report)
        clean = symmetry.preprocess(image, state.settings.median_window)
        try:
            lines = symmetry.detect_lines(
                symmetry.recurrence_plot(reference.values, clean.values),
                (-period_px / 2, period_px / 2),
            )
        except StageError as exc:
            msg = f"no translation between {artifact_id} and the stage 1 image"
            raise TranslationError(msg) from exc
        moved = symmetry.locate_reflection_center(
            clean.values,
            centre + lines[0].position,
            radius,
            halfwidth,
        )
        shifts.append((moved - centre) * image.axis1.step)

    fit = stats.linregress(settings, shifts)
    diagonal = state.K[r, r]
    value = -diagonal * fit.slope
    state.K[r, source] = value

    key = f"C[{state.labels[r]},{state.labels[source]}]"
    report.estimates = {key: float(value)}
    report.errors = {key: float(abs(diagonal) * fit.stderr)}
    report.extractions = {"settings": [float(s) for s in settings], "shifts": [float(s) for s in shifts]}
    _timed(report, started)
    logger.debug(f"[it{state.n} c{cell} stage 2] {key} = {value:+.6f} +/- {report.errors[key]:.2e}")
    return float(value), report


def _class_representative(lattice: symmetry.SymmetryLattice, parity: tuple[int, int]) -> np.ndarray:
    steps = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float)
    candidates = 0.5 * (np.asarray(parity, dtype=float) + 2 * steps)
    candidates = candidates + np.round(lattice.offset - 0.5 * np.asarray(parity))
    return candidates[np.argmin(np.linalg.norm(candidates - lattice.offset, axis=1))]


def stage3a(state: IterationState, cell: int) -> EffectiveCellCalibration:
    """Effective 2x2 matrix and offsets of the element loops from the point-reflection lattice.

    The resonator is held at zero estimated flux. The lattice origin is the parity class
    whose centers show the highest resonator frequency.
    """
    started = time.perf_counter()
    report = state.open_report("3a", cell)
    z = LoopIndex(cell, "z").flat
    x = LoopIndex(cell, "x").flat
    tie = (state.resonator_tie(cell, 0.0),)

    origin = np.zeros(state.size)
    dip = _spectrum_dip(
        state.backend,
        state.previous,
        state.settings,
        cell,
        origin,
        tie,
        state.artifact(f"c{cell}", "s3a", "probe"),
        report,
    )
    probe = dip - state.backend.linewidth(cell) / 2

    sweep = state.element_scan(cell, origin, probe, 0.0, state.artifact(f"c{cell}", "s3a"))
    image = state.measure(sweep, report)
    spacing_px = 0.5 * state.period_guess / image.axis1.step
    rho = symmetry.point_reflection_correlation(image, mask_width=spacing_px)
    symmetry.dump_map(f"point_reflection_{sweep.artifact_id}", rho.rho)
    centres_px = symmetry.detect_symmetry_centers(rho, spacing_px, image=image)
    centres = np.column_stack(
        [image.axis1.at(centres_px[:, 0]), image.axis2.at(centres_px[:, 1])],
    )

    prior = np.linalg.inv(SHEAR) * (state.settings.nominal_coupling if state.first else 1.0)
    lattice = symmetry.fit_affine_lattice(centres, prior=(prior, np.zeros(2)))

    dips: dict[tuple[int, int], float] = {}
    for parity in PARITIES:
        point = lattice.predict(_class_representative(lattice, parity))[0]
        base = np.zeros(state.size)
        base[z], base[x] = point
        dips[parity] = _spectrum_dip(
            state.backend,
            state.previous,
            state.settings,
            cell,
            base,
            tie,
            state.artifact(f"c{cell}", "s3a", f"class{parity[0]}{parity[1]}"),
            report,
        )
    parity = max(PARITIES, key=lambda p: dips[p])
    offset = lattice.offset - 0.5 * np.asarray(parity, dtype=float)
    offset = offset - np.round(offset)

    effective = EffectiveCellCalibration(
        cell=cell,
        Ceff=SHEAR @ lattice.matrix,
        f0eff=SHEAR @ offset,
        residual=lattice.residual,
        origin_parity=parity,
        probe=probe,
        centers=lattice.centers,
    )
    state.effective[cell] = effective
    state.scan_refs[cell] = image
    state.images[sweep.artifact_id] = image

    lz, lx = state.labels[z], state.labels[x]
    report.estimates = {
        f"Ceff[{lz},{lz}]": float(effective.Ceff[0, 0]),
        f"Ceff[{lz},{lx}]": float(effective.Ceff[0, 1]),
        f"Ceff[{lx},{lz}]": float(effective.Ceff[1, 0]),
        f"Ceff[{lx},{lx}]": float(effective.Ceff[1, 1]),
        f"f0eff[{lz}]": float(effective.f0eff[0]),
        f"f0eff[{lx}]": float(effective.f0eff[1]),
    }
    report.errors = {"lattice_residual": lattice.residual}
    report.extractions = {
        "centers_z": [float(c) for c in lattice.centers[:, 0]],
        "centers_x": [float(c) for c in lattice.centers[:, 1]],
    }
    report.notes = {
        "probe": probe,
        "origin_parity": list(parity),
        "class_dips": {f"{p[0]}{p[1]}": value for p, value in dips.items()},
    }
    _timed(report, started)
    logger.info(
        f"[it{state.n} c{cell} stage 3a] {len(centres)} centers, residual {lattice.residual:.2e}, "
        f"origin class {parity} ({humanfriendly.format_timespan(report.duration)})",
    )
    return effective


def _slopes(settings: Sequence[float], shifts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fits = [stats.linregress(settings, shifts[:, axis]) for axis in range(shifts.shape[1])]
    return np.array([fit.slope for fit in fits]), np.array([fit.stderr for fit in fits])


def _shift(state: IterationState, reference: TransmissionImage, image: TransmissionImage) -> np.ndarray:
    moved = symmetry.register_translation(
        reference,
        image,
        window=state.settings.registration_window,
    )
    return np.array(moved.shift) * np.array([image.axis1.step, image.axis2.step])


def stage3b(state: IterationState, cell: int) -> tuple[np.ndarray, np.ndarray, StageReport]:
    """Resonator-to-element crosstalk, then the full 3x3 intra-cell block and offsets.

    Returns the block (rows and columns ordered ``z, x, r``) and the ``(z, x)`` offsets.
    """
    started = time.perf_counter()
    effective, reference = state.scan_reference(cell)
    report = state.open_report("3b", cell)
    z, x, r = (LoopIndex(cell, kind).flat for kind in ("z", "x", "r"))

    targets = np.array([-1.0, 0.0, 1.0])
    shifts = np.zeros((3, 2))
    for row, target in enumerate(targets):
        if target == 0:
            continue
        name = "m1" if target < 0 else "p1"
        sweep = state.element_scan(
            cell,
            np.zeros(state.size),
            effective.probe,
            float(target),
            state.artifact(f"c{cell}", "s3b", name),
        )
        shifts[row] = _shift(state, reference, state.measure(sweep, report))

    slope, stderr = _slopes(targets, shifts)
    diagonal = state.K[r, r]
    column = diagonal * effective.Ceff @ (-slope)
    column_error = abs(diagonal) * np.abs(effective.Ceff) @ stderr
    state.K[z, r], state.K[x, r] = column

    pair = [z, x]
    block = effective.Ceff + np.outer(column / diagonal, state.K[r, pair])
    state.K[np.ix_(pair, pair)] = block
    offsets = effective.f0eff + column * state.g[r] / diagonal
    state.g[pair] = offsets

    lz, lx, lr = state.labels[z], state.labels[x], state.labels[r]
    report.estimates = {
        f"C[{lz},{lr}]": float(column[0]),
        f"C[{lx},{lr}]": float(column[1]),
        f"C[{lz},{lz}]": float(block[0, 0]),
        f"C[{lz},{lx}]": float(block[0, 1]),
        f"C[{lx},{lz}]": float(block[1, 0]),
        f"C[{lx},{lx}]": float(block[1, 1]),
        f"f0[{lz}]": float(offsets[0]),
        f"f0[{lx}]": float(offsets[1]),
    }
    report.errors = {f"C[{lz},{lr}]": float(column_error[0]), f"C[{lx},{lr}]": float(column_error[1])}
    report.extractions = {
        "targets": targets.tolist(),
        "shift_z": shifts[:, 0].tolist(),
        "shift_x": shifts[:, 1].tolist(),
    }
    _timed(report, started)
    logger.info(
        f"[it{state.n} c{cell} stage 3b] C'{lz},{lr} = {column[0]:+.5f}, C'{lx},{lr} = {column[1]:+.5f}",
    )
    indices = [z, x, r]
    return state.K[np.ix_(indices, indices)].copy(), offsets, report


def stage4(state: IterationState, cell: int, source: int) -> tuple[np.ndarray, StageReport]:
    """Crosstalk of a line from another cell into the element loops of ``cell``."""
    started = time.perf_counter()
    effective, reference = state.scan_reference(cell)
    z, x, r = (LoopIndex(cell, kind).flat for kind in ("z", "x", "r"))
    if LoopIndex.from_flat(source).cell == cell:
        msg = "stage 4 sources belong to other cells"
        raise ContractViolationError(msg)
    report = state.open_report("4", cell, source)

    settings = state.source_settings(source)
    shifts = np.zeros((settings.size, 2))
    for index, setting in enumerate(settings):
        base = np.zeros(state.size)
        base[source] = setting
        sweep = state.element_scan(
            cell,
            base,
            effective.probe,
            0.0,
            state.artifact(f"c{cell}", "s4", state.labels[source], index),
        )
        shifts[index] = _shift(state, reference, state.measure(sweep, report))

    slope, stderr = _slopes(settings, shifts)
    diagonal = state.K[r, r]
    pair = [z, x]
    value = effective.Ceff @ (-slope) + state.K[pair, r] * state.K[r, source] / diagonal
    state.K[pair, source] = value

    lz, lx, ls = state.labels[z], state.labels[x], state.labels[source]
    errors = np.abs(effective.Ceff) @ stderr
    report.estimates = {f"C[{lz},{ls}]": float(value[0]), f"C[{lx},{ls}]": float(value[1])}
    report.errors = {f"C[{lz},{ls}]": float(errors[0]), f"C[{lx},{ls}]": float(errors[1])}
    report.extractions = {
        "settings": settings.tolist(),
        "shift_z": shifts[:, 0].tolist(),
        "shift_x": shifts[:, 1].tolist(),
    }
    _timed(report, started)
    logger.debug(f"[it{state.n} c{cell} stage 4] {ls} -> ({value[0]:+.5f}, {value[1]:+.5f})")
    return value, report


def run_iteration(
    backend: MeasurementBackend,
    previous: CalibrationEstimate | None = None,
    settings: EngineSettings | None = None,
    skip: Iterable[int] = (),
) -> IterationOutcome:
    """Run stages 1-4 for every cell and return the iteration's record and composite estimate.

    Stage 1 runs for all cells before stage 2, and so on. Cells in ``skip`` are not
    targets: their rows stay identity and they are flagged in the record.
    """
    settings = settings or EngineSettings()
    state = IterationState(backend, previous, settings, skip)
    started = time.perf_counter()
    points = backend.points
    logger.info(
        f"Iteration {state.n}: {state.cells} cell(s) in {state.coordinates} coordinates"
        + (f", skipping {sorted(state.skipped)}" if state.skipped else ""),
    )

    targets = [cell for cell in range(1, state.cells + 1) if cell not in state.skipped]
    for cell in targets:
        state.attempt(cell, lambda cell=cell: stage1(state, cell))
    for cell in targets:
        r = LoopIndex(cell, "r").flat
        for source in range(state.size):
            if source != r:
                state.attempt(cell, lambda cell=cell, source=source: stage2(state, cell, source))
    for cell in targets:
        state.attempt(cell, lambda cell=cell: stage3a(state, cell))
        state.attempt(cell, lambda cell=cell: stage3b(state, cell))
    for cell in targets:
        for source in range(state.size):
            if LoopIndex.from_flat(source).cell != cell:
                state.attempt(cell, lambda cell=cell, source=source: stage4(state, cell, source))

    record = state.record()
    estimate = (
        CalibrationEstimate.from_history((record,)) if previous is None else previous.append(record)
    )
    outcome = IterationOutcome(
        record,
        estimate,
        tuple(state.reports),
        dict(state.effective),
        dict(state.images),
        time.perf_counter() - started,
    )
    if backend.points - points != outcome.points:
        msg = f"measured {backend.points - points} points but reports account for {outcome.points}"
        raise ContractViolationError(msg)
    logger.info(
        f"Iteration {state.n} done: {outcome.points} points in "
        f"{humanfriendly.format_timespan(outcome.duration)}",
    )
    return outcome


def _max_off_diagonal(record: IterationRecord) -> float:
    values = record.C_n.off_diagonal()
    return float(np.max(np.abs(values))) if values.size else 0.0


def run_calibration(
    backend: MeasurementBackend,
    iterations: int = constants.Convergence.iterations,
    stop_threshold: float | None = None,
    settings: EngineSettings | None = None,
    skip: Iterable[int] = (),
    previous: CalibrationEstimate | None = None,
    on_iteration: Callable[[IterationOutcome], None] | None = None,
) -> tuple[CalibrationEstimate, list[IterationOutcome]]:
    """Iterate :func:`run_iteration`, optionally stopping once corrections are small.

    The stop rule applies from the second iteration on: when the largest off-diagonal
    entry of the latest ``C^(n)'`` is below ``stop_threshold`` (Phi0/Phi0).
    ``on_iteration`` sees every outcome as soon as it exists.
    """
    if iterations < 1:
        msg = "at least one iteration is required"
        raise ContractViolationError(msg)
    outcomes: list[IterationOutcome] = []
    estimate = previous
    for _ in range(iterations):
        outcome = run_iteration(backend, estimate, settings, skip)
        outcomes.append(outcome)
        estimate = outcome.estimate
        if on_iteration is not None:
            on_iteration(outcome)
        if (
            stop_threshold is not None
            and outcome.record.C_n.unit is UnitKind.FLUX
            and _max_off_diagonal(outcome.record) < stop_threshold
        ):
            logger.info(
                f"Stopping after iteration {outcome.record.n}: largest correction "
                f"{_max_off_diagonal(outcome.record) * 1e3:.3f} mPhi0/Phi0",
            )
            break
    assert estimate is not None  # noqa: S101
    return estimate, outcomes


def iteration_statistics(history: Sequence[IterationRecord]) -> list[dict[str, float]]:
    """Per-iteration quantiles of diagonal deviations, off-diagonals and offsets.

    Dimensionless iterations are reported in mPhi0/Phi0 and mPhi0.
    """
    rows = []
    for record in history:
        scale = 1.0 if record.C_n.unit is UnitKind.VOLT else 1e3
        diagonal = np.diag(record.C_n.C)
        if record.C_n.unit is UnitKind.FLUX:
            diagonal = diagonal - 1.0
        off = np.abs(record.C_n.off_diagonal()) * scale
        offsets = np.abs(record.f0_n.values) * scale
        rows.append(
            {
                "iteration": record.n,
                "diagonal_median": float(np.median(np.abs(diagonal)) * scale),
                "off_median": float(np.median(off)) if off.size else 0.0,
                "off_p90": float(np.percentile(off, 90)) if off.size else 0.0,
                "off_max": float(np.max(off)) if off.size else 0.0,
                "offset_median": float(np.median(offsets)),
                "skipped": len(record.skipped),
            },
        )
    return rows


@dataclass(frozen=True)
class OffsetShift:
    """Result of :func:`fast_offsets`: the updated estimate and the applied shift."""

    estimate: CalibrationEstimate
    shift: FluxVector
    reports: tuple[StageReport, ...]


def _cell_centres(
    backend: MeasurementBackend,
    estimate: CalibrationEstimate,
    settings: EngineSettings,
    cell: int,
    base: np.ndarray,
    prefix: str,
    report: StageReport,
) -> np.ndarray:
    """Zero-flux point of one cell's ``(z, x, r)`` loops in estimated flux, near ``base``."""
    z, x, r = (LoopIndex(cell, kind).flat for kind in ("z", "x", "r"))
    labels = backend.labels

    ppp = settings.offset_points_per_period
    half = int(round(settings.offset_span * ppp))
    sweep = Sweep(
        ImageAxis(labels[r], base[r] + np.arange(-half, half + 1) / ppp),
        _frequency_axis(backend, cell, settings),
        (r, None),
        base,
        f"{prefix}-c{cell}-r",
        coordinates="flux",
    )
    found = symmetry.period_and_offset(
        _measure(backend, sweep, estimate, report),
        1.0,
        origin=float(base[r]),
        median_window=settings.median_window,
    )

    point = np.array(base, dtype=float)
    point[r] = found.zero
    dip = _spectrum_dip(backend, estimate, settings, cell, point, (), f"{prefix}-c{cell}-probe", report)
    probe = dip - backend.linewidth(cell) / 2

    ppp = settings.offset_scan_points_per_period
    half = int(round(settings.offset_scan_span * ppp))
    offsets = np.arange(-half, half + 1) / ppp
    scan = Sweep(
        ImageAxis(labels[z], base[z] + offsets),
        ImageAxis(labels[x], base[x] + offsets),
        (z, x),
        point,
        f"{prefix}-c{cell}-zx",
        probe=probe,
        coordinates="flux",
    )
    image = _measure(backend, scan, estimate, report)
    rho = symmetry.point_reflection_correlation(image, mask_width=ppp / 4)
    radius = max(2, int(ppp / 8))
    window = np.full(rho.rho.shape, -np.inf)
    window[half - radius : half + radius + 1, half - radius : half + radius + 1] = 0.0
    guess = np.unravel_index(
        int(np.argmax(np.where(rho.valid, rho.rho, -np.inf) + window)),
        rho.rho.shape,
    )
    centre_px = symmetry.locate_symmetry_center(image, guess, ppp / 4)
    return np.array(
        [image.axis1.at(centre_px[0]), image.axis2.at(centre_px[1]), found.zero],
    )


def locate_offsets(
    backend: MeasurementBackend,
    estimate: CalibrationEstimate,
    base: np.ndarray | None = None,
    settings: EngineSettings | None = None,
    prefix: str = "offsets",
    skip: Iterable[int] = (),
) -> tuple[np.ndarray, list[StageReport]]:
    """Zero-flux points of every calibrated cell near ``base``, in estimated flux.

    Entries of skipped cells equal ``base``.
    """
    settings = settings or EngineSettings()
    labels = backend.labels
    base = np.zeros(len(labels)) if base is None else np.asarray(base, dtype=float)
    centres = np.array(base, dtype=float)
    reports = []
    skipped = set(skip)
    for cell in range(1, backend.n_cells + 1):
        if cell in skipped:
            continue
        started = time.perf_counter()
        report = StageReport("offsets", estimate.iterations, cell)
        found = _cell_centres(backend, estimate, settings, cell, base, prefix, report)
        rows = [LoopIndex(cell, kind).flat for kind in ("z", "x", "r")]
        centres[rows] = found
        report.extractions = {labels[row]: [float(value)] for row, value in zip(rows, found)}
        _timed(report, started)
        reports.append(report)
    return centres, reports


def fast_offsets(
    backend: MeasurementBackend,
    estimate: CalibrationEstimate,
    settings: EngineSettings | None = None,
    repeats: int = 1,
    skip: Iterable[int] = (),
    prefix: str = "offsets",
) -> OffsetShift:
    """Recalibrate offsets from the mirror and point-reflection centers near zero flux.

    The located centers ``f'*`` update ``f0' <- f0' - f'*``; the procedure can repeat.
    """
    if repeats < 1:
        msg = "repeats must be positive"
        raise ContractViolationError(msg)
    skip = tuple(skip)
    total = np.zeros(estimate.n)
    reports: list[StageReport] = []
    for repeat in range(repeats):
        shift, found = locate_offsets(
            backend,
            estimate,
            settings=settings,
            prefix=f"{prefix}{repeat + 1}",
            skip=skip,
        )
        for report in found:
            report.estimates = {
                f"shift[{backend.labels[LoopIndex(report.cell, kind).flat]}]": float(
                    shift[LoopIndex(report.cell, kind).flat],
                )
                for kind in ("z", "x", "r")
            }
        reports.extend(found)
        estimate = estimate.with_offset_update(FluxVector(shift))
        total += shift
        logger.info(
            f"Offset update {repeat + 1}/{repeats}: RMS shift {np.sqrt(np.mean(shift**2)) * 1e3:.3f} "
            f"mPhi0, max {np.max(np.abs(shift)) * 1e3:.3f} mPhi0",
        )
    return OffsetShift(estimate, FluxVector(total), tuple(reports))


def error_characterization(
    backend: MeasurementBackend,
    estimate: CalibrationEstimate,
    steps: Sequence[int] = constants.Sweep.error_steps,
    settings: EngineSettings | None = None,
    skip: Iterable[int] = (),
) -> ErrorMatrix:
    """Apparent offset change of every loop per commanded flux step on every other loop.

    Steps are whole multiples of each source's periodic step so the commanded change
    leaves the circuit itself unchanged.
    """
    if not steps or any(int(step) != step or step == 0 for step in steps):
        msg = f"error steps must be non-zero integers, got {steps}"
        raise ContractViolationError(msg)
    settings = settings or EngineSettings()
    skip = tuple(skip)
    size = estimate.n
    baseline, reports = locate_offsets(backend, estimate, settings=settings, prefix="theta-base", skip=skip)

    theta = np.zeros((size, size))
    for source in range(size):
        label = backend.labels[source]
        for step in steps:
            delta = step * periodic_step(LoopIndex.from_flat(source))
            base = np.zeros(size)
            base[source] = delta
            centres, found = locate_offsets(
                backend,
                estimate,
                base,
                settings,
                prefix=f"theta-{label}-{step}",
                skip=skip,
            )
            reports.extend(found)
            theta[:, source] -= (centres - base - baseline) / delta * 1e3 / len(steps)
        logger.debug(f"Theta column {label}: max {np.max(np.abs(theta[:, source])):.3f} mPhi0/Phi0")
    for cell in skip:
        theta[[LoopIndex(cell, kind).flat for kind in ("z", "x", "r")]] = 0.0

    errors = ErrorMatrix(theta, tuple(int(s) for s in steps), tuple(backend.labels), tuple(reports))
    logger.info(f"Theta: RMS {errors.rms:.3f} mPhi0/Phi0, max {errors.max:.3f} mPhi0/Phi0")
    return errors


class RecordingBackend:
    """Pass-through backend keeping every measured image by artifact id."""

    def __init__(self, backend: MeasurementBackend) -> None:
        self.backend = backend
        self.stateless = backend.stateless
        self.points = 0
        self.images: dict[str, TransmissionImage] = {}
        self._bands: dict[int, tuple[float, float]] = {}
        self._linewidths: dict[int, float] = {}

    @property
    def n_cells(self) -> int:
        return self.backend.n_cells

    @property
    def labels(self) -> list[str]:
        return self.backend.labels

    def measure(self, sweep: Sweep, estimate: CalibrationEstimate | None = None) -> TransmissionImage:
        image = self.backend.measure(sweep, estimate)
        self.points += image.points
        self.images[sweep.artifact_id] = image
        return image

    def readout_band(self, cell: int) -> tuple[float, float]:
        self._bands[cell] = self.backend.readout_band(cell)
        return self._bands[cell]

    def linewidth(self, cell: int) -> float:
        self._linewidths[cell] = self.backend.linewidth(cell)
        return self._linewidths[cell]

    def replay(self, sigma: float, seed: int) -> ReplayBackend:
        cells = range(1, self.n_cells + 1)
        return ReplayBackend(
            self.images,
            self.labels,
            {cell: self.readout_band(cell) for cell in cells},
            {cell: self.linewidth(cell) for cell in cells},
            sigma,
            seed,
        )


class ReplayBackend:
    """Serve recorded images again as ``|S21|`` plus fresh Gaussian noise.

    Parameters
    ----------
    images : Mapping[str, TransmissionImage]
        Recorded images by artifact id.
    labels : Sequence[str]
        Loop labels of the recorded device.
    bands, linewidths : Mapping[int, ...]
        Readout band and linewidth per cell.
    sigma : float
        Noise added to every replayed sample.
    seed : int
        Base seed; each image derives its own from its artifact id.
    """

    stateless = True

    def __init__(
        self,
        images: Mapping[str, TransmissionImage],
        labels: Sequence[str],
        bands: Mapping[int, tuple[float, float]],
        linewidths: Mapping[int, float],
        sigma: float = 0.0,
        seed: int = 0,
    ) -> None:
        if sigma < 0:
            msg = "noise amplitude must be non-negative"
            raise ContractViolationError(msg)
        self.images = dict(images)
        self._labels = list(labels)
        self.bands = dict(bands)
        self.linewidths = dict(linewidths)
        self.sigma = sigma
        self.seed = seed
        self.points = 0

    @property
    def n_cells(self) -> int:
        return len(self._labels) // 3

    @property
    def labels(self) -> list[str]:
        return self._labels

    def measure(self, sweep: Sweep, estimate: CalibrationEstimate | None = None) -> TransmissionImage:  # noqa: ARG002
        if sweep.artifact_id not in self.images:
            msg = f"no recorded image {sweep.artifact_id!r}"
            raise ReplayError(msg)
        image = self.images[sweep.artifact_id]
        values = np.abs(image.values)
        if self.sigma > 0:
            rng = np.random.default_rng(derive_seed(self.seed, sweep.artifact_id))
            values = values + rng.normal(0.0, self.sigma, values.shape)
        self.points += image.points
        return image.with_values(values)

    def readout_band(self, cell: int) -> tuple[float, float]:
        return self.bands[cell]

    def linewidth(self, cell: int) -> float:
        return self.linewidths[cell]


@dataclass(frozen=True)
class ResamplingSpread:
    """Element-wise spread of re-analysed iteration matrices.

    ``spread`` is the raw standard deviation of ``C^(n)'``; ``normalized`` divides each
    column by its diagonal entry and is in mPhi0/Phi0.
    """

    spread: np.ndarray
    normalized: np.ndarray
    sigma: float
    count: int

    @property
    def max(self) -> float:
        return float(np.max(self.normalized))


def noise_resampling_error(
    recording: RecordingBackend,
    previous: CalibrationEstimate | None,
    sigma: float,
    count: int,
    settings: EngineSettings | None = None,
    seed: int = 0,
    skip: Iterable[int] = (),
) -> ResamplingSpread:
    """Re-run one iteration's analysis on ``count`` noisy copies of its recorded images."""
    if count < 2:  # noqa: PLR2004
        msg = "resampling needs at least two copies"
        raise ContractViolationError(msg)
    skip = tuple(skip)
    matrices = []
    for copy in range(count):
        replay = recording.replay(sigma, derive_seed(seed, f"resample-{copy}"))
        matrices.append(run_iteration(replay, previous, settings, skip).record.C_n.C)
    stack = np.array(matrices)
    spread = stack.std(axis=0, ddof=1)
    diagonal = np.abs(np.diag(stack.mean(axis=0)))
    normalized = spread / np.where(diagonal > 0, diagonal, 1.0)[None, :] * 1e3
    logger.info(
        f"Resampling at sigma {sigma:g} over {count} copies: max spread {normalized.max():.3f} "
        "mPhi0/Phi0",
    )
    return ResamplingSpread(spread, normalized, sigma, count)


def offset_resampling_error(
    recording: RecordingBackend,
    estimate: CalibrationEstimate,
    sigma: float,
    count: int,
    settings: EngineSettings | None = None,
    seed: int = 0,
    skip: Iterable[int] = (),
) -> np.ndarray:
    """Per-loop spread (Phi0) of the offset shift over noisy replays of one recalibration."""
    if count < 2:  # noqa: PLR2004
        msg = "resampling needs at least two copies"
        raise ContractViolationError(msg)
    skip = tuple(skip)
    shifts = []
    for copy in range(count):
        replay = recording.replay(sigma, derive_seed(seed, f"offsets-resample-{copy}"))
        shifts.append(fast_offsets(replay, estimate, settings, skip=skip).shift.values)
    return np.array(shifts).std(axis=0, ddof=1)


@dataclass(frozen=True)
class DriftEpoch:
    """One offset recalibration of :func:`drift_study`."""

    hours: float
    shift: FluxVector
    true_change: FluxVector

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.shift.values**2)))


def drift_study(
    device: SimulatedDevice,
    estimate: CalibrationEstimate,
    epochs_hours: Sequence[float],
    seed: int = 0,
    settings: EngineSettings | None = None,
    skip: Iterable[int] = (),
) -> tuple[CalibrationEstimate, list[DriftEpoch]]:
    """Let the device drift through increasing epochs and recalibrate offsets at each one."""
    if any(b < a for a, b in zip(epochs_hours, epochs_hours[1:])) or any(h < 0 for h in epochs_hours):
        msg = f"drift epochs must be non-negative and increasing, got {list(epochs_hours)}"
        raise ContractViolationError(msg)
    epochs = []
    elapsed = 0.0
    for hours in epochs_hours:
        before = device.spec.f0_true
        device = device.drifted(hours - elapsed, derive_seed(seed, f"drift-{hours}"))
        elapsed = hours
        result = fast_offsets(device, estimate, settings, skip=skip, prefix=f"drift{hours:g}h-")
        estimate = result.estimate
        change = FluxVector(device.spec.f0_true.values - before.values)
        epochs.append(DriftEpoch(hours, result.shift, change))
        logger.info(f"Drift epoch {hours:g} h: RMS shift {epochs[-1].rms * 1e3:.3f} mPhi0")
    return estimate, epochs
