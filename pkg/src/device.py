"""Synthetic device: ground truth, the measurement contract and the simulated backend."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Literal, Protocol, Sequence

import numpy as np
from scipy import optimize

from src import constants, log
from src.errors import ContractViolationError
from src.fluxmodel import (
    CalibrationEstimate,
    CouplingMatrix,
    FluxVector,
    LoopIndex,
    VoltageVector,
    loop_labels,
)
from src.physics import CellPhysics, loaded_resonator_frequency

logger = log.get_logger(__name__)

__all__ = (
    "DeviceSpec",
    "DriftModel",
    "ElementMutual",
    "ImageAxis",
    "LinearTie",
    "MeasurementBackend",
    "SimulatedDevice",
    "Sweep",
    "TransmissionImage",
    "apply_drift",
    "derive_seed",
    "measure_image",
    "s21",
    "translation_residual",
)

FREQUENCY = "frequency"


@dataclass(frozen=True)
class ElementMutual:
    """Mutual inductance (mPhi0/uA) between the z loops of two cells' elements."""

    a: int
    b: int
    value: float

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.a, self.b), max(self.a, self.b))


@dataclass(frozen=True)
class DriftModel:
    """Random walk plus rare jumps; the spectral parameters are informational."""

    rms_target: float = constants.Drift.rms_target
    reference_hours: float = constants.Drift.reference_hours
    jump_size: float = constants.Drift.jump_size
    jump_rate: float = constants.Drift.jump_rate
    noise_amplitude: float = constants.Drift.noise_amplitude
    noise_exponent: float = constants.Drift.noise_exponent


@dataclass(frozen=True)
class DeviceSpec:
    """Ground truth of a simulated chip.

    Parameters
    ----------
    name : str
        Free-form device name.
    cells : tuple[CellPhysics, ...]
        Per-cell physics, cell 1 first.
    C_true : CouplingMatrix
        Ground-truth coupling in Phi0/V.
    f0_true : FluxVector
        Ground-truth flux offsets.
    mutuals : tuple[ElementMutual, ...]
        Element/element mutual inductances in mPhi0/uA.
    noise : float
        Standard deviation of the additive noise on each S21 quadrature.
    drift : DriftModel
        Offset drift parameters.
    voltage_limit : float | None
        Output range of every bias line (V); ``None`` disables the check.
    resistances : np.ndarray | None
        Line resistances (Ohm), when known.
    persistent_flux : bool
        Whether element currents thread their own SQUID and the z loops of coupled
        elements. Switching it off leaves only the SQUID loading.
    """

    name: str
    cells: tuple[CellPhysics, ...]
    C_true: CouplingMatrix
    f0_true: FluxVector
    mutuals: tuple[ElementMutual, ...] = ()
    noise: float = constants.Readout.noise
    drift: DriftModel = field(default_factory=DriftModel)
    voltage_limit: float | None = constants.Readout.voltage_limit
    resistances: np.ndarray | None = None
    persistent_flux: bool = True

    def __post_init__(self) -> None:
        n = 3 * len(self.cells)
        if not self.cells:
            msg = "a device needs at least one cell"
            raise ContractViolationError(msg)
        if self.C_true.n != n or len(self.f0_true) != n:
            msg = f"{len(self.cells)} cells need a {n}x{n} matrix and {n} offsets"
            raise ContractViolationError(msg)
        if np.any(np.diag(self.C_true.C) == 0):
            msg = "ground-truth coupling has a zero diagonal entry"
            raise ContractViolationError(msg)
        if self.noise < 0:
            msg = "noise amplitude must be non-negative"
            raise ContractViolationError(msg)

        seen: dict[tuple[int, int], float] = {}
        for mutual in self.mutuals:
            if mutual.a == mutual.b or not (
                1 <= mutual.a <= len(self.cells) and 1 <= mutual.b <= len(self.cells)
            ):
                msg = f"element mutual between cells {mutual.a} and {mutual.b} is invalid"
                raise ContractViolationError(msg)
            if mutual.pair in seen and seen[mutual.pair] != mutual.value:
                msg = f"conflicting mutuals given for cells {mutual.pair}"
                raise ContractViolationError(msg)
            seen[mutual.pair] = mutual.value
        object.__setattr__(
            self,
            "mutuals",
            tuple(ElementMutual(a, b, value) for (a, b), value in sorted(seen.items())),
        )

    @property
    def m(self) -> int:
        return len(self.cells)

    @property
    def n(self) -> int:
        return 3 * self.m

    @property
    def roles(self) -> list[str]:
        return [cell.element.role for cell in self.cells]

    @property
    def labels(self) -> list[str]:
        return loop_labels(self.m, self.roles)

    def injection(self) -> np.ndarray:
        """``N x m`` matrix of reduced flux injected per uA of each element's current."""
        matrix = np.zeros((self.n, self.m))
        if not self.persistent_flux:
            return matrix
        for index, cell in enumerate(self.cells, start=1):
            matrix[LoopIndex(index, "r").flat, index - 1] = cell.squid_mutual * 1e-3
        for mutual in self.mutuals:
            matrix[LoopIndex(mutual.b, "z").flat, mutual.a - 1] = mutual.value * 1e-3
            matrix[LoopIndex(mutual.a, "z").flat, mutual.b - 1] = mutual.value * 1e-3
        return matrix

    def currents(self, flux: np.ndarray) -> np.ndarray:
        """Element currents (uA) for a ``(K, N)`` batch of loop fluxes."""
        flux = np.atleast_2d(flux)
        return np.stack(
            [
                cell.element.current(
                    flux[:, LoopIndex(index, "z").flat],
                    flux[:, LoopIndex(index, "x").flat],
                )
                for index, cell in enumerate(self.cells, start=1)
            ],
            axis=1,
        )

    def external_flux(self, voltages: np.ndarray) -> np.ndarray:
        return np.atleast_2d(voltages) @ self.C_true.C.T + self.f0_true.values

    def total_flux(self, external: np.ndarray) -> np.ndarray:
        """External flux plus one round of element-current injection."""
        external = np.atleast_2d(external)
        return external + self.currents(external) @ self.injection().T

    def resonances(self, voltages: np.ndarray) -> np.ndarray:
        """Loaded resonator frequencies ``(K, m)`` for a ``(K, N)`` batch of voltages."""
        return self.resonances_from_flux(self.external_flux(voltages))

    def resonances_from_flux(self, external: np.ndarray) -> np.ndarray:
        flux = self.total_flux(external)
        return np.stack(
            [
                np.asarray(
                    loaded_resonator_frequency(
                        flux[:, LoopIndex(index, "r").flat],
                        flux[:, LoopIndex(index, "z").flat],
                        flux[:, LoopIndex(index, "x").flat],
                        cell,
                        cell_number=index,
                    ),
                )
                for index, cell in enumerate(self.cells, start=1)
            ],
            axis=1,
        )

    def with_offsets(self, f0: FluxVector) -> DeviceSpec:
        return replace(self, f0_true=f0)

    def decoupled(self) -> DeviceSpec:
        """Same device with persistent-current flux switched off; SQUID loading stays."""
        return replace(self, mutuals=(), persistent_flux=False)

    def truth(self) -> CalibrationEstimate:
        """Ground truth as a single-iteration estimate."""
        return CalibrationEstimate.exact(CouplingMatrix(self.C_true.C), self.f0_true)


@dataclass(frozen=True)
class ImageAxis:
    """One axis of a transmission image."""

    label: str
    values: np.ndarray
    unit: str = ""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True).ravel()
        if values.size == 0 or not np.all(np.isfinite(values)):
            msg = f"axis {self.label!r} must be a non-empty finite grid"
            raise ContractViolationError(msg)
        if values.size > 1:
            steps = np.diff(values)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                msg = f"axis {self.label!r} is not strictly monotone"
                raise ContractViolationError(msg)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def step(self) -> float:
        """Uniform spacing of the grid."""
        if self.values.size < 2:  # noqa: PLR2004
            msg = f"axis {self.label!r} has a single point and no spacing"
            raise ContractViolationError(msg)
        steps = np.diff(self.values)
        step = float(steps.mean())
        if np.max(np.abs(steps - step)) > 1e-6 * abs(step):
            msg = f"axis {self.label!r} is not uniformly spaced"
            raise ContractViolationError(msg)
        return step

    def at(self, px: float | np.ndarray) -> float | np.ndarray:
        """Axis value at a (fractional) pixel position."""
        return self.values[0] + np.asarray(px) * self.step if np.ndim(px) else float(
            self.values[0] + px * self.step,
        )

    def px(self, value: float | np.ndarray) -> float | np.ndarray:
        """Fractional pixel position of an axis value."""
        return (np.asarray(value) - self.values[0]) / self.step if np.ndim(value) else float(
            (value - self.values[0]) / self.step,
        )


@dataclass(frozen=True)
class TransmissionImage:
    """S21 (complex) or |S21| samples on a grid; the first index runs along ``axis1``."""

    axis1: ImageAxis
    axis2: ImageAxis
    values: np.ndarray
    artifact_id: str = ""

    def __post_init__(self) -> None:
        values = np.array(self.values, copy=True)
        if values.shape != (len(self.axis1), len(self.axis2)):
            msg = (
                f"image values {values.shape} do not match axes "
                f"({len(self.axis1)}, {len(self.axis2)})"
            )
            raise ContractViolationError(msg)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def points(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values).astype(float)

    def with_values(self, values: np.ndarray, artifact_id: str | None = None) -> TransmissionImage:
        return TransmissionImage(
            self.axis1,
            self.axis2,
            values,
            self.artifact_id if artifact_id is None else artifact_id,
        )


@dataclass(frozen=True)
class LinearTie:
    """Slave one control coordinate to the others: ``u[loop] = offset + weights . u``."""

    loop: int
    weights: np.ndarray
    offset: float = 0.0

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=float, copy=True)
        if weights[self.loop] != 0:
            msg = "a tie cannot depend on the coordinate it sets"
            raise ContractViolationError(msg)
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class Sweep:
    """What to measure.

    ``loops`` names the flat control index swept along each axis; ``None`` on the
    second axis means that axis is the probe frequency. Control coordinates are raw
    voltages or estimated fluxes, resolved through the estimate given to the backend.
    """

    axis1: ImageAxis
    axis2: ImageAxis
    loops: tuple[int, int | None]
    base: np.ndarray
    artifact_id: str
    probe: float | None = None
    ties: tuple[LinearTie, ...] = ()
    coordinates: Literal["voltage", "flux"] = "voltage"

    def __post_init__(self) -> None:
        base = np.array(self.base, dtype=float, copy=True)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)
        if self.loops[1] is None and self.axis2.label != FREQUENCY:
            msg = "the second axis must be labelled 'frequency' when it is the probe"
            raise ContractViolationError(msg)
        if self.loops[1] is not None and self.probe is None:
            msg = "a bias/bias sweep needs a fixed probe frequency"
            raise ContractViolationError(msg)
        if not self.artifact_id:
            msg = "every sweep needs an artifact id"
            raise ContractViolationError(msg)

    @property
    def points(self) -> int:
        return len(self.axis1) * len(self.axis2)

    def controls(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the ``(K, N)`` control points and the probe frequencies."""
        n1 = len(self.axis1)
        if self.loops[1] is None:
            controls = np.repeat(self.base[None, :], n1, axis=0)
            controls[:, self.loops[0]] = self.axis1.values
            frequencies = np.asarray(self.axis2.values)
        else:
            grid1, grid2 = np.meshgrid(self.axis1.values, self.axis2.values, indexing="ij")
            controls = np.repeat(self.base[None, :], grid1.size, axis=0)
            controls[:, self.loops[0]] = grid1.ravel()
            controls[:, self.loops[1]] = grid2.ravel()
            frequencies = np.array([self.probe], dtype=float)
        for tie in self.ties:
            controls[:, tie.loop] = tie.offset + controls @ tie.weights
        return controls, frequencies


class MeasurementBackend(Protocol):
    """What the calibration engine needs from a device (real or simulated)."""

    stateless: bool
    points: int

    @property
    def n_cells(self) -> int: ...

    @property
    def labels(self) -> list[str]: ...

    def measure(
        self,
        sweep: Sweep,
        estimate: CalibrationEstimate | None = None,
    ) -> TransmissionImage: ...

    def readout_band(self, cell: int) -> tuple[float, float]: ...

    def linewidth(self, cell: int) -> float: ...


def derive_seed(base: int, artifact_id: str) -> int:
    """Deterministic per-measurement seed from the run seed and an artifact id."""
    digest = hashlib.sha256(f"{base}|{artifact_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _notches(frequencies: np.ndarray, resonances: np.ndarray, spec: DeviceSpec) -> np.ndarray:
    depth = np.array([cell.depth for cell in spec.cells])
    kappa = np.array([cell.linewidth for cell in spec.cells])
    detuning = frequencies[None, :, None] - resonances[:, None, :]
    response = 1 - depth / (1 + 2j * detuning / kappa)
    return np.prod(response, axis=2)


def s21(
    omega_p: float | np.ndarray,
    V: VoltageVector | np.ndarray,
    spec: DeviceSpec,
    rng_seed: int | None = None,
) -> complex | np.ndarray:
    """Feedline transmission at probe frequencies ``omega_p`` (rad/ns) and bias ``V``.

    Each resonator contributes ``1 - d / (1 + 2i (w - w_r) / kappa)``; noise is added
    to both quadratures with standard deviation ``spec.noise``.

    Returns
    -------
    complex | np.ndarray
        Shape ``(K, F)`` for ``K`` bias points and ``F`` frequencies, or a scalar for
        one of each.
    """
    voltages = V.values if isinstance(V, VoltageVector) else np.asarray(V, dtype=float)
    frequencies = np.atleast_1d(np.asarray(omega_p, dtype=float))
    values = _notches(frequencies, spec.resonances(np.atleast_2d(voltages)), spec)
    if spec.noise > 0:
        rng = np.random.default_rng(rng_seed)
        values = values + spec.noise * (
            rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
        )
    if np.ndim(omega_p) == 0 and np.ndim(voltages) == 1:
        return complex(values[0, 0])
    return values


def measure_image(
    sweep: Sweep,
    spec: DeviceSpec,
    rng_seed: int | None,
    estimate: CalibrationEstimate | None = None,
) -> TransmissionImage:
    """Evaluate :func:`s21` on every point of ``sweep``."""
    controls, frequencies = sweep.controls()
    if controls.shape[1] != spec.n:
        msg = f"sweep base has {controls.shape[1]} lines, device has {spec.n}"
        raise ContractViolationError(msg)
    if sweep.coordinates == "flux":
        if estimate is None:
            msg = "a flux-coordinate sweep needs an estimate"
            raise ContractViolationError(msg)
        matrix, offset = estimate.voltage_map()
        voltages = controls @ matrix.T + offset
    else:
        voltages = controls

    if spec.voltage_limit is not None:
        worst = int(np.argmax(np.max(np.abs(voltages), axis=1)))
        VoltageVector(voltages[worst]).check_range(spec.voltage_limit, spec.labels)

    values = s21(frequencies, voltages, spec, rng_seed)
    values = values.reshape(len(sweep.axis1), len(sweep.axis2))
    return TransmissionImage(sweep.axis1, sweep.axis2, values, sweep.artifact_id)


def apply_drift(f0: FluxVector, dt: float, spec: DeviceSpec, rng_seed: int | None) -> FluxVector:
    """Drift offsets by ``dt`` hours: Gaussian random walk plus optional Poisson jumps.

    The walk is scaled so its RMS over ``reference_hours`` equals ``rms_target``.
    """
    if dt < 0:
        msg = f"drift interval must be non-negative, got {dt}"
        raise ContractViolationError(msg)
    if dt == 0:
        return f0

    model = spec.drift
    rng = np.random.default_rng(rng_seed)
    sigma = model.rms_target * np.sqrt(dt / model.reference_hours)
    shift = rng.normal(0.0, sigma, len(f0))
    if model.jump_rate > 0:
        jumps = rng.poisson(model.jump_rate * dt / 24)
        for _ in range(jumps):
            loop = rng.integers(len(f0))
            shift[loop] += rng.choice((-1.0, 1.0)) * model.jump_size
        if jumps:
            logger.debug(f"drift over {dt:g} h included {jumps} flux jump(s)")
    return FluxVector(f0.values + shift)


def translation_residual(first: np.ndarray, second: np.ndarray, period: int) -> float:
    """RMS mismatch of two periodic traces after the best relative translation.

    Both traces sample exactly one period on the same grid of ``period`` points.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    if first.shape != (period,) or second.shape != (period,):
        msg = "traces must cover exactly one period"
        raise ContractViolationError(msg)
    grid = np.arange(period, dtype=float)

    def mismatch(shift: float) -> float:
        moved = np.interp(grid + shift, grid, second, period=period)
        return float(np.sqrt(np.mean((first - moved) ** 2)))

    coarse = min(range(period), key=lambda k: mismatch(float(k)))
    best = optimize.minimize_scalar(
        mismatch,
        bounds=(coarse - 1.0, coarse + 1.0),
        method="bounded",
        options={"xatol": 1e-6},
    )
    return min(mismatch(float(coarse)), float(best.fun))


class SimulatedDevice:
    """Measurement backend evaluating the physics model of a :class:`DeviceSpec`.

    Parameters
    ----------
    spec : DeviceSpec
        Ground truth.
    seed : int
        Base seed; each measurement derives its own from its artifact id.
    """

    stateless = True

    def __init__(self, spec: DeviceSpec, seed: int = 0) -> None:
        self.spec = spec
        self.seed = seed
        self.points = 0
        self._bands: dict[int, tuple[float, float]] = {}

    @property
    def n_cells(self) -> int:
        return self.spec.m

    @property
    def labels(self) -> list[str]:
        return self.spec.labels

    def measure(self, sweep: Sweep, estimate: CalibrationEstimate | None = None) -> TransmissionImage:
        image = measure_image(sweep, self.spec, derive_seed(self.seed, sweep.artifact_id), estimate)
        self.points += image.points
        logger.debug(f"measured {sweep.artifact_id} ({image.points} points)")
        return image

    def linewidth(self, cell: int) -> float:
        return self.spec.cells[cell - 1].linewidth

    def readout_band(self, cell: int) -> tuple[float, float]:
        """Frequency range the cell's resonator can reach, padded by a few linewidths."""
        if cell not in self._bands:
            physics = self.spec.cells[cell - 1]
            f_r, f_z, f_x = np.meshgrid(
                np.linspace(0.0, 0.5, 11),
                np.linspace(0.0, 1.0, 41),
                np.array([0.0, 0.5, 1.0]),
                indexing="ij",
            )
            omega = np.asarray(loaded_resonator_frequency(f_r, f_z, f_x, physics, cell_number=cell))
            margin = constants.Readout.band_margin * physics.linewidth
            self._bands[cell] = (float(omega.min() - margin), float(omega.max() + margin))
        return self._bands[cell]

    def drifted(self, hours: float, seed: int) -> SimulatedDevice:
        """A copy of this device after ``hours`` of offset drift."""
        spec = self.spec.with_offsets(apply_drift(self.spec.f0_true, hours, self.spec, seed))
        return SimulatedDevice(spec, self.seed)

    def spectrum_pair(
        self,
        cell: int,
        source: int,
        settings: Sequence[float],
        points: int = 400,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Resonator frequency over one resonator period at several settings of ``source``.

        ``source`` is a flat line index. Returns the resonator voltage grid and an array
        ``(len(settings), points)``; on a linear device the traces are translates.
        """
        r = LoopIndex(cell, "r").flat
        if source == r:
            msg = "the source line must differ from the swept resonator line"
            raise ContractViolationError(msg)
        period = 1.0 / abs(self.spec.C_true.C[r, r])
        grid = np.arange(points) * period / points
        traces = []
        for setting in settings:
            voltages = np.zeros((points, self.spec.n))
            voltages[:, r] = grid
            voltages[:, source] = setting
            traces.append(self.spec.resonances(voltages)[:, cell - 1])
        return grid, np.array(traces)
