"""Flux algebra: loop indexing, the linear flux/voltage relation and iteration composition.

Fluxes are reduced (units of the flux quantum) everywhere in this module. Loops are
flattened cell-major in the kind order ``z, x, r``; flat indices are 0-based in code
and cells are numbered from 1.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from src import constants, log
from src.errors import ContractViolationError, SingularMatrixError, VoltageRangeError

logger = log.get_logger(__name__)

__all__ = (
    "KINDS",
    "CalibrationEstimate",
    "CouplingMatrix",
    "FluxVector",
    "IterationRecord",
    "LoopIndex",
    "UnitKind",
    "VoltageVector",
    "compose_iterations",
    "convention_transform",
    "flux_from_voltage",
    "inverse_convention_transform",
    "loop_labels",
    "periodic_step",
    "primed_coupling",
    "voltage_for_flux",
)

KINDS: tuple[str, ...] = ("z", "x", "r")
ROLE_PREFIX: dict[str, str] = {"qubit": "q", "coupler": "c"}

_LABEL_RE = re.compile(r"^([a-z])(\d+)([zxr])$")


def _frozen(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, order=True)
class LoopIndex:
    """One loop (or its bias line) addressed by cell and kind."""

    cell: int
    kind: str

    def __post_init__(self) -> None:
        if self.cell < 1:
            msg = f"cell numbers start at 1, got {self.cell}"
            raise ContractViolationError(msg)
        if self.kind not in KINDS:
            msg = f"loop kind must be one of {KINDS}, got {self.kind!r}"
            raise ContractViolationError(msg)

    @property
    def flat(self) -> int:
        """Position in a flattened vector (0-based)."""
        return 3 * (self.cell - 1) + KINDS.index(self.kind)

    @classmethod
    def from_flat(cls, index: int) -> LoopIndex:
        """Inverse of :attr:`flat`."""
        if index < 0:
            msg = f"flat index must be non-negative, got {index}"
            raise ContractViolationError(msg)
        return cls(cell=index // 3 + 1, kind=KINDS[index % 3])

    @classmethod
    def from_label(cls, label: str) -> LoopIndex:
        """Parse labels like ``q1z`` or ``c2x``."""
        match = _LABEL_RE.match(label)
        if match is None:
            msg = f"not a loop label: {label!r}"
            raise ContractViolationError(msg)
        return cls(cell=int(match.group(2)), kind=match.group(3))

    def label(self, prefix: str = "q") -> str:
        """Flattened loop label such as ``q1z``."""
        return f"{prefix}{self.cell}{self.kind}"


def loop_labels(cells: int, roles: Sequence[str] | None = None) -> list[str]:
    """Labels of all ``3 * cells`` loops in flattening order."""
    if roles is not None and len(roles) != cells:
        msg = f"{len(roles)} roles given for {cells} cells"
        raise ContractViolationError(msg)
    labels = []
    for index in range(3 * cells):
        loop = LoopIndex.from_flat(index)
        prefix = ROLE_PREFIX.get(roles[loop.cell - 1], "q") if roles else "q"
        labels.append(loop.label(prefix))
    return labels


class UnitKind(enum.Enum):
    """Units of a coupling matrix."""

    VOLT = "Phi0/V"
    FLUX = "Phi0/Phi0"


@dataclass(frozen=True)
class FluxVector:
    """Reduced fluxes of all loops."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            msg = f"flux vector must be 1-D, got shape {values.shape}"
            raise ContractViolationError(msg)
        if not np.all(np.isfinite(values)):
            msg = "flux vector has non-finite entries"
            raise ContractViolationError(msg)
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def zeros(cls, n: int) -> FluxVector:
        return cls(np.zeros(n))


@dataclass(frozen=True)
class VoltageVector:
    """Bias voltages of all lines."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            msg = f"voltage vector must be 1-D, got shape {values.shape}"
            raise ContractViolationError(msg)
        if not np.all(np.isfinite(values)):
            msg = "voltage vector has non-finite entries"
            raise ContractViolationError(msg)
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return len(self.values)

    def check_range(self, limit: float | None, labels: Sequence[str] | None = None) -> None:
        """Raise :class:`VoltageRangeError` if any line exceeds ``limit``."""
        if limit is None:
            return
        over = np.flatnonzero(np.abs(self.values) > limit)
        if over.size:
            index = int(over[0])
            name = labels[index] if labels else str(index)
            raise VoltageRangeError(name, float(self.values[index]), limit)


@dataclass(frozen=True)
class CouplingMatrix:
    """Flux induced on each loop per unit control on each line.

    Parameters
    ----------
    C : np.ndarray
        ``N x N`` coefficients, rows are loops and columns are lines.
    M : np.ndarray | None
        Optional mutual inductances in pH.
    R : np.ndarray | None
        Optional line resistances in Ohm.
    unit : UnitKind
        ``VOLT`` for voltage control, ``FLUX`` for estimated-flux control.
    """

    C: np.ndarray
    M: np.ndarray | None = None
    R: np.ndarray | None = None
    unit: UnitKind = UnitKind.VOLT

    def __post_init__(self) -> None:
        matrix = np.asarray(self.C, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:  # noqa: PLR2004
            msg = f"coupling matrix must be square, got shape {matrix.shape}"
            raise ContractViolationError(msg)
        if not np.all(np.isfinite(matrix)):
            msg = "coupling matrix has non-finite entries"
            raise ContractViolationError(msg)
        object.__setattr__(self, "C", _frozen(matrix))

        if (self.M is None) != (self.R is None):
            msg = "mutuals and resistances must be given together"
            raise ContractViolationError(msg)
        if self.M is not None and self.R is not None:
            mutuals = _frozen(self.M)
            resistances = _frozen(self.R)
            if mutuals.shape != matrix.shape or resistances.shape != (matrix.shape[0],):
                msg = "mutual/resistance shapes do not match the coupling matrix"
                raise ContractViolationError(msg)
            expected = _mutuals_to_coupling(mutuals, resistances)
            scale = np.maximum(np.abs(expected), np.finfo(float).tiny)
            if np.max(np.abs(matrix - expected) / scale) > 1e-12:  # noqa: PLR2004
                msg = "coupling matrix is inconsistent with M R^-1"
                raise ContractViolationError(msg)
            object.__setattr__(self, "M", mutuals)
            object.__setattr__(self, "R", resistances)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_mutuals(cls, mutuals: np.ndarray, resistances: np.ndarray) -> CouplingMatrix:
        """Build ``C = M R^-1 / Phi0`` from mutuals (pH) and line resistances (Ohm)."""
        mutuals = np.asarray(mutuals, dtype=float)
        resistances = np.asarray(resistances, dtype=float)
        if np.any(resistances <= 0):
            msg = "line resistances must be positive"
            raise ContractViolationError(msg)
        return cls(_mutuals_to_coupling(mutuals, resistances), M=mutuals, R=resistances)

    @classmethod
    def identity(cls, n: int, unit: UnitKind = UnitKind.FLUX) -> CouplingMatrix:
        return cls(np.eye(n), unit=unit)

    def to_mutuals(self, resistances: np.ndarray) -> np.ndarray:
        """Mutual inductances (pH) implied by this Phi0/V matrix and line resistances."""
        if self.unit is not UnitKind.VOLT:
            msg = "only Phi0/V matrices convert to mutual inductances"
            raise ContractViolationError(msg)
        resistances = np.asarray(resistances, dtype=float)
        if resistances.shape != (self.n,):
            msg = f"expected {self.n} resistances, got {resistances.shape}"
            raise ContractViolationError(msg)
        # Phi0 in pH*A
        return self.C * resistances[None, :] * constants.Physics.phi0_weber * 1e12

    def condition(self) -> float:
        return float(np.linalg.cond(self.C))

    def off_diagonal(self) -> np.ndarray:
        """Off-diagonal entries as a flat array."""
        return self.C[~np.eye(self.n, dtype=bool)]


def _mutuals_to_coupling(mutuals: np.ndarray, resistances: np.ndarray) -> np.ndarray:
    return mutuals / resistances[None, :] / (constants.Physics.phi0_weber * 1e12)


@dataclass(frozen=True)
class IterationRecord:
    """Matrix and offsets measured in one calibration iteration."""

    n: int
    C_n: CouplingMatrix
    f0_n: FluxVector
    skipped: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n < 1:
            msg = f"iteration ordinals start at 1, got {self.n}"
            raise ContractViolationError(msg)
        if len(self.f0_n) != self.C_n.n:
            msg = f"offsets have {len(self.f0_n)} entries for a {self.C_n.n}-loop matrix"
            raise ContractViolationError(msg)
        expected = UnitKind.VOLT if self.n == 1 else UnitKind.FLUX
        if self.C_n.unit is not expected:
            msg = f"iteration {self.n} must carry {expected.value}, got {self.C_n.unit.value}"
            raise ContractViolationError(msg)

    def diagonal_within(self, band: float) -> bool:
        """Whether every diagonal entry lies within ``band`` of one."""
        return bool(np.all(np.abs(np.diag(self.C_n.C) - 1.0) <= band))


def flux_from_voltage(C: CouplingMatrix, V: VoltageVector, f0: FluxVector) -> FluxVector:
    """Return ``C V + f0``."""
    if not (C.n == len(V) == len(f0)):
        msg = f"dimension mismatch: C is {C.n}x{C.n}, V has {len(V)}, f0 has {len(f0)}"
        raise ContractViolationError(msg)
    return FluxVector(C.C @ V.values + f0.values)


def compose_iterations(records: Sequence[IterationRecord]) -> tuple[CouplingMatrix, FluxVector]:
    """Fold per-iteration records into the composite estimate.

    ``C' = C_n ... C_1`` and ``f0' = C_n (... (C_2 f0_1 + f0_2) ...) + f0_n``.
    """
    if not records:
        msg = "cannot compose an empty iteration history"
        raise ContractViolationError(msg)
    ordinals = [record.n for record in records]
    if any(b <= a for a, b in zip(ordinals, ordinals[1:])):
        msg = f"iteration records out of order: {ordinals}"
        raise ContractViolationError(msg)
    if records[0].C_n.unit is not UnitKind.VOLT:
        msg = "the first iteration record must carry Phi0/V units"
        raise ContractViolationError(msg)

    first = records[0]
    matrix = np.array(first.C_n.C)
    offsets = np.array(first.f0_n.values)
    for record in records[1:]:
        if record.C_n.unit is not UnitKind.FLUX:
            msg = f"iteration {record.n} must be dimensionless"
            raise ContractViolationError(msg)
        if record.C_n.n != matrix.shape[0]:
            msg = f"iteration {record.n} has {record.C_n.n} loops, expected {matrix.shape[0]}"
            raise ContractViolationError(msg)
        matrix = record.C_n.C @ matrix
        offsets = record.C_n.C @ offsets + record.f0_n.values
    return CouplingMatrix(matrix), FluxVector(offsets)


@dataclass(frozen=True)
class CalibrationEstimate:
    """Composite estimate ``f' = C' V + f0'`` together with the history that produced it."""

    C_prime: CouplingMatrix
    f0_prime: FluxVector
    history: tuple[IterationRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.C_prime.unit is not UnitKind.VOLT:
            msg = "a composite estimate maps voltages to flux"
            raise ContractViolationError(msg)
        if len(self.f0_prime) != self.C_prime.n:
            msg = "estimate offsets and matrix disagree in size"
            raise ContractViolationError(msg)
        if self.history:
            matrix, offsets = compose_iterations(self.history)
            scale = max(1.0, float(np.max(np.abs(matrix.C))))
            if np.max(np.abs(matrix.C - self.C_prime.C)) > 1e-12 * scale or np.max(
                np.abs(offsets.values - self.f0_prime.values),
            ) > 1e-12 * max(1.0, float(np.max(np.abs(offsets.values)))):
                msg = "estimate does not match the composition of its history"
                raise ContractViolationError(msg)

    @property
    def n(self) -> int:
        return self.C_prime.n

    @property
    def iterations(self) -> int:
        return self.history[-1].n if self.history else 0

    @classmethod
    def from_history(cls, records: Iterable[IterationRecord]) -> CalibrationEstimate:
        records = tuple(records)
        matrix, offsets = compose_iterations(records)
        return cls(matrix, offsets, records)

    @classmethod
    def exact(cls, C: CouplingMatrix, f0: FluxVector) -> CalibrationEstimate:
        """Single-record estimate, e.g. built from a simulator's ground truth."""
        record = IterationRecord(1, CouplingMatrix(C.C), f0)
        return cls(record.C_n, f0, (record,))

    def append(self, record: IterationRecord) -> CalibrationEstimate:
        if self.history and record.n <= self.history[-1].n:
            msg = f"iteration {record.n} does not follow {self.history[-1].n}"
            raise ContractViolationError(msg)
        return CalibrationEstimate.from_history((*self.history, record))

    def with_offset_update(self, shift: FluxVector) -> CalibrationEstimate:
        """Apply ``f0' <- f0' - shift`` as an identity-matrix record."""
        if not self.history:
            return CalibrationEstimate.exact(self.C_prime, self.f0_prime).with_offset_update(shift)
        record = IterationRecord(
            self.iterations + 1,
            CouplingMatrix.identity(self.n),
            FluxVector(-shift.values),
        )
        return self.append(record)

    def voltage_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(A, b)`` with ``V = A f' + b``."""
        condition = self.C_prime.condition()
        if not np.isfinite(condition) or condition > constants.Convergence.condition_limit:
            raise SingularMatrixError("estimated coupling matrix", condition)
        inverse = np.linalg.inv(self.C_prime.C)
        return inverse, -inverse @ self.f0_prime.values


def voltage_for_flux(est: CalibrationEstimate, f_target: FluxVector) -> VoltageVector:
    """Solve ``C' V + f0' = f_target`` for ``V``."""
    if len(f_target) != est.n:
        msg = f"target flux has {len(f_target)} entries, estimate has {est.n} loops"
        raise ContractViolationError(msg)
    condition = est.C_prime.condition()
    if not np.isfinite(condition) or condition > constants.Convergence.condition_limit:
        raise SingularMatrixError("estimated coupling matrix", condition)
    return VoltageVector(np.linalg.solve(est.C_prime.C, f_target.values - est.f0_prime.values))


def convention_transform(f_zprime: float | np.ndarray, f_x: float | np.ndarray) -> tuple:
    """Map the ``(z', x)`` loop convention onto ``(z, x)``: ``f_z = f_z' + f_x / 2``."""
    return f_zprime + 0.5 * f_x, f_x


def inverse_convention_transform(f_z: float | np.ndarray, f_x: float | np.ndarray) -> tuple:
    """Inverse of :func:`convention_transform`."""
    return f_z - 0.5 * f_x, f_x


def periodic_step(loop: LoopIndex) -> float:
    """Flux step that leaves every circuit property unchanged (2 for x loops, else 1)."""
    return 2.0 if loop.kind == "x" else 1.0


def primed_coupling(C: CouplingMatrix) -> CouplingMatrix:
    """Re-express the z rows of ``C`` for the ``(z', x)`` convention."""
    matrix = np.array(C.C)
    for cell in range(1, C.n // 3 + 1):
        z = LoopIndex(cell, "z").flat
        x = LoopIndex(cell, "x").flat
        matrix[z] = C.C[z] - 0.5 * C.C[x]
    return CouplingMatrix(matrix, unit=C.unit)
