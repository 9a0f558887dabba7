from __future__ import annotations

from pathlib import Path

from src import log

logger = log.get_logger(__name__)

__all__ = (
    "CalibrationError",
    "ConfigError",
    "ContractViolationError",
    "ConvergenceError",
    "EstimateFormatError",
    "HystereticRegimeError",
    "InsufficientLatticeError",
    "InsufficientRangeError",
    "LineDetectionError",
    "LowConfidenceError",
    "OverCouplingError",
    "PeakFitError",
    "RankDeficiencyError",
    "ReplayError",
    "SingularInductanceError",
    "SingularMatrixError",
    "StageError",
    "TranslationError",
    "VoltageRangeError",
)


class CalibrationError(Exception):
    """Base calibration error all custom errors inherit from."""


class ContractViolationError(CalibrationError, ValueError):
    """Inputs break an operation's preconditions (shapes, units, ranges)."""


class SingularMatrixError(CalibrationError):
    """A matrix needed for a solve is singular or ill-conditioned."""

    def __init__(self, what: str, condition: float) -> None:
        super().__init__(f"{what} is ill-conditioned (condition number {condition:.3e})")
        self.condition = condition


class ConvergenceError(CalibrationError):
    """A one-dimensional solve did not converge inside its bracket."""

    def __init__(self, what: str, bracket: tuple[float, float], residual: float) -> None:
        super().__init__(
            f"{what} did not converge in [{bracket[0]:.6g}, {bracket[1]:.6g}] "
            f"(residual {residual:.3e})",
        )
        self.bracket = bracket
        self.residual = residual


class SingularInductanceError(CalibrationError):
    """The effective SQUID inductance diverges (1/L_eff = 0)."""


class OverCouplingError(CalibrationError):
    """Inductive loading drove the loaded geometric inductance to zero or below."""

    def __init__(self, cell: int | None, loaded: float) -> None:
        where = f"cell {cell}" if cell is not None else "a cell"
        super().__init__(f"inductive loading leaves Lg' = {loaded:.4g} pH on {where}")
        self.loaded = loaded


class HystereticRegimeError(CalibrationError):
    """The screening parameter puts the rf-SQUID in the multi-valued regime."""

    def __init__(self, beta_l: float) -> None:
        super().__init__(f"screening parameter beta_L = {beta_l:.4f} must stay below 1")
        self.beta_l = beta_l


class VoltageRangeError(CalibrationError):
    """A requested voltage leaves the configured output range of its line."""

    def __init__(self, line: str, value: float, limit: float) -> None:
        super().__init__(f"line {line} asked for {value:+.4f} V, limit is +/-{limit:.4f} V")
        self.line = line
        self.value = value
        self.limit = limit


class StageError(CalibrationError):
    """A calibration stage could not extract its numbers from the measured images."""


class LineDetectionError(StageError):
    """No recurrence line rose above the vote floor."""


class InsufficientRangeError(StageError):
    """The sweep covers too few periods for the analysis."""


class InsufficientLatticeError(StageError):
    """Too few non-collinear symmetry centers were found."""


class RankDeficiencyError(StageError):
    """The lattice fit geometry is degenerate."""


class LowConfidenceError(StageError):
    """The registration correlation peak is below the confidence floor."""

    def __init__(self, confidence: float, floor: float) -> None:
        super().__init__(f"registration peak {confidence:.3f} below floor {floor:.3f}")
        self.confidence = confidence


class PeakFitError(StageError):
    """A correlation peak is flat or too close to the profile edge to be fitted."""


class TranslationError(StageError):
    """Translations between repeated scans could not be extracted."""


class ReplayError(StageError):
    """A replayed analysis asked for an image that was never recorded."""


class ConfigError(CalibrationError):
    """A device or run configuration file is invalid."""

    def __init__(self, path: Path | str, message: str, line: int | None = None) -> None:
        where = f"{path}:{line}" if line is not None else f"{path}"
        msg = f"{where}: {message}"
        logger.error(msg)

        super().__init__(msg)
        self.path = Path(path)
        self.line = line


class EstimateFormatError(CalibrationError):
    """An estimate file on disk is malformed."""

    def __init__(self, path: Path | str, message: str) -> None:
        msg = f"{path}: {message}"
        logger.error(msg)

        super().__init__(msg)
        self.path = Path(path)
