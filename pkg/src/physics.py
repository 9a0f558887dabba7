"""Classical rf-SQUID readout physics with inductive loading by a flux element.

Units: inductance pH, current uA, length mm, time ns, angular frequency rad/ns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from src import constants, log
from src.errors import (
    ContractViolationError,
    ConvergenceError,
    HystereticRegimeError,
    OverCouplingError,
    SingularInductanceError,
)

logger = log.get_logger(__name__)

__all__ = (
    "CURRENT_SHAPES",
    "CellPhysics",
    "ElementModel",
    "RfSquidModel",
    "element_effective_inductance",
    "loaded_resonator_frequency",
    "resonator_frequency",
    "squid_effective_inductance",
    "squid_phase",
)

PHI0 = constants.Physics.phi0
_BISECTIONS = 64
_POLISH = 2

FloatArray = float | np.ndarray


def _cos_sin(f_z: np.ndarray, f_x: np.ndarray) -> np.ndarray:
    return np.cos(np.pi * f_x) * np.sin(2 * np.pi * f_z)


def _sin(f_z: np.ndarray, f_x: np.ndarray) -> np.ndarray:  # noqa: ARG001
    return np.sin(2 * np.pi * f_z)


# normalised ground-state loop current, odd and periodic (1 in f_z, 2 in f_x)
CURRENT_SHAPES: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "cos_sin": _cos_sin,
    "sin": _sin,
}


@dataclass(frozen=True)
class RfSquidModel:
    """Single-junction rf-SQUID terminating a quarter-wave resonator.

    Parameters
    ----------
    Ic : float
        Junction critical current (uA).
    Lg : float
        Geometric loop inductance (pH).
    length : float
        Waveguide length (mm).
    phase_velocity : float
        Phase velocity (mm/ns).
    Z0 : float
        Characteristic impedance (Ohm).
    """

    Ic: float
    Lg: float
    length: float
    phase_velocity: float
    Z0: float

    def __post_init__(self) -> None:
        for name in ("Ic", "Lg", "length", "phase_velocity", "Z0"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                msg = f"rf-SQUID parameter {name} must be positive, got {value}"
                raise ContractViolationError(msg)
        if self.beta_l >= 1:
            raise HystereticRegimeError(self.beta_l)

    @property
    def beta_l(self) -> float:
        """Screening parameter ``2 pi Lg Ic / Phi0``."""
        return 2 * np.pi * self.Lg * self.Ic / PHI0

    @property
    def shorted_frequency(self) -> float:
        return np.pi * self.phase_velocity / (2 * self.length)


@dataclass(frozen=True)
class ElementModel:
    """Qubit or coupler seen through its flux-dependent loop current."""

    role: str
    Imax: float
    shape: str = "cos_sin"
    step: float = constants.Physics.derivative_step

    def __post_init__(self) -> None:
        if self.role not in ("qubit", "coupler"):
            msg = f"element role must be qubit or coupler, got {self.role!r}"
            raise ContractViolationError(msg)
        if not np.isfinite(self.Imax) or self.Imax < 0:
            msg = f"element current amplitude must be non-negative, got {self.Imax}"
            raise ContractViolationError(msg)
        if self.shape not in CURRENT_SHAPES:
            msg = f"unknown current shape {self.shape!r}, known: {sorted(CURRENT_SHAPES)}"
            raise ContractViolationError(msg)
        if self.step <= 0:
            msg = "finite-difference step must be positive"
            raise ContractViolationError(msg)

    def current(self, f_z: FloatArray, f_x: FloatArray) -> np.ndarray:
        """Loop current (uA)."""
        return self.Imax * CURRENT_SHAPES[self.shape](np.asarray(f_z), np.asarray(f_x))

    def slope(self, f_z: FloatArray, f_x: FloatArray) -> np.ndarray:
        """Central-difference ``dI/df_z`` (uA per flux quantum)."""
        f_z = np.asarray(f_z, dtype=float)
        h = self.step
        return (self.current(f_z + h, f_x) - self.current(f_z - h, f_x)) / (2 * h)


@dataclass(frozen=True)
class CellPhysics:
    """Everything the simulator needs to know about one unit cell.

    ``squid_mutual`` is the element/SQUID mutual inductance in mPhi0/uA and
    ``linewidth`` the resonator linewidth kappa in rad/ns.
    """

    squid: RfSquidModel
    element: ElementModel
    squid_mutual: float
    depth: float = constants.Readout.depth
    linewidth: float = constants.Readout.linewidth

    def __post_init__(self) -> None:
        if not 0 < self.depth <= 1:
            msg = f"notch depth must lie in (0, 1], got {self.depth}"
            raise ContractViolationError(msg)
        if self.linewidth <= 0:
            msg = f"linewidth must be positive, got {self.linewidth}"
            raise ContractViolationError(msg)

    @property
    def mutual_ph(self) -> float:
        """Element/SQUID mutual in pH."""
        return self.squid_mutual * 1e-3 * PHI0


def _phase(f_r: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # phi + beta sin(phi) = 2 pi f_r is monotone in phi; root lies within beta of 2 pi f_r
    phi_x = 2 * np.pi * np.asarray(f_r, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), phi_x.shape)
    lo = phi_x - beta
    hi = phi_x + beta
    for _ in range(_BISECTIONS):
        mid = 0.5 * (lo + hi)
        above = mid + beta * np.sin(mid) - phi_x > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    phi = 0.5 * (lo + hi)
    for _ in range(_POLISH):
        phi = phi - (phi + beta * np.sin(phi) - phi_x) / (1 + beta * np.cos(phi))

    residual = np.abs(phi + beta * np.sin(phi) - phi_x)
    tolerance = 1e-9 * (1 + np.abs(phi_x))
    if np.any(residual > tolerance):
        worst = int(np.argmax(residual - tolerance))
        bracket = (float((phi_x - beta).flat[worst]), float((phi_x + beta).flat[worst]))
        raise ConvergenceError("rf-SQUID phase", bracket, float(residual.flat[worst]))
    return phi


def squid_phase(f_r: FloatArray, model: RfSquidModel) -> FloatArray:
    """Phase minimising ``-(Ic Phi0 / 2pi) cos phi + (Phi0^2 / 2Lg) (phi / 2pi - f_r)^2``.

    For ``beta_L < 1`` the stationary point is unique, so it is the global minimum.

    Parameters
    ----------
    f_r : float | np.ndarray
        Reduced flux threading the SQUID loop.
    model : RfSquidModel
        The SQUID.

    Returns
    -------
    float | np.ndarray
        Junction phase in radians, shaped like ``f_r``.
    """
    phi = _phase(np.asarray(f_r, dtype=float), np.asarray(model.beta_l))
    return float(phi) if np.ndim(phi) == 0 else phi


def _inductance(phi: np.ndarray, lg: np.ndarray, ic: float) -> np.ndarray:
    inverse = 1 / lg + 2 * np.pi * ic * np.cos(phi) / PHI0
    if np.any(np.abs(inverse) < 1e-15 / np.max(lg)):  # noqa: PLR2004
        msg = "SQUID inductance diverges (1/L_eff = 0)"
        raise SingularInductanceError(msg)
    return 1 / inverse


def squid_effective_inductance(phi: FloatArray, model: RfSquidModel) -> FloatArray:
    """Effective SQUID inductance (pH): ``1/L = 1/Lg + 2 pi Ic cos(phi) / Phi0``."""
    inductance = _inductance(np.asarray(phi, dtype=float), np.asarray(model.Lg), model.Ic)
    return float(inductance) if np.ndim(inductance) == 0 else inductance


def _frequency(inductance: np.ndarray, length: float, velocity: float, z0: float) -> np.ndarray:
    inductance = np.asarray(inductance, dtype=float)
    top = np.pi * velocity / (2 * length)
    open_end = np.isinf(inductance)
    finite = np.where(open_end, 0.0, inductance)
    scale = finite * 1e-3 / z0  # omega * L in Ohm with omega in rad/ns and L in pH

    def phase(omega: np.ndarray) -> np.ndarray:
        return 2 * omega * length / velocity + 2 * np.arctan(omega * scale) - np.pi

    lo = np.zeros_like(finite)
    hi = np.full_like(finite, top)
    for _ in range(_BISECTIONS):
        mid = 0.5 * (lo + hi)
        above = phase(mid) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    omega = 0.5 * (lo + hi)
    for _ in range(_POLISH):
        slope = 2 * length / velocity + 2 * scale / (1 + (omega * scale) ** 2)
        omega = np.clip(omega - phase(omega) / slope, 0.0, top)

    residual = np.abs(phase(omega))
    if np.any(residual > 1e-9):  # noqa: PLR2004
        worst = int(np.argmax(residual))
        raise ConvergenceError("resonator frequency", (0.0, top), float(residual.flat[worst]))
    # an open end doubles the quarter-wave frequency
    return np.where(open_end, 2 * top, omega)


def resonator_frequency(L_eff: FloatArray, model: RfSquidModel) -> FloatArray:  # noqa: N803
    """Lowest root of ``exp(2i w l / c) = (i w L - Z0) / (i w L + Z0)`` in rad/ns.

    Solved in the real phase form ``2 w l / c + 2 atan(w L / Z0) = pi``. An infinite
    inductance is the open-end limit ``pi c / l``.
    """
    inductance = np.asarray(L_eff, dtype=float)
    if np.any(inductance < 0) or np.any(np.isnan(inductance)):
        msg = "effective inductance must be non-negative"
        raise ContractViolationError(msg)
    omega = _frequency(inductance, model.length, model.phase_velocity, model.Z0)
    return float(omega) if np.ndim(omega) == 0 else omega


def element_effective_inductance(f_z: FloatArray, f_x: FloatArray, elem: ElementModel) -> FloatArray:
    """Quantum inductance ``Phi0 / (dI/df_z)`` of the element z loop (pH).

    Stationary points of the current curve report an infinite inductance, i.e. no loading.
    """
    slope = np.asarray(elem.slope(f_z, f_x), dtype=float)
    flat = np.abs(slope) <= 1e-9 * max(elem.Imax, np.finfo(float).tiny)
    with np.errstate(divide="ignore"):
        inductance = np.where(flat, np.inf, PHI0 / np.where(flat, 1.0, slope))
    return float(inductance) if np.ndim(inductance) == 0 else inductance


def loaded_resonator_frequency(
    f_r: FloatArray,
    f_z: FloatArray,
    f_x: FloatArray,
    cell: CellPhysics,
    *,
    cell_number: int | None = None,
) -> FloatArray:
    """Resonator frequency with the SQUID loaded by the element: ``Lg' = Lg - M^2 / L_C``.

    Parameters
    ----------
    f_r, f_z, f_x : float | np.ndarray
        Reduced fluxes of the SQUID, element z and element x loops (broadcastable).
    cell : CellPhysics
        Physics of the cell.
    cell_number : int | None
        Only used to name the cell in errors.

    Returns
    -------
    float | np.ndarray
        Angular frequency in rad/ns.

    Raises
    ------
    OverCouplingError
        If the loading leaves ``Lg' <= 0``.
    """
    f_r, f_z, f_x = np.broadcast_arrays(
        np.asarray(f_r, dtype=float),
        np.asarray(f_z, dtype=float),
        np.asarray(f_x, dtype=float),
    )
    squid = cell.squid
    loading = np.zeros(f_r.shape)
    if cell.squid_mutual != 0:
        inductance = np.asarray(element_effective_inductance(f_z, f_x, cell.element))
        finite = np.isfinite(inductance)
        loading[finite] = cell.mutual_ph**2 / inductance[finite]
    loaded = squid.Lg - loading
    if np.any(loaded <= 0):
        raise OverCouplingError(cell_number, float(np.min(loaded)))
    beta = 2 * np.pi * loaded * squid.Ic / PHI0
    if np.any(beta >= 1):
        raise HystereticRegimeError(float(np.max(beta)))

    phi = _phase(f_r, beta)
    inductance = _inductance(phi, loaded, squid.Ic)
    omega = _frequency(inductance, squid.length, squid.phase_velocity, squid.Z0)
    return float(omega) if np.ndim(omega) == 0 else omega
