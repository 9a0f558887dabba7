from __future__ import annotations

import datetime as dt
import os
import sys as s
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
from tabulate import tabulate

from src import __version__ as tool_version
from src import log

logger = log.get_logger(__name__)

try:
    import dotenv
except ModuleNotFoundError:
    pass
else:
    if dotenv.find_dotenv(usecwd=True):
        logger.info("Found .env file, loading environment variables")

        dotenv.load_dotenv(dotenv.find_dotenv(usecwd=True), override=True)


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


class Paths:
    """Where runs and logs go."""

    output_dir: Path = Path(os.getenv("CISCIQ_OUTPUT_DIR", "runs"))
    configs_dir: Path = Path(os.getenv("CISCIQ_CONFIGS_DIR", "configs"))


class Physics:
    """Physical constants and simulator defaults.

    Inductances are in pH, currents in uA, lengths in mm and times in ns, so the
    flux quantum is 2067.833848 uA*pH and omega*L comes out in mOhm.
    """

    phi0: float = 2067.833848  # uA*pH
    phi0_weber: float = 2.067833848e-15

    critical_current: float = 1.1  # uA
    geometric_inductance: float = 60.0  # pH
    waveguide_length: float = 4.8  # mm
    length_step: float = 0.12  # mm per cell
    phase_velocity: float = 118.0  # mm/ns
    impedance: float = 50.0  # Ohm

    qubit_current: float = 0.14  # uA
    coupler_current: float = 0.45  # uA
    qubit_squid_mutual: float = 29.5  # mPhi0/uA
    coupler_squid_mutual: float = 28.7  # mPhi0/uA
    qubit_coupler_mutual: float = 30.2  # mPhi0/uA
    coupler_coupler_mutual: float = 31.0  # mPhi0/uA

    derivative_step: float = 1e-4


class Readout:
    """Notch line shape and noise defaults."""

    depth: float = 0.8
    linewidth: float = 2 * np.pi * 1e-3  # rad/ns, 1 MHz
    noise: float = _env_float("CISCIQ_NOISE", 0.0)
    voltage_limit: float = 10.0  # V
    band_margin: float = 5.0  # linewidths


class Drift:
    """Offset drift model defaults."""

    rms_target: float = 1.3e-3  # Phi0 over the reference interval
    reference_hours: float = 48.0
    jump_size: float = 20e-3  # Phi0
    jump_rate: float = 0.0  # per day
    noise_amplitude: float = 14.4  # uPhi0/sqrt(Hz), recorded only
    noise_exponent: float = 0.91


class Sweep:
    """Sweep geometry of the calibration stages."""

    nominal_coupling: float = _env_float("CISCIQ_NOMINAL_COUPLING", 1.0)  # Phi0/V
    first_periods: float = 3.0
    later_periods: float = 2.2
    scan_periods: float = 2.5
    points_per_period: int = _env_int("CISCIQ_POINTS_PER_PERIOD", 100)
    scan_points_per_period: int = _env_int("CISCIQ_SCAN_POINTS_PER_PERIOD", 60)
    frequency_step: float = 0.5  # linewidths
    source_settings: int = 5
    source_span: float = 0.5  # expected periods, first iteration
    offset_span: float = 1.1  # Phi0, fast offsets resonator sweep
    offset_scan_span: float = 0.75  # Phi0, fast offsets 2-D sweep
    offset_points_per_period: int = 200
    offset_scan_points_per_period: int = 120
    error_steps: tuple[int, ...] = (1,)


class Analysis:
    """Image analysis knobs."""

    median_window: int = 3
    hough_angle_span: float = 0.5  # degrees
    hough_angles: int = 11
    hough_vote_floor: float = 0.1  # fraction of the shorter plot side
    line_separation: int = 3  # px
    lorentzian_window: int = 7
    correlation_floor: float = 0.2
    registration_floor: float = 0.05
    registration_upsampling: int = 100  # sub-pixel steps per pixel
    blob_filter_distance: float = 2.0  # px
    lattice_iterations: int = 5


class Convergence:
    """Iteration loop defaults."""

    iterations: int = _env_int("CISCIQ_ITERATIONS", 3)
    stop_threshold: float = 2e-3  # Phi0/Phi0
    diagonal_band: float = 0.05
    condition_limit: float = 1e12


def generate_table(data: Mapping[str, Iterable[Any]] | Iterable[Iterable[Any]], **kwargs: Any) -> str:
    """Generate a rounded table with tabulate."""
    return tabulate(data, tablefmt="rounded_outline", **kwargs)


def generate_startup_table(device_name: str, seed: int, mode: str) -> str:
    """Generate the table for startup."""
    now = dt.datetime.now(tz=dt.timezone.utc)

    return generate_table(
        data=[
            ["Started", now.strftime("%m/%d/%Y - %H:%M:%S")],
            ["System Version", s.version.split()[0]],
            ["NumPy Version", np.__version__],
            ["Tool Version", tool_version],
            ["Mode", mode],
            ["Device", device_name],
            ["Seed", seed],
        ],
    )
