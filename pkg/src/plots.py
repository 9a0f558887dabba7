"""Static figures written next to the numeric artifacts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src import log  # noqa: E402
from src.device import TransmissionImage  # noqa: E402
from src.fluxmodel import IterationRecord, UnitKind  # noqa: E402

logger = log.get_logger(__name__)

__all__ = (
    "plot_convergence",
    "plot_drift",
    "plot_offset_shifts",
    "plot_scan",
    "plot_spectra_pair",
    "plot_spectrum",
    "plot_theta",
    "save_map",
)

mpl.rc("font", size=10)
mpl.rc("axes", titlesize=11, labelsize=10)
mpl.rc("legend", fontsize=9)

# no timestamps or version strings, so reruns give identical files
_METADATA = {"Software": None}


def _save(fig: plt.Figure, path: Path | str) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    logger.debug(f"saved {path}")
    return path


def save_map(values: np.ndarray, path: Path | str) -> Path:
    """Grayscale PNG plus a CSV of the same map."""
    path = Path(path)
    data = np.asarray(values, dtype=float)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path.with_suffix(".csv"), np.atleast_2d(data), fmt="%.17g", delimiter=",")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.imshow(np.atleast_2d(data).T, origin="lower", aspect="auto", cmap="gray", interpolation="nearest")
    ax.set_title(path.stem)
    return _save(fig, path)


def _extent(image: TransmissionImage) -> list[float]:
    return [
        float(image.axis1.values[0]),
        float(image.axis1.values[-1]),
        float(image.axis2.values[0]),
        float(image.axis2.values[-1]),
    ]


def plot_spectrum(
    image: TransmissionImage,
    path: Path | str,
    markers: Sequence[float] = (),
    title: str | None = None,
) -> Path:
    """|S21| over resonator bias and probe frequency, with optional bias markers."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.imshow(
        np.abs(image.values).T,
        origin="lower",
        aspect="auto",
        extent=_extent(image),
        cmap="viridis",
        interpolation="nearest",
    )
    for marker in markers:
        ax.axvline(marker, color="w", lw=0.8, ls="--")
    ax.set_xlabel(f"{image.axis1.label} [{image.axis1.unit or 'control'}]")
    ax.set_ylabel("probe frequency [rad/ns]")
    ax.set_title(title or image.artifact_id)
    return _save(fig, path)


def plot_scan(
    image: TransmissionImage,
    path: Path | str,
    centers: np.ndarray | None = None,
    title: str | None = None,
) -> Path:
    """Two-bias scan at a fixed probe frequency with the detected symmetry centers."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(
        np.abs(image.values).T,
        origin="lower",
        aspect="equal",
        extent=_extent(image),
        cmap="magma",
        interpolation="nearest",
    )
    if centers is not None and len(centers):
        ax.plot(centers[:, 0], centers[:, 1], "c+", ms=8, mew=1.2, label="symmetry centers")
        ax.legend(loc="upper right")
    ax.set_xlabel(image.axis1.label)
    ax.set_ylabel(image.axis2.label)
    ax.set_title(title or image.artifact_id)
    return _save(fig, path)


def plot_convergence(history: Sequence[IterationRecord], path: Path | str) -> Path:
    """Box plot of off-diagonal magnitudes per iteration (Phi0/V first, then mPhi0/Phi0)."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5), gridspec_kw={"width_ratios": [1, max(1, len(history) - 1)]})
    first = [r for r in history if r.C_n.unit is UnitKind.VOLT]
    later = [r for r in history if r.C_n.unit is UnitKind.FLUX]
    if first:
        axes[0].boxplot([np.abs(first[0].C_n.off_diagonal())])
        axes[0].set_xticks([1], [str(first[0].n)])
        axes[0].set_yscale("log")
        axes[0].set_ylabel("|C(1)'| off-diagonal [Phi0/V]")
    if later:
        axes[1].boxplot([np.abs(r.C_n.off_diagonal()) * 1e3 for r in later])
        axes[1].set_xticks(range(1, len(later) + 1), [str(r.n) for r in later])
        axes[1].set_yscale("log")
        axes[1].set_ylabel("|C(n)'| off-diagonal [mPhi0/Phi0]")
    for ax in axes:
        ax.set_xlabel("iteration")
    return _save(fig, path)


def plot_theta(theta: np.ndarray, labels: Sequence[str], path: Path | str) -> Path:
    """Residual crosstalk heat map in mPhi0/Phi0."""
    theta = np.asarray(theta, dtype=float)
    limit = max(float(np.max(np.abs(theta))), 1e-6)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    mesh = ax.imshow(theta, cmap="RdBu_r", vmin=-limit, vmax=limit, interpolation="nearest")
    ax.set_xticks(range(len(labels)), labels, rotation=90)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("source line")
    ax.set_ylabel("loop")
    fig.colorbar(mesh, ax=ax, label="Theta [mPhi0/Phi0]")
    return _save(fig, path)


def plot_offset_shifts(
    labels: Sequence[str],
    shifts: np.ndarray,
    path: Path | str,
    errors: np.ndarray | None = None,
    names: Sequence[str] | None = None,
) -> Path:
    """Per-loop offset shifts in mPhi0, one series per row of ``shifts``."""
    shifts = np.atleast_2d(shifts) * 1e3
    positions = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for row, series in enumerate(shifts):
        ax.errorbar(
            positions + 0.1 * (row - (len(shifts) - 1) / 2),
            series,
            yerr=None if errors is None else np.atleast_2d(errors)[row] * 1e3,
            fmt="o",
            ms=4,
            capsize=2,
            label=None if names is None else names[row],
        )
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xticks(positions, labels, rotation=90)
    ax.set_ylabel("offset shift [mPhi0]")
    if names is not None:
        ax.legend()
    return _save(fig, path)


def plot_spectra_pair(
    grid: np.ndarray,
    traces: np.ndarray,
    settings: Sequence[float],
    path: Path | str,
    source: str = "source",
) -> Path:
    """Resonator frequency over one period at several source settings."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for trace, setting in zip(traces, settings):
        ax.plot(grid, trace, lw=1.2, label=f"{source} = {setting:g} V")
    ax.set_xlabel("resonator bias [V]")
    ax.set_ylabel("resonance [rad/ns]")
    ax.legend()
    return _save(fig, path)


def plot_drift(hours: Sequence[float], shifts: np.ndarray, truth: np.ndarray, path: Path | str) -> Path:
    """RMS of recovered and true offset changes per epoch, in mPhi0."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(hours, np.sqrt(np.mean(np.atleast_2d(shifts) ** 2, axis=1)) * 1e3, "o-", label="recovered")
    ax.plot(hours, np.sqrt(np.mean(np.atleast_2d(truth) ** 2, axis=1)) * 1e3, "s--", label="simulated")
    ax.set_xlabel("hours")
    ax.set_ylabel("RMS offset change [mPhi0]")
    ax.legend()
    return _save(fig, path)
