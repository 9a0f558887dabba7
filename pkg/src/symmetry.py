"""Image analysis: periods, translations, mirror centers and point-reflection lattices.

Images are indexed ``(i, j)`` with ``i`` running along the swept bias (``axis1``) and
``j`` along the second axis (probe frequency or a second bias). Positions returned by
this module are fractional pixels unless a function says otherwise.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage, optimize, signal, spatial
from skimage import feature, filters, registration

from src import constants, log
from src.device import FREQUENCY, TransmissionImage
from src.errors import (
    ContractViolationError,
    InsufficientLatticeError,
    InsufficientRangeError,
    LineDetectionError,
    LowConfidenceError,
    PeakFitError,
    RankDeficiencyError,
)

logger = log.get_logger(__name__)

__all__ = (
    "CorrelationProfile",
    "DetectedLine",
    "PeriodOffset",
    "RecurrencePlot",
    "SymmetryLattice",
    "Translation",
    "background_filter",
    "detect_lines",
    "detect_symmetry_centers",
    "dip_frequency",
    "dump_map",
    "fit_affine_lattice",
    "locate_reflection_center",
    "locate_symmetry_center",
    "median_smooth",
    "mirror_window",
    "period_and_offset",
    "point_reflection_correlation",
    "preprocess",
    "recurrence_plot",
    "reflection_correlation",
    "refine_peak_lorentzian",
    "register_translation",
)

ImageLike = TransmissionImage | np.ndarray

DEBUG_DIR = os.getenv("CISCIQ_DEBUG_DIR")


@dataclass(frozen=True)
class RecurrencePlot:
    """Binary recurrence plot ``R[i1, j1]`` between the rows of two images.

    ``epsilon`` is the distance threshold for a classical plot, or the Otsu threshold
    on the edge map for an automatic one (``nan`` when the edge map was constant).
    """

    values: np.ndarray
    epsilon: float
    automatic: bool = False

    @property
    def empty(self) -> bool:
        return not bool(np.any(self.values))


@dataclass(frozen=True)
class CorrelationProfile:
    """Correlation coefficients with a validity mask.

    ``positions`` holds the pixel coordinate of every sample along each axis.
    """

    rho: np.ndarray
    valid: np.ndarray
    positions: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self) -> None:
        rho = np.asarray(self.rho, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if rho.shape != valid.shape:
            msg = "correlation values and mask differ in shape"
            raise ContractViolationError(msg)
        positions = self.positions or tuple(np.arange(size, dtype=float) for size in rho.shape)
        if len(positions) != rho.ndim or any(
            len(axis) != size for axis, size in zip(positions, rho.shape)
        ):
            msg = "correlation positions do not match the profile shape"
            raise ContractViolationError(msg)
        object.__setattr__(self, "rho", np.clip(np.where(valid, rho, 0.0), -1.0, 1.0))
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "positions", tuple(np.asarray(p, dtype=float) for p in positions))

    def best(self) -> int | tuple[int, ...]:
        """Index of the largest valid coefficient."""
        if not np.any(self.valid):
            msg = "correlation profile has no valid entries"
            raise InsufficientRangeError(msg)
        flat = int(np.argmax(np.where(self.valid, self.rho, -np.inf)))
        index = np.unravel_index(flat, self.rho.shape)
        return int(index[0]) if self.rho.ndim == 1 else tuple(int(i) for i in index)


@dataclass(frozen=True)
class DetectedLine:
    """A 45 degree line ``j = slope * i + position`` found in a recurrence plot."""

    offset: int
    position: float
    votes: float
    slope: float


@dataclass(frozen=True)
class PeriodOffset:
    """Result of :func:`period_and_offset`.

    ``zero`` is the axis coordinate of the integer-flux mirror center closest to the
    requested origin; ``centers_px`` lists every refined mirror center.
    """

    period_px: float
    period: float
    zero_px: float
    zero: float
    centers_px: np.ndarray
    dip_frequencies: tuple[float, float]


@dataclass(frozen=True)
class SymmetryLattice:
    """Affine map ``l = matrix @ u + offset`` sending centers onto lattice points."""

    centers: np.ndarray
    matrix: np.ndarray
    offset: np.ndarray
    lattice_points: np.ndarray
    residual: float

    def predict(self, lattice: np.ndarray) -> np.ndarray:
        """Control coordinates of the given lattice points."""
        lattice = np.atleast_2d(lattice)
        return np.linalg.solve(self.matrix, (lattice - self.offset).T).T


@dataclass(frozen=True)
class Translation:
    """Shift ``d`` such that ``B(x) ~ A(x - d)``, in pixels per axis."""

    shift: tuple[float, float]
    confidence: float


def _values(img: ImageLike) -> np.ndarray:
    return img.values if isinstance(img, TransmissionImage) else np.asarray(img)


def _real(values: np.ndarray) -> np.ndarray:
    return np.abs(values) if np.iscomplexobj(values) else np.asarray(values, dtype=float)


def dump_map(name: str, values: np.ndarray, directory: Path | str | None = DEBUG_DIR) -> None:
    """Write a map as grayscale PNG plus CSV when a debug directory is configured."""
    if directory is None:
        return
    from src import plots

    plots.save_map(np.asarray(values, dtype=float), Path(directory) / name)


def background_filter(img: TransmissionImage) -> TransmissionImage:
    """Divide every frequency column by its complex median over the bias axis."""
    values = img.values
    if values.shape[0] < 3:  # noqa: PLR2004
        msg = f"background filtering needs at least 3 bias points, got {values.shape[0]}"
        raise ContractViolationError(msg)
    if np.iscomplexobj(values):
        median = np.median(values.real, axis=0) + 1j * np.median(values.imag, axis=0)
    else:
        median = np.median(values, axis=0)
    median = np.where(np.abs(median) > np.finfo(float).tiny, median, 1.0)
    return img.with_values(values / median[None, :])


def median_smooth(img: TransmissionImage, window: int = constants.Analysis.median_window) -> TransmissionImage:
    """Median filter each bias row along the frequency axis."""
    if window < 1 or window % 2 == 0 or window > img.values.shape[1]:
        msg = f"median window must be odd and at most {img.values.shape[1]}, got {window}"
        raise ContractViolationError(msg)
    if window == 1:
        return img

    def smooth(part: np.ndarray) -> np.ndarray:
        return ndimage.median_filter(part, size=(1, window), mode="nearest")

    values = img.values
    if np.iscomplexobj(values):
        return img.with_values(smooth(values.real) + 1j * smooth(values.imag))
    return img.with_values(smooth(np.asarray(values, dtype=float)))


def _features(values: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(values):
        return np.hstack([values.real, values.imag])
    return np.asarray(values, dtype=float)


def recurrence_plot(
    A: ImageLike,  # noqa: N803
    B: ImageLike,  # noqa: N803
    epsilon: float | Literal["auto"] = "auto",
) -> RecurrencePlot:
    """Recurrence plot of the rows of ``A`` against the rows of ``B``.

    With a numeric ``epsilon`` the plot is ``D <= epsilon`` on the Euclidean row distance
    matrix ``D``. With ``"auto"`` the distance matrix goes through a horizontal then a
    vertical Sobel filter (absolute value after each) and Otsu's threshold.
    """
    a = _features(_values(A))
    b = _features(_values(B))
    if a.shape[1] != b.shape[1]:
        msg = f"images have different second axes ({a.shape[1]} vs {b.shape[1]})"
        raise ContractViolationError(msg)
    distances = spatial.distance.cdist(a, b)

    if epsilon != "auto":
        if epsilon < 0:
            msg = "recurrence threshold must be non-negative"
            raise ContractViolationError(msg)
        return RecurrencePlot(distances <= epsilon, float(epsilon))

    edges = np.abs(filters.sobel_v(np.abs(filters.sobel_h(distances))))
    if np.ptp(edges) <= np.finfo(float).eps * max(1.0, float(np.max(edges))):
        logger.warning("Recurrence edge map is constant, returning an empty plot")
        return RecurrencePlot(np.zeros(edges.shape, dtype=bool), float("nan"), automatic=True)
    threshold = float(filters.threshold_otsu(edges))
    return RecurrencePlot(edges > threshold, threshold, automatic=True)


def _parabola_vertex(left: float, centre: float, right: float) -> float:
    curvature = left - 2 * centre + right
    if curvature >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def detect_lines(
    R: RecurrencePlot | np.ndarray,  # noqa: N803
    window: tuple[float, float] | None = None,
    *,
    angle_span: float = constants.Analysis.hough_angle_span,
    angles: int = constants.Analysis.hough_angles,
    vote_floor: float = constants.Analysis.hough_vote_floor,
    separation: int = constants.Analysis.line_separation,
) -> list[DetectedLine]:
    """Find near-45 degree lines ``j = i + c`` and rank them by votes.

    A plot of ``A`` against ``B`` with ``B[j] = A[j - d]`` has its line at ``c = d``.

    Parameters
    ----------
    R : RecurrencePlot | np.ndarray
        The plot.
    window : tuple[float, float] | None
        Inclusive intercept range in pixels; defaults to every intercept.

    Raises
    ------
    LineDetectionError
        If the plot is empty or no line reaches the vote floor.
    """
    values = np.asarray(R.values if isinstance(R, RecurrencePlot) else R, dtype=bool)
    rows, cols = np.nonzero(values)
    if rows.size == 0:
        msg = "recurrence plot is empty"
        raise LineDetectionError(msg)

    n1, n2 = values.shape
    lo, hi = window if window is not None else (-(n1 - 1), n2 - 1)
    first, last = int(np.ceil(lo)), int(np.floor(hi))
    if last < first:
        msg = f"empty intercept window {window}"
        raise ContractViolationError(msg)
    size = last - first + 1

    slopes = np.tan(np.deg2rad(45.0 + np.linspace(-angle_span, angle_span, angles)))
    accumulator = np.zeros((slopes.size, size))
    for k, slope in enumerate(slopes):
        intercepts = np.rint(cols - slope * rows).astype(int) - first
        keep = (intercepts >= 0) & (intercepts < size)
        accumulator[k] = np.bincount(intercepts[keep], minlength=size)

    # votes per crossed cell
    offsets = np.arange(first, last + 1)
    lengths = np.clip(np.minimum(n1, n2 - offsets) - np.maximum(0, -offsets), 1, None)
    density = accumulator / lengths
    votes = accumulator.max(axis=0)
    which = density.argmax(axis=0)
    smooth = ndimage.gaussian_filter1d(density.max(axis=0), 1.0, mode="constant")
    floor = max(3.0, vote_floor * min(n1, n2))

    padded = np.pad(smooth, 1, constant_values=-np.inf)
    peaks = np.flatnonzero((smooth >= padded[:-2]) & (smooth >= padded[2:]) & (smooth > 0))
    raw = ndimage.maximum_filter1d(votes, 3, mode="constant")
    peaks = peaks[raw[peaks] >= floor]
    if peaks.size == 0:
        msg = f"no line reached {floor:.0f} votes in intercept window [{first}, {last}]"
        raise LineDetectionError(msg)

    lines: list[DetectedLine] = []
    for peak in peaks[np.argsort(-smooth[peaks], kind="stable")]:
        if any(abs(line.offset - (first + peak)) < separation for line in lines):
            continue
        delta = 0.0
        if 0 < peak < size - 1:
            row = density[which[peak]]
            delta = _parabola_vertex(row[peak - 1], row[peak], row[peak + 1])
        lines.append(
            DetectedLine(
                offset=int(first + peak),
                position=float(first + peak + delta),
                votes=float(raw[peak]),
                slope=float(slopes[which[peak]]),
            ),
        )
    logger.debug(f"detected {len(lines)} line(s), best at {lines[0].position:.2f} px")
    return lines


def _mirror_profile(a: np.ndarray, sums: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson coefficient of rows ``i`` against rows ``s - i`` for every ``s`` in ``sums``."""
    n = a.shape[0]
    width = a.shape[1]
    products = signal.fftconvolve(a, a, axes=0).sum(axis=1)
    total = np.concatenate([[0.0], np.cumsum(a.sum(axis=1))])
    squares = np.concatenate([[0.0], np.cumsum((a**2).sum(axis=1))])

    lo = np.maximum(0, sums - n + 1)
    hi = np.minimum(n - 1, sums)
    count = (hi - lo + 1) * width
    mean = (total[hi + 1] - total[lo]) / count
    variance = (squares[hi + 1] - squares[lo]) / count - mean**2
    covariance = products[sums] / count - mean**2

    scale = max(float(np.var(a)), np.finfo(float).tiny)
    valid = (hi - lo + 1 >= 2) & (variance > 1e-12 * scale)  # noqa: PLR2004
    rho = np.where(valid, covariance / np.where(valid, variance, 1.0), 0.0)
    return np.clip(rho, -1.0, 1.0), valid


def reflection_correlation(A: ImageLike, mask_width: float | None = None) -> CorrelationProfile:  # noqa: N803
    """Correlation of ``A`` with its reflection about every bias row ``j``.

    Rows ``i`` pair with rows ``2j - i`` over the overlap of the two. Rows within
    ``mask_width`` of either border are masked.
    """
    a = _real(_values(A))
    if a.ndim == 1:
        a = a[:, None]
    n = a.shape[0]
    rho, valid = _mirror_profile(a, 2 * np.arange(n))
    if mask_width:
        index = np.arange(n)
        valid &= (index >= mask_width) & (index <= n - 1 - mask_width)
    return CorrelationProfile(rho, valid)


def _lorentzian(x: np.ndarray, amplitude: float, centre: float, width: float, base: float) -> np.ndarray:
    return amplitude / (1 + ((x - centre) / width) ** 2) + base


def refine_peak_lorentzian(
    profile: CorrelationProfile,
    peak: int,
    window: int = constants.Analysis.lorentzian_window,
) -> float:
    """Sub-sample peak position from a Lorentzian fit around ``peak``.

    Returns the position in the profile's pixel coordinates. Falls back to the
    parabola vertex if the fit fails.

    Raises
    ------
    PeakFitError
        If the peak has fewer than two valid neighbours on a side, is not a local
        maximum, or the profile is flat.
    """
    rho = profile.rho
    valid = profile.valid
    positions = profile.positions[0]
    if rho.ndim != 1:
        msg = "Lorentzian refinement works on 1-D profiles"
        raise ContractViolationError(msg)
    if peak < 2 or peak > rho.size - 3 or not np.all(valid[peak - 2 : peak + 3]):  # noqa: PLR2004
        msg = f"peak at sample {peak} has fewer than two valid neighbours on a side"
        raise PeakFitError(msg)

    half = max(2, window // 2)
    lo = peak
    while lo > max(0, peak - half) and valid[lo - 1]:
        lo -= 1
    hi = peak
    while hi < min(rho.size - 1, peak + half) and valid[hi + 1]:
        hi += 1
    x = positions[lo : hi + 1] - positions[peak]
    y = rho[lo : hi + 1]
    if np.ptp(y) <= 1e-12:  # noqa: PLR2004
        msg = "correlation profile is flat around the peak"
        raise PeakFitError(msg)
    if rho[peak] < rho[peak - 1] or rho[peak] < rho[peak + 1]:
        msg = f"sample {peak} is not a local maximum"
        raise PeakFitError(msg)

    step = float(np.median(np.diff(positions)))
    vertex = step * _parabola_vertex(rho[peak - 1], rho[peak], rho[peak + 1])
    guess = (float(y.max() - y.min()), vertex, step * half / 2, float(y.min()))
    try:
        with warnings.catch_warnings():
            # exact profiles leave no residual to estimate a covariance from
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            params, _ = optimize.curve_fit(_lorentzian, x, y, p0=guess, maxfev=2000)
        centre = float(params[1])
        if not np.all(np.isfinite(params)) or params[0] <= 0 or abs(centre) > abs(x).max():
            msg = "Lorentzian centre left the fit window"
            raise RuntimeError(msg)  # noqa: TRY301
    except (RuntimeError, ValueError) as exc:
        logger.warning(f"Lorentzian fit failed ({exc}), using the parabola vertex")
        centre = vertex
    return float(positions[peak] + centre)


def _window_rho(block: np.ndarray, *, point: bool = False) -> float:
    """Pearson coefficient of a block against its mirror image in the rows.

    With ``point`` every axis is reversed, giving the point reflection.
    """
    mirrored = np.flip(block) if point else block[::-1]
    x = block - block.mean()
    y = mirrored - mirrored.mean()
    norm = np.sqrt(np.sum(x * x) * np.sum(y * y))
    return float(np.sum(x * y) / norm) if norm > 0 else 0.0


def _rows_about(s: int, width: float) -> slice:
    return slice(int(np.ceil(s / 2 - width)), int(np.floor(s / 2 + width)) + 1)


def locate_reflection_center(
    img: ImageLike,
    guess_px: float,
    radius: int,
    halfwidth: float,
) -> float:
    """Mirror center near ``guess_px`` on a fixed symmetric window.

    Reflections are sampled every half pixel within ``radius`` of the guess using the
    same number of rows for every sample, then refined by :func:`refine_peak_lorentzian`.
    """
    a = _real(_values(img))
    if a.ndim == 1:
        a = a[:, None]
    n = a.shape[0]
    guess = float(guess_px)
    for _ in range(3):
        sums = int(np.rint(2 * guess)) + np.arange(-2 * radius, 2 * radius + 1)
        sums = sums[(sums >= 0) & (sums <= 2 * (n - 1))]
        centres = sums / 2
        width = min(halfwidth, centres.min(), (n - 1) - centres.max())
        if sums.size < 5 or width < 1:  # noqa: PLR2004
            msg = f"mirror center near {guess_px:.1f} px is too close to the sweep edge"
            raise InsufficientRangeError(msg)
        rho = np.array([_window_rho(a[_rows_about(s, width)]) for s in sums])
        peak = int(np.argmax(rho))
        if 2 <= peak <= sums.size - 3:  # noqa: PLR2004
            break
        guess = float(centres[peak])
    profile = CorrelationProfile(rho, np.ones(rho.size, dtype=bool), (centres,))
    return refine_peak_lorentzian(profile, peak)


def mirror_window(period_px: float) -> tuple[int, float]:
    """Search radius and half window (px) for mirror centers of a given period."""
    return max(2, int(round(period_px / 16))), period_px / 4


def dip_frequency(img: TransmissionImage, row: float) -> float:
    """Frequency of the transmission minimum in the bias row nearest ``row``."""
    if img.axis2.label != FREQUENCY:
        msg = "dip frequencies need a frequency axis"
        raise ContractViolationError(msg)
    index = int(np.clip(np.rint(row), 0, img.shape[0] - 1))
    trace = _real(img.values[index])
    low = int(np.argmin(trace))
    delta = 0.0
    if 0 < low < trace.size - 1:
        delta = -_parabola_vertex(-trace[low - 1], -trace[low], -trace[low + 1])
    values = img.axis2.values
    step = values[1] - values[0] if values.size > 1 else 0.0
    return float(values[low] - delta * step)


def preprocess(img: TransmissionImage, window: int = constants.Analysis.median_window) -> TransmissionImage:
    """Background filter, median smoothing and magnitude, as used before every 1-D analysis."""
    filtered = median_smooth(background_filter(img), window)
    return filtered.with_values(np.abs(filtered.values))


def period_and_offset(
    img: TransmissionImage,
    expected_period: float | None = None,
    *,
    origin: float = 0.0,
    median_window: int = constants.Analysis.median_window,
) -> PeriodOffset:
    """Resonator period and integer-flux coordinate from a bias/frequency image.

    Parameters
    ----------
    img : TransmissionImage
        Resonator bias along ``axis1`` and probe frequency along ``axis2``.
    expected_period : float | None
        Expected period in axis units; restricts the recurrence search window.
    origin : float
        Axis coordinate the reported integer-flux center should be closest to.

    Raises
    ------
    InsufficientRangeError
        If the sweep covers fewer than two periods.
    LineDetectionError
        If no recurrence line is found.
    """
    step = img.axis1.step
    n = img.shape[0]
    clean = preprocess(img, median_window)
    magnitude = clean.values

    if expected_period is not None:
        expected_px = abs(expected_period / step)
        window = (0.5 * expected_px, 1.5 * expected_px)
    else:
        window = (4.0, n / 2)
    plot = recurrence_plot(magnitude, magnitude, "auto")
    dump_map(f"recurrence_{img.artifact_id or 'image'}", plot.values)
    lines = detect_lines(plot, window)
    rough = lines[0].position
    if n < 2 * rough:
        msg = f"sweep of {n} px covers fewer than two periods of {rough:.1f} px"
        raise InsufficientRangeError(msg)

    profile = reflection_correlation(magnitude, mask_width=rough / 2)
    start = profile.best()
    radius, halfwidth = mirror_window(rough)
    margin = radius + halfwidth

    centres = {0: locate_reflection_center(magnitude, start, radius, halfwidth)}
    half = rough / 2
    for direction in (1, -1):
        k = direction
        while True:
            guess = centres[k - direction] + direction * half
            if guess - margin < 0 or guess + margin > n - 1:
                break
            centres[k] = locate_reflection_center(magnitude, guess, radius, halfwidth)
            found = sorted(centres)
            if len(found) >= 2:  # noqa: PLR2004
                half = float(np.polyfit(found, [centres[i] for i in found], 1)[0])
            k += direction

    ks = np.array(sorted(centres))
    positions = np.array([centres[k] for k in ks])
    if ks.size < 3 or not np.any(ks % 2 == 0) or not np.any(ks % 2 == 1):  # noqa: PLR2004
        msg = f"only {ks.size} mirror center(s) fit inside the sweep"
        raise InsufficientRangeError(msg)
    slope, intercept = np.polyfit(ks, positions, 1)
    period_px = 2 * float(slope)

    dips = {
        parity: float(np.mean([dip_frequency(clean, p) for k, p in zip(ks, positions) if k % 2 == parity]))
        for parity in (0, 1)
    }
    integer = 0 if dips[0] >= dips[1] else 1
    fitted = intercept + slope * ks
    candidates = fitted[ks % 2 == integer]
    origin_px = float(img.axis1.px(origin))
    zero_px = float(candidates[np.argmin(np.abs(candidates - origin_px))])
    logger.debug(
        f"{img.artifact_id}: period {period_px:.3f} px, integer center at {zero_px:.3f} px "
        f"({ks.size} centers)",
    )
    return PeriodOffset(
        period_px=period_px,
        period=period_px * step,
        zero_px=zero_px,
        zero=float(img.axis1.at(zero_px)),
        centers_px=positions,
        dip_frequencies=(dips[integer], dips[1 - integer]),
    )


def _box_sums(table: np.ndarray, lo: np.ndarray, hi: np.ndarray, lo2: np.ndarray, hi2: np.ndarray) -> np.ndarray:
    return (
        table[hi[:, None] + 1, hi2[None, :] + 1]
        - table[lo[:, None], hi2[None, :] + 1]
        - table[hi[:, None] + 1, lo2[None, :]]
        + table[lo[:, None], lo2[None, :]]
    )


def _summed_area(values: np.ndarray) -> np.ndarray:
    table = np.zeros((values.shape[0] + 1, values.shape[1] + 1))
    table[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    return table


def point_reflection_correlation(
    A: ImageLike,  # noqa: N803
    mask_width: float | Sequence[float] | None = None,
) -> CorrelationProfile:
    """Correlation ``rho(j1, j2)`` of ``A`` with ``A(2 j1 - i1, 2 j2 - i2)`` over the overlap."""
    a = _real(_values(A))
    if a.ndim != 2:  # noqa: PLR2004
        msg = "point reflection needs a 2-D image"
        raise ContractViolationError(msg)
    n1, n2 = a.shape
    products = signal.fftconvolve(a, a)[::2, ::2]
    total = _summed_area(a)
    squares = _summed_area(a * a)

    s1 = 2 * np.arange(n1)
    s2 = 2 * np.arange(n2)
    lo1, hi1 = np.maximum(0, s1 - n1 + 1), np.minimum(n1 - 1, s1)
    lo2, hi2 = np.maximum(0, s2 - n2 + 1), np.minimum(n2 - 1, s2)
    count = np.outer(hi1 - lo1 + 1, hi2 - lo2 + 1).astype(float)
    mean = _box_sums(total, lo1, hi1, lo2, hi2) / count
    variance = _box_sums(squares, lo1, hi1, lo2, hi2) / count - mean**2
    covariance = products / count - mean**2

    scale = max(float(np.var(a)), np.finfo(float).tiny)
    valid = (count >= 2) & (variance > 1e-12 * scale)  # noqa: PLR2004
    if mask_width is not None:
        m1, m2 = np.broadcast_to(np.asarray(mask_width, dtype=float), (2,))
        i1 = np.arange(n1)[:, None]
        i2 = np.arange(n2)[None, :]
        valid &= (i1 >= m1) & (i1 <= n1 - 1 - m1) & (i2 >= m2) & (i2 <= n2 - 1 - m2)
    rho = np.where(valid, covariance / np.where(valid, variance, 1.0), 0.0)
    return CorrelationProfile(rho, valid)


def _quadratic_peak(patch: np.ndarray) -> np.ndarray:
    """Stationary point of a quadratic fitted to a 3x3 patch, in samples from its centre."""
    offsets = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=float)
    y, x = offsets[:, 0], offsets[:, 1]
    design = np.column_stack([np.ones(9), y, x, y * y, y * x, x * x])
    coefficients = np.linalg.lstsq(design, patch.ravel(), rcond=None)[0]
    hessian = np.array(
        [[2 * coefficients[3], coefficients[4]], [coefficients[4], 2 * coefficients[5]]],
    )
    if np.linalg.det(hessian) <= 0 or hessian[0, 0] >= 0:
        return np.zeros(2)
    return np.clip(np.linalg.solve(hessian, -coefficients[1:3]), -0.5, 0.5)


def locate_symmetry_center(img: ImageLike, guess_px: Sequence[float], halfwidth: float) -> np.ndarray:
    """Point-reflection center near ``guess_px`` on a fixed window, sampled every half pixel."""
    a = _real(_values(img))
    n1, n2 = a.shape
    base = np.rint(2 * np.asarray(guess_px, dtype=float)).astype(int)
    steps = np.arange(-2, 3)
    for _ in range(4):
        s1 = base[0] + steps
        s2 = base[1] + steps
        w1 = min(halfwidth, s1.min() / 2, (n1 - 1) - s1.max() / 2)
        w2 = min(halfwidth, s2.min() / 2, (n2 - 1) - s2.max() / 2)
        if w1 < 1 or w2 < 1:
            msg = f"symmetry center near {tuple(np.round(guess_px, 1))} is too close to the edge"
            raise InsufficientRangeError(msg)
        grid = np.array(
            [
                [_window_rho(a[_rows_about(p, w1), _rows_about(q, w2)], point=True) for q in s2]
                for p in s1
            ],
        )
        peak = np.array(np.unravel_index(int(np.argmax(grid)), grid.shape))
        if np.all((peak >= 1) & (peak <= 3)):  # noqa: PLR2004
            break
        base = base + peak - 2
    peak = np.clip(peak, 1, 3)
    patch = grid[peak[0] - 1 : peak[0] + 2, peak[1] - 1 : peak[1] + 2]
    return (base + peak - 2 + _quadratic_peak(patch)) / 2


def detect_symmetry_centers(
    rho: CorrelationProfile,
    spacing: float,
    image: ImageLike | None = None,
    minimum: int = 3,
    *,
    distance: float = constants.Analysis.blob_filter_distance,
    floor: float = constants.Analysis.correlation_floor,
) -> np.ndarray:
    """Sub-pixel point-reflection centers from a 2-D correlation map.

    Determinant-of-Hessian blobs at a scale tied to ``spacing`` are kept when they lie
    within ``distance`` pixels of a local maximum of ``rho``. Centers are refined by a
    quadratic fit on ``rho``, or on windowed half-pixel correlations when ``image`` is
    given.

    Returns
    -------
    np.ndarray
        ``(K, 2)`` centers in pixels, sorted by correlation.

    Raises
    ------
    InsufficientLatticeError
        If fewer than ``minimum`` centers are found, or three or more are required and
        they are collinear.
    """
    if spacing <= 4:  # noqa: PLR2004
        msg = f"expected center spacing must exceed 4 px, got {spacing}"
        raise ContractViolationError(msg)
    values = rho.rho
    if values.ndim != 2 or not np.any(rho.valid):  # noqa: PLR2004
        msg = "symmetry centers need a 2-D map with valid entries"
        raise InsufficientLatticeError(msg)
    filled = np.where(rho.valid, values, float(values[rho.valid].min()))
    sigma = max(1.0, spacing / 8)
    blobs = feature.peak_local_max(
        feature.hessian_matrix_det(filled, sigma=sigma, approximate=False),
        min_distance=max(1, int(spacing / 4)),
        threshold_abs=np.finfo(float).eps,
        exclude_border=False,
    )

    size = 2 * int(np.ceil(distance)) + 1
    maxima = np.argwhere(
        (ndimage.maximum_filter(filled, size=size, mode="nearest") == filled)
        & rho.valid
        & (filled >= floor),
    )
    picked: list[tuple[int, int]] = []
    if maxima.size and blobs.size:
        gaps = spatial.distance.cdist(blobs, maxima)
        for row in range(len(blobs)):
            nearest = int(np.argmin(gaps[row]))
            if gaps[row, nearest] <= distance:
                candidate = (int(maxima[nearest, 0]), int(maxima[nearest, 1]))
                if candidate not in picked:
                    picked.append(candidate)

    n1, n2 = values.shape
    centres = []
    for i, j in sorted(picked, key=lambda p: -filled[p]):
        if image is not None:
            try:
                centres.append(locate_symmetry_center(image, (i, j), spacing / 2))
                continue
            except InsufficientRangeError:
                pass
        position = np.array([i, j], dtype=float)
        for _ in range(3):
            ci = int(np.clip(np.rint(position[0]), 1, n1 - 2))
            cj = int(np.clip(np.rint(position[1]), 1, n2 - 2))
            shift = _quadratic_peak(filled[ci - 1 : ci + 2, cj - 1 : cj + 2])
            position = np.array([ci, cj]) + shift
            if np.all(np.abs(shift) < 0.5):  # noqa: PLR2004
                break
        centres.append(position)
    centres_array = np.array(centres).reshape(-1, 2)
    if image is None:
        centres_array = np.column_stack(
            [
                np.interp(centres_array[:, 0], np.arange(n1), rho.positions[0]),
                np.interp(centres_array[:, 1], np.arange(n2), rho.positions[1]),
            ],
        )

    if len(centres_array) < minimum:
        msg = f"found {len(centres_array)} symmetry center(s), need {minimum}"
        raise InsufficientLatticeError(msg)
    if minimum >= 3 and np.linalg.matrix_rank(centres_array - centres_array.mean(axis=0), tol=1e-6) < 2:  # noqa: PLR2004
        msg = "symmetry centers are collinear"
        raise InsufficientLatticeError(msg)
    logger.debug(f"found {len(centres_array)} symmetry centers")
    return centres_array


def _solve_affine(points: np.ndarray, lattice: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    design = np.hstack([points, np.ones((len(points), 1))])
    params = np.linalg.lstsq(design, lattice, rcond=None)[0]
    return params[:2].T, params[2]


def fit_affine_lattice(
    centers: np.ndarray,
    prior: tuple[np.ndarray, np.ndarray] | None = None,
    spacing: float = 0.5,
    iterations: int = constants.Analysis.lattice_iterations,
) -> SymmetryLattice:
    """Least-squares affine map sending ``centers`` onto the lattice ``spacing * Z^2``.

    Lattice indices are assigned relative to the center nearest the prior's origin and
    grown outwards over nearest neighbours, then jointly refined. The fitted offset is
    moved by whole lattice vectors to lie closest to the prior offset.

    Parameters
    ----------
    centers : np.ndarray
        ``(K, 2)`` center coordinates.
    prior : tuple[np.ndarray, np.ndarray] | None
        Approximate ``(matrix, offset)``; identity and zero by default.

    Raises
    ------
    InsufficientLatticeError
        Fewer than three centers.
    RankDeficiencyError
        The centers or their lattice assignment are degenerate.
    """
    points = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(points) < 3:  # noqa: PLR2004
        msg = f"an affine lattice fit needs 3 centers, got {len(points)}"
        raise InsufficientLatticeError(msg)
    design = np.hstack([points, np.ones((len(points), 1))])
    if np.linalg.matrix_rank(design) < 3:  # noqa: PLR2004
        msg = "symmetry centers are collinear"
        raise RankDeficiencyError(msg)

    matrix, offset = (np.eye(2), np.zeros(2)) if prior is None else prior
    matrix = np.asarray(matrix, dtype=float)
    prior_offset = np.asarray(offset, dtype=float)
    offset = prior_offset

    seed = int(np.argmin(np.linalg.norm(points @ matrix.T + offset, axis=1)))
    order = np.argsort(np.linalg.norm(points - points[seed], axis=1), kind="stable")
    anchor = spacing * np.round((matrix @ points[seed] + offset) / spacing)

    count = min(len(points), 4)
    while True:
        subset = order[:count]
        relative = (points[subset] - points[seed]) @ matrix.T
        lattice = anchor + spacing * np.round(relative / spacing)
        if np.linalg.matrix_rank(design[subset]) == 3:  # noqa: PLR2004
            matrix, offset = _solve_affine(points[subset], lattice)
        if count == len(points):
            break
        count = min(len(points), 2 * count)

    keep = np.ones(len(points), dtype=bool)
    lattice = spacing * np.round((points @ matrix.T + offset) / spacing)
    for _ in range(iterations):
        matrix, offset = _solve_affine(points[keep], lattice[keep])
        updated = spacing * np.round((points @ matrix.T + offset) / spacing)
        errors = np.linalg.norm(points @ matrix.T + offset - updated, axis=1)
        outliers = errors > 0.3 * spacing
        stable = np.array_equal(updated, lattice) and not np.any(outliers & keep)
        lattice = updated
        if stable:
            break
        if keep.sum() - np.count_nonzero(outliers & keep) >= 3:  # noqa: PLR2004
            keep &= ~outliers

    if abs(np.linalg.det(matrix)) < 1e-12 or np.linalg.matrix_rank(  # noqa: PLR2004
        np.hstack([lattice[keep], np.ones((keep.sum(), 1))]),
    ) < 3:  # noqa: PLR2004
        msg = "lattice assignment is degenerate"
        raise RankDeficiencyError(msg)

    shift = spacing * np.round((prior_offset - offset) / spacing)
    offset = offset + shift
    lattice = lattice + shift
    residual = float(
        np.sqrt(np.mean(np.sum((points[keep] @ matrix.T + offset - lattice[keep]) ** 2, axis=1))),
    )
    if np.any(~keep):
        logger.warning(f"dropped {np.count_nonzero(~keep)} outlying symmetry center(s)")
    return SymmetryLattice(points[keep], matrix, offset, lattice[keep], residual)


def register_translation(
    A: ImageLike,  # noqa: N803
    B: ImageLike,  # noqa: N803
    *,
    window: bool = False,
    upsampling: int = constants.Analysis.registration_upsampling,
    floor: float = constants.Analysis.registration_floor,
) -> Translation:
    """Sub-pixel translation ``d`` with ``B(x) ~ A(x - d)`` by phase correlation.

    The shift comes from :func:`skimage.registration.phase_cross_correlation` on the
    normalised cross-power spectrum, refined to ``1 / upsampling`` of a pixel. The
    confidence is the Pearson coefficient of ``A`` against ``B`` moved back by ``d``.

    Raises
    ------
    LowConfidenceError
        If the confidence is below ``floor``.
    """
    a = _real(_values(A))
    b = _real(_values(B))
    if a.shape != b.shape or a.ndim != 2:  # noqa: PLR2004
        msg = f"registration needs two 2-D images of equal shape, got {a.shape} and {b.shape}"
        raise ContractViolationError(msg)
    a = a - a.mean()
    b = b - b.mean()
    reference, moving = a, b
    if window:
        taper = np.outer(
            signal.windows.tukey(a.shape[0], 0.25),
            signal.windows.tukey(a.shape[1], 0.25),
        )
        reference = a * taper
        moving = b * taper

    # the returned shift moves ``B`` onto ``A``
    shift, _, _ = registration.phase_cross_correlation(
        reference,
        moving,
        upsample_factor=upsampling,
        normalization="phase",
    )
    d = -np.asarray(shift, dtype=float)

    back = np.real(np.fft.ifft2(ndimage.fourier_shift(np.fft.fft2(b), -d)))
    x = a - a.mean()
    y = back - back.mean()
    norm = np.sqrt(np.sum(x * x) * np.sum(y * y))
    confidence = float(np.sum(x * y) / norm) if norm > 0 else 0.0
    if confidence < floor:
        raise LowConfidenceError(confidence, floor)
    return Translation((float(d[0]), float(d[1])), confidence)
