"""Run output directory: numeric files, image dumps, estimates and the manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import psutil

from src import __version__ as tool_version
from src import log
from src.device import TransmissionImage
from src.errors import CalibrationError, EstimateFormatError
from src.fluxmodel import CalibrationEstimate, CouplingMatrix, FluxVector, IterationRecord, UnitKind

logger = log.get_logger(__name__)

__all__ = (
    "ESTIMATE_FORMAT",
    "ArtifactWriter",
    "estimate_from_dict",
    "estimate_to_dict",
    "load_estimate",
    "sha256_file",
)

ESTIMATE_FORMAT = "ciscic-estimate"
NUMBER_FORMAT = "%.17g"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value: Any) -> Any:  # noqa: ANN401
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    msg = f"cannot serialise {type(value).__name__}"
    raise TypeError(msg)


def estimate_to_dict(estimate: CalibrationEstimate, labels: Sequence[str]) -> dict[str, Any]:
    return {
        "format": ESTIMATE_FORMAT,
        "version": 1,
        "labels": list(labels),
        "C_prime": estimate.C_prime.C.tolist(),
        "f0_prime": estimate.f0_prime.values.tolist(),
        "history": [
            {
                "n": record.n,
                "unit": record.C_n.unit.value,
                "C_n": record.C_n.C.tolist(),
                "f0_n": record.f0_n.values.tolist(),
                "skipped": list(record.skipped),
            }
            for record in estimate.history
        ],
    }


def estimate_from_dict(data: Mapping[str, Any], path: Path | str = "<estimate>") -> CalibrationEstimate:
    """Rebuild an estimate, re-checking it against its iteration history."""
    if not isinstance(data, Mapping) or data.get("format") != ESTIMATE_FORMAT:
        raise EstimateFormatError(path, f"not a {ESTIMATE_FORMAT} document")
    try:
        matrix = CouplingMatrix(np.array(data["C_prime"], dtype=float))
        offsets = FluxVector(np.array(data["f0_prime"], dtype=float))
        records = tuple(
            IterationRecord(
                int(entry["n"]),
                CouplingMatrix(np.array(entry["C_n"], dtype=float), unit=UnitKind(entry["unit"])),
                FluxVector(np.array(entry["f0_n"], dtype=float)),
                tuple(int(cell) for cell in entry.get("skipped", ())),
            )
            for entry in data.get("history", ())
        )
        return CalibrationEstimate(matrix, offsets, records)
    except (KeyError, TypeError, ValueError, CalibrationError) as exc:
        raise EstimateFormatError(path, f"{type(exc).__name__}: {exc}") from exc


def load_estimate(path: Path | str, labels: Sequence[str] | None = None) -> CalibrationEstimate:
    """Read ``estimate.json``; ``labels`` must match the device when given."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise EstimateFormatError(path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise EstimateFormatError(path, f"line {exc.lineno}: {exc.msg}") from exc
    estimate = estimate_from_dict(data, path)
    if labels is not None and list(data.get("labels", ())) != list(labels):
        raise EstimateFormatError(path, f"estimate loops {data.get('labels')} do not match the device")
    return estimate


class ArtifactWriter:
    """Write files under one run directory and keep the listing for the manifest.

    Parameters
    ----------
    root : Path
        Output directory, created if needed.
    """

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.timings: dict[str, float] = {}
        self.started = time.perf_counter()
        self._process = psutil.Process()
        self.peak_rss = 0
        self._sample()

    def _sample(self) -> None:
        self.peak_rss = max(self.peak_rss, int(self._process.memory_info().rss))

    def path(self, relative: str) -> Path:
        target = self.root / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def register(self, target: str | Path) -> Path:
        """Record a file written by someone else (plots), given relative to the root or not."""
        try:
            relative = Path(target).relative_to(self.root).as_posix()
        except ValueError:
            relative = Path(target).as_posix()
        if relative not in self.files:
            self.files.append(relative)
        self._sample()
        return self.root / relative

    def write_csv(self, relative: str, values: np.ndarray, header: Sequence[str] | None = None) -> Path:
        target = self.path(relative)
        np.savetxt(
            target,
            np.atleast_2d(np.asarray(values, dtype=float)),
            fmt=NUMBER_FORMAT,
            delimiter=",",
            header=",".join(header) if header else "",
            comments="",
        )
        return self.register(relative)

    def write_rows(self, relative: str, rows: Sequence[Mapping[str, Any]]) -> Path:
        """Write dictionaries as a CSV table with a header row."""
        target = self.path(relative)
        columns = list(rows[0]) if rows else []
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return self.register(relative)

    def write_json(self, relative: str, data: Any) -> Path:  # noqa: ANN401
        self.path(relative).write_text(
            json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n",
            encoding="utf-8",
        )
        return self.register(relative)

    def write_jsonl(self, relative: str, rows: Iterable[Any]) -> Path:
        with self.path(relative).open("w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, sort_keys=True, default=_jsonable) + "\n")
        return self.register(relative)

    def write_image(self, image: TransmissionImage, artifact_id: str | None = None) -> Path:
        """``images/<id>.csv`` holds |S21| (or the stored values); the sidecar the axes."""
        name = artifact_id or image.artifact_id
        values = image.values
        self.write_csv(f"images/{name}.csv", np.abs(values) if np.iscomplexobj(values) else values)
        sidecar = {
            "artifact_id": name,
            "shape": list(image.shape),
            "axis1": {"label": image.axis1.label, "unit": image.axis1.unit, "values": image.axis1.values},
            "axis2": {"label": image.axis2.label, "unit": image.axis2.unit, "values": image.axis2.values},
        }
        return self.write_json(f"images/{name}.json", sidecar)

    def write_estimate(self, estimate: CalibrationEstimate, labels: Sequence[str], prefix: str = "estimate") -> None:
        self.write_json(f"{prefix}.json", estimate_to_dict(estimate, labels))
        self.write_csv(f"{prefix}_C.csv", estimate.C_prime.C, header=labels)
        self.write_csv(f"{prefix}_f0.csv", estimate.f0_prime.values[None, :], header=labels)

    def timing(self, name: str, seconds: float) -> None:
        self.timings[name] = self.timings.get(name, 0.0) + seconds

    def write_manifest(self, **fields: Any) -> Path:  # noqa: ANN401
        """Write ``manifest.json`` listing every other file with its sha256; call it last."""
        self._sample()
        listing = {}
        for relative in sorted(self.files):
            target = self.root / relative
            if target.exists():
                listing[relative] = {"sha256": sha256_file(target), "bytes": target.stat().st_size}
        stray = sorted(
            str(p.relative_to(self.root).as_posix())
            for p in self.root.rglob("*")
            if p.is_file() and p.name != "manifest.json" and p.relative_to(self.root).as_posix() not in listing
        )
        for relative in stray:
            target = self.root / relative
            listing[relative] = {"sha256": sha256_file(target), "bytes": target.stat().st_size}
        manifest = {
            "tool_version": tool_version,
            "timings": self.timings,
            "wall_time": time.perf_counter() - self.started,
            "peak_rss_bytes": self.peak_rss,
            "files": listing,
            **fields,
        }
        target = self.root / "manifest.json"
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
        logger.info(f"Wrote {len(listing)} file(s) and the manifest to {self.root}")
        return target
