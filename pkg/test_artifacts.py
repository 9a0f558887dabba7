from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from src.artifacts import ArtifactWriter, estimate_to_dict, load_estimate, sha256_file
from src.device import FREQUENCY, ImageAxis, TransmissionImage
from src.errors import EstimateFormatError
from src.fluxmodel import (
    CalibrationEstimate,
    CouplingMatrix,
    FluxVector,
    IterationRecord,
    UnitKind,
)

LABELS = ["q1z", "q1x", "q1r"]


def _estimate() -> CalibrationEstimate:
    first = IterationRecord(
        1,
        CouplingMatrix(np.array([[1.02, 0.06, 0.04], [0.05, 0.97, 0.03], [0.08, 0.05, 1.01]])),
        FluxVector([0.12, -0.08, 0.21]),
    )
    second = IterationRecord(
        2,
        CouplingMatrix(np.eye(3) + 1e-3, unit=UnitKind.FLUX),
        FluxVector([1e-3, 0.0, -2e-3]),
        skipped=(1,),
    )
    return CalibrationEstimate.from_history((first, second))


def test_estimate_file_reloads(tmp_path: Path) -> None:
    estimate = _estimate()
    writer = ArtifactWriter(tmp_path)
    writer.write_estimate(estimate, LABELS)
    loaded = load_estimate(tmp_path / "estimate.json", LABELS)
    np.testing.assert_array_equal(loaded.C_prime.C, estimate.C_prime.C)
    np.testing.assert_array_equal(loaded.f0_prime.values, estimate.f0_prime.values)
    assert loaded.iterations == 2
    assert loaded.history[1].skipped == (1,)
    header = (tmp_path / "estimate_C.csv").read_text().splitlines()[0]
    assert header == "q1z,q1x,q1r"


def test_estimate_labels_must_match(tmp_path: Path) -> None:
    ArtifactWriter(tmp_path).write_estimate(_estimate(), LABELS)
    with pytest.raises(EstimateFormatError, match="do not match"):
        load_estimate(tmp_path / "estimate.json", ["c1z", "c1x", "c1r"])


def test_malformed_estimate_files(tmp_path: Path) -> None:
    with pytest.raises(EstimateFormatError, match="file not found"):
        load_estimate(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(EstimateFormatError, match="line 1"):
        load_estimate(broken)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"format": "something-else"}), encoding="utf-8")
    with pytest.raises(EstimateFormatError):
        load_estimate(other)


def test_tampered_estimate_disagrees_with_its_history(tmp_path: Path) -> None:
    data = estimate_to_dict(_estimate(), LABELS)
    data["C_prime"][0][1] += 0.01
    path = tmp_path / "estimate.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(EstimateFormatError):
        load_estimate(path, LABELS)


def test_manifest_hashes_every_file_but_itself(tmp_path: Path) -> None:
    writer = ArtifactWriter(tmp_path)
    writer.write_csv("data/values.csv", np.arange(6.0).reshape(2, 3), header=["a", "b", "c"])
    writer.write_json("summary.json", {"value": np.float64(1.5), "shape": (2, 3)})
    (tmp_path / "stray.txt").write_text("left behind", encoding="utf-8")
    writer.timing("stage 1", 0.5)
    writer.timing("stage 1", 0.25)
    manifest = json.loads(writer.write_manifest(status="ok").read_text())
    assert set(manifest["files"]) == {"data/values.csv", "summary.json", "stray.txt"}
    assert manifest["files"]["summary.json"]["sha256"] == sha256_file(tmp_path / "summary.json")
    assert manifest["timings"] == {"stage 1": 0.75}
    assert manifest["status"] == "ok"
    assert manifest["peak_rss_bytes"] > 0


def test_image_sidecar_describes_the_axes(tmp_path: Path) -> None:
    image = TransmissionImage(
        ImageAxis("q1r", [0.0, 0.5, 1.0], "V"),
        ImageAxis(FREQUENCY, [37.0, 37.5], "rad/ns"),
        np.array([[1 + 1j, 0.5], [0.2j, 1.0], [0.0, -1.0]]),
        "it1-c1-s1",
    )
    ArtifactWriter(tmp_path).write_image(image)
    values = np.loadtxt(tmp_path / "images" / "it1-c1-s1.csv", delimiter=",")
    np.testing.assert_allclose(values, np.abs(image.values), rtol=1e-9)
    sidecar = json.loads((tmp_path / "images" / "it1-c1-s1.json").read_text())
    assert sidecar["shape"] == [3, 2]
    assert sidecar["axis1"] == {"label": "q1r", "unit": "V", "values": [0.0, 0.5, 1.0]}
    assert sidecar["axis2"]["label"] == FREQUENCY


def test_rows_are_written_with_a_header(tmp_path: Path) -> None:
    writer = ArtifactWriter(tmp_path)
    writer.write_rows("rows.csv", [{"iteration": 1, "rms": 0.5}, {"iteration": 2, "rms": 0.25}])
    lines = (tmp_path / "rows.csv").read_text().splitlines()
    assert lines == ["iteration,rms", "1,0.5", "2,0.25"]
    writer.write_rows("empty.csv", [])
    assert writer.files == ["rows.csv", "empty.csv"]
