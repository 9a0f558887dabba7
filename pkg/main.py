import argparse
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import humanfriendly
import numpy as np

from src import artifacts, constants, engine, log, plots, symmetry
from src.config import MODES, RunConfig, load_run_config, parse_overrides
from src.device import FREQUENCY, ImageAxis, SimulatedDevice, Sweep, translation_residual
from src.errors import CalibrationError, ConfigError, EstimateFormatError, StageError
from src.fluxmodel import LoopIndex

logger = log.get_logger(__name__)

EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ciscic",
        description="Flux crosstalk calibration of coupled rf-SQUID readout cells.",
    )
    commands = parser.add_subparsers(dest="mode", required=True, metavar="COMMAND")
    helps = {
        "calibrate": "run calibration iterations on the device",
        "offsets": "recalibrate flux offsets of an existing estimate",
        "verify-error": "measure the residual crosstalk matrix of an estimate",
        "simulate": "render spectra that show the broken translation symmetry",
        "resample": "noise-resampling spread of one iteration",
    }
    for mode in MODES:
        command = commands.add_parser(mode, help=helps[mode])
        command.add_argument("--device", required=True, type=Path, help="device TOML file")
        command.add_argument("--out", type=Path, help="output directory")
        command.add_argument("--seed", type=int, help="base seed (overrides [run].seed)")
        command.add_argument("--iterations", type=int, help="calibration iterations")
        command.add_argument(
            "--skip-cell",
            type=int,
            action="append",
            default=[],
            help="cell left uncalibrated (repeatable)",
        )
        command.add_argument(
            "--stage-override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="engine setting override (repeatable)",
        )
        command.add_argument("--estimate", type=Path, help="estimate.json of an earlier run")
        if mode == "calibrate":
            command.add_argument("--stop-threshold", type=float, help="early stop, Phi0/Phi0")
        if mode == "offsets":
            command.add_argument(
                "--drift-hours",
                type=float,
                nargs="+",
                default=[],
                help="drift the device through these epochs first",
            )
            command.add_argument("--repeats", type=int, default=1, help="offset updates to apply")
        if mode in ("offsets", "resample"):
            command.add_argument(
                "--sigma",
                type=float,
                action="append",
                default=[],
                help="replay noise (repeatable)",
            )
            command.add_argument("--count", type=int, help="noisy replays per sigma")
    return parser


def _write_reports(
    writer: artifacts.ArtifactWriter,
    name: str,
    reports: Sequence[engine.StageReport],
) -> None:
    writer.write_jsonl(name, [report.to_dict() for report in reports])
    for report in reports:
        writer.timing(f"stage {report.stage}", report.duration)


def cmd_calibrate(
    config: RunConfig,
    device: SimulatedDevice,
    settings: engine.EngineSettings,
    writer: artifacts.ArtifactWriter,
    stop_threshold: float | None = None,
) -> dict[str, Any]:
    """Run the iterations, writing each one as soon as it completes."""
    labels = device.labels
    previous = None
    if config.estimate is not None:
        previous = artifacts.load_estimate(config.estimate, labels)
    reports: list[engine.StageReport] = []

    def write_iteration(outcome: engine.IterationOutcome) -> None:
        n = outcome.record.n
        writer.write_csv(f"iteration_{n}/C.csv", outcome.record.C_n.C, header=labels)
        offsets = outcome.record.f0_n.values[None, :]
        writer.write_csv(f"iteration_{n}/f0.csv", offsets, header=labels)
        writer.write_json(
            f"iteration_{n}/effective.json",
            {
                str(cell): {
                    "Ceff": effective.Ceff,
                    "f0eff": effective.f0eff,
                    "residual": effective.residual,
                    "origin_parity": effective.origin_parity,
                    "probe": effective.probe,
                }
                for cell, effective in sorted(outcome.effective.items())
            },
        )
        for artifact_id, image in sorted(outcome.images.items()):
            writer.write_image(image)
            target = writer.path(f"plots/{artifact_id}.png")
            if image.axis2.label == FREQUENCY:
                writer.register(plots.plot_spectrum(image, target))
            else:
                cell = int(artifact_id.split("-c")[1].split("-")[0])
                effective = outcome.effective.get(cell)
                centers = None if effective is None else effective.centers
                writer.register(plots.plot_scan(image, target, centers))
        reports.extend(outcome.reports)
        _write_reports(writer, "reports.jsonl", reports)
        writer.write_estimate(outcome.estimate, labels)
        writer.timing("iterations", outcome.duration)

    estimate, outcomes = engine.run_calibration(
        device,
        config.iterations,
        stop_threshold,
        settings,
        config.skip_cells,
        previous,
        on_iteration=write_iteration,
    )

    history = list(estimate.history)
    writer.write_rows("statistics.csv", engine.iteration_statistics(history))
    writer.register(plots.plot_convergence(history, writer.path("plots/convergence.png")))
    if device.spec.resistances is not None:
        mutuals = estimate.C_prime.to_mutuals(device.spec.resistances)
        writer.write_csv("mutuals.csv", mutuals, header=labels)
    return {"iterations": [outcome.record.n for outcome in outcomes]}


def cmd_offsets(
    config: RunConfig,
    device: SimulatedDevice,
    settings: engine.EngineSettings,
    writer: artifacts.ArtifactWriter,
    repeats: int = 1,
) -> dict[str, Any]:
    """Offset recalibration, optionally across simulated drift epochs."""
    labels = device.labels
    estimate = artifacts.load_estimate(config.estimate, labels)

    if config.drift_hours:
        estimate, epochs = engine.drift_study(
            device,
            estimate,
            config.drift_hours,
            config.seed,
            settings,
            config.skip_cells,
        )
        shifts = np.array([epoch.shift.values for epoch in epochs])
        truth = np.array([epoch.true_change.values for epoch in epochs])
        hours = np.array(config.drift_hours)[:, None]
        writer.write_csv("drift_shift.csv", np.hstack([hours, shifts]), header=["hours", *labels])
        writer.write_csv("drift_truth.csv", np.hstack([hours, truth]), header=["hours", *labels])
        target = writer.path("plots/drift.png")
        writer.register(plots.plot_drift(config.drift_hours, shifts, truth, target))
        writer.write_estimate(estimate, labels)
        return {"epochs": [{"hours": e.hours, "rms": e.rms} for e in epochs]}

    recording = engine.RecordingBackend(device)
    result = engine.fast_offsets(recording, estimate, settings, repeats, config.skip_cells)
    _write_reports(writer, "reports.jsonl", result.reports)
    errors = None
    sigma = config.sigmas[0]
    if repeats == 1 and sigma > 0:
        errors = engine.offset_resampling_error(
            recording,
            estimate,
            sigma,
            config.count,
            settings,
            config.seed,
            config.skip_cells,
        )
        writer.write_csv("offset_spread.csv", errors[None, :], header=labels)
    writer.write_csv("offset_shift.csv", result.shift.values[None, :], header=labels)
    target = writer.path("plots/offset_shift.png")
    writer.register(plots.plot_offset_shifts(labels, result.shift.values, target, errors))
    writer.write_estimate(result.estimate, labels)
    shift = result.shift.values
    return {
        "shift_rms": float(np.sqrt(np.mean(shift**2))),
        "shift_max": float(np.max(np.abs(shift))),
    }


def cmd_verify_error(
    config: RunConfig,
    device: SimulatedDevice,
    settings: engine.EngineSettings,
    writer: artifacts.ArtifactWriter,
) -> dict[str, Any]:
    """Residual crosstalk matrix of a stored estimate."""
    labels = device.labels
    estimate = artifacts.load_estimate(config.estimate, labels)
    errors = engine.error_characterization(
        device,
        estimate,
        constants.Sweep.error_steps,
        settings,
        config.skip_cells,
    )
    _write_reports(writer, "reports.jsonl", errors.reports)
    writer.write_csv("theta.csv", errors.Theta, header=labels)
    summary = {"rms": errors.rms, "max": errors.max, "steps": errors.steps, "unit": "mPhi0/Phi0"}
    writer.write_json("theta_summary.json", summary)
    writer.register(plots.plot_theta(errors.Theta, labels, writer.path("plots/theta.png")))
    table = constants.generate_table(
        [["RMS", f"{errors.rms:.3f}"], ["max", f"{errors.max:.3f}"]],
        headers=["Theta", "mPhi0/Phi0"],
    )
    logger.info(f"\n{table}")
    return summary


def cmd_simulate(
    config: RunConfig,
    device: SimulatedDevice,
    settings: engine.EngineSettings,
    writer: artifacts.ArtifactWriter,
) -> dict[str, Any]:
    """Resonator spectra at several source settings plus one resonator image and one scan."""
    request = config.simulate
    spec = device.spec
    labels = device.labels
    source = labels[request.source]
    grid, traces = device.spectrum_pair(
        request.cell,
        request.source,
        request.settings,
        request.points,
    )
    residuals = [translation_residual(traces[0], trace, request.points) for trace in traces[1:]]
    header = ["V", *(f"{setting:g}" for setting in request.settings)]
    writer.write_csv("spectra.csv", np.column_stack([grid, traces.T]), header=header)
    writer.write_json(
        "residual.json",
        {"settings": request.settings, "residuals": residuals, "source": source},
    )
    target = writer.path("plots/spectra.png")
    writer.register(plots.plot_spectra_pair(grid, traces, request.settings, target, source))

    z, x, r = (LoopIndex(request.cell, kind).flat for kind in ("z", "x", "r"))
    band = device.readout_band(request.cell)
    step = settings.frequency_step * device.linewidth(request.cell)
    frequencies = ImageAxis(FREQUENCY, np.arange(band[0], band[1] + step / 2, step), "rad/ns")
    period = 1.0 / abs(spec.C_true.C[r, r])
    half = int(round(settings.first_periods * settings.points_per_period / 2))
    resonator = device.measure(
        Sweep(
            ImageAxis(labels[r], period / settings.points_per_period * np.arange(-half, half + 1)),
            frequencies,
            (r, None),
            np.zeros(spec.n),
            f"sim-c{request.cell}-resonator",
        ),
    )
    writer.write_image(resonator)
    target = writer.path(f"plots/{resonator.artifact_id}.png")
    writer.register(plots.plot_spectrum(resonator, target))

    spectrum = device.measure(
        Sweep(
            ImageAxis(labels[z], [0.0]),
            frequencies,
            (z, None),
            np.zeros(spec.n),
            f"sim-c{request.cell}-probe",
        ),
    )
    probe = symmetry.dip_frequency(spectrum, 0) - device.linewidth(request.cell) / 2
    scale = 1.0 / abs(spec.C_true.C[z, z])
    half = int(round(settings.scan_periods * settings.scan_points_per_period / 2))
    grid2 = scale / settings.scan_points_per_period * np.arange(-half, half + 1)
    scan = device.measure(
        Sweep(
            ImageAxis(labels[z], grid2, "V"),
            ImageAxis(labels[x], grid2, "V"),
            (z, x),
            np.zeros(spec.n),
            f"sim-c{request.cell}-scan",
            probe=probe,
        ),
    )
    writer.write_image(scan)
    writer.register(plots.plot_scan(scan, writer.path(f"plots/{scan.artifact_id}.png")))
    listed = ", ".join(f"{value:.3e}" for value in residuals)
    logger.info(f"Translation residuals against the first setting: {listed}")
    return {"residuals": residuals}


def cmd_resample(
    config: RunConfig,
    device: SimulatedDevice,
    settings: engine.EngineSettings,
    writer: artifacts.ArtifactWriter,
) -> dict[str, Any]:
    """Record one iteration, then re-analyse noisy replays of it at each sigma."""
    labels = device.labels
    previous = None
    if config.estimate is not None:
        previous = artifacts.load_estimate(config.estimate, labels)
    recording = engine.RecordingBackend(device)
    outcome = engine.run_iteration(recording, previous, settings, config.skip_cells)
    _write_reports(writer, "reports.jsonl", outcome.reports)
    writer.write_csv(f"iteration_{outcome.record.n}/C.csv", outcome.record.C_n.C, header=labels)

    rows = []
    for sigma in config.sigmas:
        spread = engine.noise_resampling_error(
            recording,
            previous,
            sigma,
            config.count,
            settings,
            config.seed,
            config.skip_cells,
        )
        writer.write_csv(f"resample/sigma_{sigma:g}.csv", spread.normalized, header=labels)
        off = spread.normalized[~np.eye(len(labels), dtype=bool)]
        rows.append(
            {
                "sigma": sigma,
                "count": spread.count,
                "max": spread.max,
                "median_off": float(np.median(off)),
            },
        )
    writer.write_rows("resampling.csv", rows)
    return {"resampling": rows}


COMMANDS: dict[str, Callable[..., dict[str, Any]]] = {
    "calibrate": cmd_calibrate,
    "offsets": cmd_offsets,
    "verify-error": cmd_verify_error,
    "simulate": cmd_simulate,
    "resample": cmd_resample,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one command and write its manifest."""
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(
            args.device,
            args.mode,
            args.out,
            iterations=args.iterations,
            seed=args.seed,
            skip_cells=args.skip_cell,
            stage_overrides=parse_overrides(args.stage_override),
            estimate=args.estimate,
            drift_hours=getattr(args, "drift_hours", ()),
            sigmas=getattr(args, "sigma", ()),
            count=getattr(args, "count", None),
        )
        settings = engine.EngineSettings().with_overrides(config.stage_overrides)
        if config.estimate is not None and not config.estimate.exists():
            raise EstimateFormatError(config.estimate, "file not found")
    except (ConfigError, EstimateFormatError):
        return EXIT_CONFIG
    except CalibrationError as exc:
        logger.error(str(exc))
        return EXIT_CONFIG

    table = constants.generate_startup_table(config.device.name, config.seed, config.mode)
    logger.info(f"\n{table}")
    device = SimulatedDevice(config.device, config.seed)
    writer = artifacts.ArtifactWriter(config.output)
    extra: dict[str, Any] = {}
    if args.mode == "calibrate":
        extra["stop_threshold"] = args.stop_threshold
    if args.mode == "offsets":
        extra["repeats"] = args.repeats

    started = time.perf_counter()
    status, code = "ok", 0
    summary: dict[str, Any] = {}
    try:
        summary = COMMANDS[args.mode](config, device, settings, writer, **extra)
    except EstimateFormatError:
        status, code = "config error", EXIT_CONFIG
    except StageError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        status, code = f"stage failure: {exc}", EXIT_STAGE
    except CalibrationError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        status, code = f"calibration error: {exc}", EXIT_STAGE
    finally:
        writer.timing("total", time.perf_counter() - started)
        writer.write_manifest(
            mode=config.mode,
            status=status,
            config=str(config.path),
            config_hash=config.hash,
            device=config.device.name,
            seeds={"base": config.seed, "per_measurement": "sha256(base|artifact_id)"},
            points=device.points,
            summary=summary,
        )
    elapsed = humanfriendly.format_timespan(time.perf_counter() - started)
    logger.info(
        f"{config.mode} finished ({status}) after {elapsed}, "
        f"{device.points} points measured",
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
