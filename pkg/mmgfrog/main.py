"""Command-line front end: simulate, retrieve, noise-sweep, bootstrap, bench, convert."""

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy.fft

from .config import RunConfig, gate_from_dict, load_run_config
from .errors import (
    ConfigError,
    EmptyMaskError,
    GridError,
    MMGFrogError,
    NonFiniteGradientError,
    SpectrogramFormatError,
    UndefinedLossError,
)
from .forward import Spectrogram, synthesize_spectrogram, vacuum_spectrogram, vacuum_subtract
from .gate import GateFunctions, gate_functions
from .grid import DelayGrid, TimeGrid
from .io import (
    convert_spectrogram,
    read_spectrogram,
    write_loss_trace,
    write_manifest,
    write_mode_files,
    write_result,
    write_spectrogram,
    write_table,
)
from .noise import (
    bootstrap_retrieve,
    build_mask,
    noisy_measurement,
    noisy_repeats,
    success_fractions,
)
from .retrieval import RetrievalConfig, RetrievalEngine, compare_to_truth, retrieve
from .states import (
    GaussianStateSpec,
    anti_squeezing_variance,
    hermite_gaussian_basis,
    squeezing_db_to_variance,
)
from .utils import get_log_level, get_thread_count, to_jsonable, write_json_file

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NOT_CONVERGED = 4

# Wall time of a 5-mode, 10,000-iteration retrieval on the reference laptop (s)
REFERENCE_RUNTIME_S = 720.0


@dataclass
class RunContext:
    """Everything a subcommand needs, built once from the command line."""

    config: RunConfig
    gate: GateFunctions
    threads: int
    output_dir: Path
    svg: bool = False
    binary: bool = True

    @property
    def delays(self) -> DelayGrid:
        return self.config.grid.delay_grid

    @property
    def w_center(self) -> float:
        return self.config.grid.w_center

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def spectrogram_path(self, stem: str) -> Path:
        return self.path(f"{stem}.bin" if self.binary else f"{stem}.csv")


def configure_logging(level: str | None = None) -> None:
    """Root handler with the package log format; warnings are routed through logging."""
    logging.basicConfig(format=LOG_FORMAT, level=(level or get_log_level()), force=True)
    logging.captureWarnings(True)


def _require(value: Any, pointer: str, command: str) -> Any:
    if value is None:
        raise ConfigError(pointer, f"block is required for '{command}'")
    return value


def simulate_spectrograms(ctx: RunContext) -> tuple[Spectrogram, Spectrogram, Spectrogram]:
    """Raw, vacuum and vacuum-subtracted spectrograms of the configured state."""
    state = _require(ctx.config.state, "/state", "simulate")
    raw = synthesize_spectrogram(state, ctx.gate, ctx.delays, include_vacuum_complement=True, w_center=ctx.w_center)
    vac = vacuum_spectrogram(ctx.gate, ctx.delays, ctx.w_center)
    return raw, vac, vacuum_subtract(raw, vac)


def _mask_for(measured: Spectrogram, ctx: RunContext) -> np.ndarray | None:
    if ctx.config.mask_threshold is None:
        return None
    if measured.kind == "raw":
        vac = vacuum_spectrogram(ctx.gate, measured.delay_grid, measured.freq_grid.w_center)
        measured = vacuum_subtract(measured, vac)
    return build_mask(measured, ctx.config.mask_threshold)


def _truth_report(truth: GaussianStateSpec | None, result) -> dict[str, Any] | None:
    if truth is None or len(truth.basis) > result.n_modes:
        return None
    return compare_to_truth(truth, result)


# -- subcommands --------------------------------------------------------------------


def cmd_simulate(ctx: RunContext) -> tuple[dict[str, Any], int]:
    """
    Simulate the configured state and write raw, vacuum and vacuum-subtracted files.

    With a noise block, a noisy vacuum-subtracted file is written as well.

    Example:
        cmd_simulate(ctx) -> ({
            "vacuum_subtracted_min": -0.0123,
            "negative": True,
            "files": ["raw.bin", "vacuum.bin", "vacuum_subtracted.bin", ...]
        }, 0)
    """
    raw, vac, vacsub = simulate_spectrograms(ctx)
    files = [
        write_spectrogram(raw, ctx.spectrogram_path("raw")),
        write_spectrogram(vac, ctx.spectrogram_path("vacuum")),
        write_spectrogram(vacsub, ctx.spectrogram_path("vacuum_subtracted")),
    ]
    noise = ctx.config.noise
    if noise is not None and not noise.spec.noiseless:
        noisy = noisy_measurement(raw, vac, noise.spec)
        files.append(write_spectrogram(noisy, ctx.spectrogram_path("noisy_vacuum_subtracted")))
    if ctx.svg:
        from .plots import render_modes_svg, render_spectrogram_svg

        files.append(render_spectrogram_svg(vacsub, ctx.path("vacuum_subtracted.svg")))
        files.append(render_modes_svg(ctx.config.state.basis, ctx.path("modes.svg")))
    files.extend(write_mode_files(ctx.config.state.basis, ctx.output_dir, prefix="true_mode"))

    summary = {
        "raw_peak": raw.peak,
        "vacuum_level": float(vac.values[0, 0]),
        "vacuum_subtracted_min": float(np.min(vacsub.values)),
        "vacuum_subtracted_max": float(np.max(vacsub.values)),
        "negative": bool(np.min(vacsub.values) < 0),
    }
    write_manifest(ctx.output_dir, files, ctx.config.document, {"summary": to_jsonable(summary)})
    summary["files"] = [f.name for f in files]
    logger.info(
        "Simulated %d modes: vacuum-subtracted range [%.4g, %.4g]",
        ctx.config.state.n_modes, summary["vacuum_subtracted_min"], summary["vacuum_subtracted_max"],
    )
    return summary, EXIT_OK


def cmd_retrieve(ctx: RunContext, spectrogram_path: Path) -> tuple[dict[str, Any], int]:
    """
    Retrieve modes and variances from a spectrogram file.

    Writes result.json, one plot-data CSV per mode, the loss trace and the
    retrieved spectrogram. The exit code is 0 only when the final loss is at or
    below the success threshold.
    """
    settings = _require(ctx.config.retrieval, "/retrieval", "retrieve")
    measured = read_spectrogram(spectrogram_path)
    if measured.time_grid != ctx.gate.grid or measured.delay_grid != ctx.delays:
        raise SpectrogramFormatError(
            f"{spectrogram_path}: grid does not match the configuration's grid block."
        )
    settings = replace(settings, mask=_mask_for(measured, ctx))
    result = retrieve(measured, ctx.gate, settings)

    truth = _truth_report(ctx.config.state, result)
    extra = {"source": Path(spectrogram_path).name}
    if truth is not None:
        extra["truth_comparison"] = to_jsonable(truth)
    files = [
        write_result(result, ctx.path("result.json"), extra),
        write_loss_trace(result.loss_trace, ctx.path("loss_trace.csv")),
        write_spectrogram(result.synthesized, ctx.spectrogram_path("retrieved")),
        *write_mode_files(result.basis, ctx.output_dir),
    ]
    if ctx.svg:
        from .plots import render_modes_svg, render_spectrogram_svg

        files.append(render_spectrogram_svg(result.synthesized, ctx.path("retrieved.svg")))
        files.append(render_modes_svg(result.basis, ctx.path("retrieved_modes.svg")))
    write_manifest(ctx.output_dir, files, ctx.config.document)

    summary = {
        "final_loss": result.final_loss,
        "converged": result.converged,
        "iterations_run": result.iterations_run,
        "var_x": result.var_x.tolist(),
        "var_p": result.var_p.tolist(),
        "angles_rad": result.angles.tolist(),
    }
    if truth is not None:
        summary["fidelities"] = truth["fidelities"].tolist()
    return summary, (EXIT_OK if result.converged else EXIT_NOT_CONVERGED)


def cmd_noise_sweep(ctx: RunContext, levels: list[float] | None = None) -> tuple[dict[str, Any], int]:
    """
    Repeat noisy retrievals at each SNR level and tabulate success and fidelity.

    Level k (ascending SNR) draws its noise from the stream keyed (k, repeat).
    """
    state = _require(ctx.config.state, "/state", "noise-sweep")
    settings = _require(ctx.config.retrieval, "/retrieval", "noise-sweep")
    noise = _require(ctx.config.noise, "/noise", "noise-sweep")
    levels = sorted(levels if levels else noise.levels)
    if not levels:
        raise ConfigError("/noise/levels", "at least one SNR level is required")

    truth = state if len(state.basis) == settings.n_modes else None
    raw, vac, _ = simulate_spectrograms(ctx)
    by_level = {}
    for k, level in enumerate(levels):
        spec = replace(noise.spec, snr_db=level, seed_key=(k,))
        logger.info("SNR %.1f dB: %d repeats", level, noise.repeats)
        by_level[level] = noisy_repeats(
            raw, vac, ctx.gate, replace(settings, seed_key=(k,)), spec, noise.repeats,
            truth=truth, threads=ctx.threads, mask_threshold=ctx.config.mask_threshold,
        )
    fractions = success_fractions(by_level)

    files = []
    rows = []
    levels_out = []
    for k, level in enumerate(levels):
        records = by_level[level]
        successful = [r for r in records if r.success]
        if truth is not None and successful:
            mean_fidelity = np.mean([r.fidelities for r in successful], axis=0)
        else:
            mean_fidelity = np.full(settings.n_modes, np.nan)
        rows.append([
            level, fractions[level], len(successful), len(records),
            float(np.mean([r.final_loss for r in records])),
            float(np.mean(mean_fidelity)),
        ])
        tag = f"snr_{k}"
        traces = [r.loss_trace for r in records]
        length = max(len(t) for t in traces)
        table = [[i + 1] + [float(t[i]) if i < len(t) else "" for t in traces] for i in range(length)]
        files.append(write_table(
            ctx.path(f"{tag}_loss_traces.csv"),
            ["iteration"] + [f"repeat_{r.index}" for r in records],
            table,
            {"snr_db": level},
        ))
        files.append(write_table(
            ctx.path(f"{tag}_fidelities.csv"),
            ["repeat", "success", "final_loss"] + ([f"fidelity_{n}" for n in range(state.n_modes)] if truth else []),
            [[r.index, r.success, r.final_loss, *([] if r.fidelities is None else r.fidelities.tolist())] for r in records],
            {"snr_db": level},
        ))
        levels_out.append({
            "snr_db": level,
            "success_fraction": fractions[level],
            "mean_fidelity_successful": mean_fidelity,
            "records": [r.to_dict() for r in records],
        })

    columns = ["snr_db", "success_fraction", "n_success", "n_runs", "mean_loss", "mean_fidelity_successful"]
    files.append(write_table(ctx.path("noise_sweep.csv"), columns, rows, {"definition": noise.spec.definition}))
    series = [fractions[level] for level in levels]
    monotone = all(b >= a for a, b in zip(series, series[1:]))
    if not monotone:
        logger.warning("Success fraction is not non-decreasing in SNR: %s", series)
    summary = {"definition": noise.spec.definition, "monotone": monotone, "levels": levels_out}
    files.append(write_json_file(ctx.path("noise_sweep.json"), summary))
    write_manifest(ctx.output_dir, files, ctx.config.document)
    return {"success_fractions": fractions, "monotone": monotone}, EXIT_OK


def cmd_bootstrap(ctx: RunContext, spectrogram_path: Path | None = None) -> tuple[dict[str, Any], int]:
    """
    Bootstrap error bars from one noisy spectrogram.

    Without a spectrogram file, the noisy measurement is simulated from the
    state and noise blocks. Writes bootstrap.json and per-mode envelope CSVs.
    """
    settings = _require(ctx.config.retrieval, "/retrieval", "bootstrap")
    bspec = _require(ctx.config.bootstrap, "/bootstrap", "bootstrap")
    if spectrogram_path is not None:
        noisy = read_spectrogram(spectrogram_path)
    else:
        noise = _require(ctx.config.noise, "/noise", "bootstrap")
        raw, vac, _ = simulate_spectrograms(ctx)
        noisy = noisy_measurement(raw, vac, noise.spec)

    truth = ctx.config.state
    if truth is not None and len(truth.basis) != settings.n_modes:
        truth = None
    summary = bootstrap_retrieve(
        noisy, ctx.gate, settings, bspec, truth=truth, threads=ctx.threads, mask=_mask_for(noisy, ctx),
    )

    files = [write_json_file(ctx.path("bootstrap.json"), summary.to_dict())]
    t = ctx.gate.grid.t
    for n in range(summary.intensity_mean.shape[0]):
        rows = np.column_stack([
            t, summary.intensity_mean[n], summary.intensity_std[n], summary.phase_mean[n], summary.phase_std[n],
        ])
        files.append(write_table(
            ctx.path(f"mode_{n}_envelope.csv"),
            ["time_fs", "intensity_mean", "intensity_std", "phase_mean_rad", "phase_std_rad"],
            rows.tolist(),
        ))
    write_manifest(ctx.output_dir, files, ctx.config.document)
    result = {
        "success_fraction": summary.success_fraction,
        "empty_success": summary.empty_success,
        "var_x_mean": summary.var_x_mean.tolist(),
        "var_x_std": summary.var_x_std.tolist(),
        "var_p_mean": summary.var_p_mean.tolist(),
        "var_p_std": summary.var_p_std.tolist(),
    }
    return result, (EXIT_NOT_CONVERGED if summary.empty_success else EXIT_OK)


def _bench_measurement(
    n_modes: int, grid: TimeGrid, delays: DelayGrid, gate: GateFunctions, t0: float
) -> Spectrogram:
    basis = hermite_gaussian_basis(n_modes, t0, 0.0, grid)
    dbs = 1.0 + np.arange(n_modes) % 4
    state = GaussianStateSpec(
        basis=basis,
        var_x=np.array([squeezing_db_to_variance(db) for db in dbs]),
        var_p=np.array([anti_squeezing_variance(db) for db in dbs]),
        w_s=gate.w_s,
    )
    return synthesize_spectrogram(state, gate, delays)


def time_per_iteration(measured: Spectrogram, gate: GateFunctions, n_modes: int, iterations: int) -> float:
    """Mean wall time of one retrieval iteration (s), after one warm-up step."""
    engine = RetrievalEngine(measured, gate, RetrievalConfig(n_modes=n_modes, max_iters=iterations))
    engine.step()
    started = time.perf_counter()
    for _ in range(iterations):
        engine.step()
    return (time.perf_counter() - started) / iterations


def _linearity(x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    slope, intercept = np.polyfit(x, y, 1)
    fit = slope * x + intercept
    return {"slope": float(slope), "intercept": float(intercept), "max_rel_deviation": float(np.max(np.abs(fit - y) / y))}


def cmd_bench(ctx: RunContext, mode_counts: list[int] | None = None) -> tuple[dict[str, Any], int]:
    """
    Per-iteration wall time against the mode count and the grid size.

    Informational: the report states how close the timings are to linear; the
    optional full-scale run is compared against the reference-machine figure.
    """
    bench = ctx.config.bench
    counts = mode_counts or (bench.mode_counts if bench else [1, 2, 4, 8, 16])
    iterations = bench.iterations if bench else 20
    grid = ctx.gate.grid
    t0 = float(ctx.config.document.get("bench", {}).get("t0_fs", 18.0))

    rows = []
    mode_times = []
    for m in counts:
        measured = _bench_measurement(m, grid, ctx.delays, ctx.gate, t0)
        seconds = time_per_iteration(measured, ctx.gate, m, iterations)
        mode_times.append(seconds)
        rows.append([m, grid.n_t, ctx.delays.n_tau, seconds])
        logger.info("M=%d N_w=%d N_tau=%d: %.4g s/iteration", m, grid.n_t, ctx.delays.n_tau, seconds)

    report: dict[str, Any] = {"modes": _linearity(np.array(counts, float), np.array(mode_times))} if len(counts) > 1 else {}

    sweep = bench.grid_sweep if bench else []
    sizes, sweep_times = [], []
    gate_block = ctx.config.document.get("gate", {})
    for n_t, n_tau in sweep:
        sweep_grid = TimeGrid(n_t=n_t, dt=grid.dt)
        sweep_delays = DelayGrid(n_tau=n_tau, dtau=ctx.delays.dtau)
        sweep_gate = gate_functions(gate_from_dict(gate_block, sweep_grid, ctx.gate.w_s))
        measured = _bench_measurement(counts[0], sweep_grid, sweep_delays, sweep_gate, t0)
        seconds = time_per_iteration(measured, sweep_gate, counts[0], iterations)
        sizes.append(n_t * n_tau)
        sweep_times.append(seconds)
        rows.append([counts[0], n_t, n_tau, seconds])
    if len(sizes) > 1:
        report["grid"] = _linearity(np.array(sizes, float), np.array(sweep_times))

    if bench is not None and bench.full_scale:
        measured = _bench_measurement(5, grid, ctx.delays, ctx.gate, t0)
        started = time.perf_counter()
        retrieve(measured, ctx.gate, RetrievalConfig(n_modes=5, max_iters=10_000, convergence_tol=0.0))
        elapsed = time.perf_counter() - started
        report["full_scale"] = {
            "wall_time_s": elapsed,
            "reference_s": REFERENCE_RUNTIME_S,
            "ratio": elapsed / REFERENCE_RUNTIME_S,
        }

    files = [
        write_table(ctx.path("bench.csv"), ["n_modes", "n_w", "n_tau", "seconds_per_iteration"], rows),
        write_json_file(ctx.path("bench.json"), {"rows": rows, "report": report}),
    ]
    write_manifest(ctx.output_dir, files, ctx.config.document)
    return report, EXIT_OK


# -- command line -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmgfrog",
        description="Simulate and retrieve multimode squeezed states from OPA-FROG spectrograms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, type=Path, help="Run configuration (JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config value by dotted path, e.g. retrieval.max_iters=500")
        p.add_argument("--threads", type=int, default=None, help="Worker count (default: MMGFROG_THREADS or CPU count)")
        p.add_argument("--output-dir", type=Path, default=None, help="Overrides output_dir from the config")
        p.add_argument("--svg", action="store_true", help="Also render SVG figures")
        p.add_argument("--csv", action="store_true", help="Write spectrograms as CSV instead of binary")

    add_common(sub.add_parser("simulate", help="Synthesize raw, vacuum and vacuum-subtracted spectrograms"))
    p = sub.add_parser("retrieve", help="Retrieve modes and variances from a spectrogram file")
    add_common(p)
    p.add_argument("spectrogram", type=Path)
    p = sub.add_parser("noise-sweep", help="Noisy retrievals over a list of SNR levels")
    add_common(p)
    p.add_argument("--snr", type=float, nargs="+", default=None, help="SNR levels (dB); overrides noise.levels")
    p = sub.add_parser("bootstrap", help="Bootstrap error bars from one noisy spectrogram")
    add_common(p)
    p.add_argument("spectrogram", type=Path, nargs="?", default=None)
    p = sub.add_parser("bench", help="Per-iteration timing against mode count and grid size")
    add_common(p)
    p.add_argument("--modes", type=int, nargs="+", default=None, help="Mode counts to time")
    p = sub.add_parser("convert", help="Convert a spectrogram between the CSV and binary containers")
    p.add_argument("source", type=Path)
    p.add_argument("destination", type=Path)
    return parser


def build_context(args: argparse.Namespace) -> RunContext:
    """Load the configuration and evaluate the gate."""
    config = load_run_config(args.config, args.overrides)
    threads = get_thread_count(args.threads)
    output_dir = args.output_dir or config.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    return RunContext(
        config=config,
        gate=gate_functions(config.gate),
        threads=threads,
        output_dir=output_dir,
        svg=args.svg,
        binary=not args.csv,
    )


def run(args: argparse.Namespace) -> int:
    """Dispatch one parsed command line; returns the exit code."""
    if args.command == "convert":
        try:
            path = convert_spectrogram(args.source, args.destination)
        except (FileNotFoundError, SpectrogramFormatError, GridError) as e:
            logger.error("%s", e)
            return EXIT_DATA
        logger.info("Wrote %s", path)
        return EXIT_OK

    try:
        ctx = build_context(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG

    try:
        with scipy.fft.set_workers(ctx.threads):
            if args.command == "simulate":
                summary, code = cmd_simulate(ctx)
            elif args.command == "retrieve":
                summary, code = cmd_retrieve(ctx, args.spectrogram)
            elif args.command == "noise-sweep":
                summary, code = cmd_noise_sweep(ctx, args.snr)
            elif args.command == "bootstrap":
                summary, code = cmd_bootstrap(ctx, args.spectrogram)
            else:
                summary, code = cmd_bench(ctx, args.modes)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG
    except (FileNotFoundError, SpectrogramFormatError, UndefinedLossError, EmptyMaskError, GridError) as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except NonFiniteGradientError as e:
        logger.error("Retrieval diverged: %s", e)
        return EXIT_NOT_CONVERGED
    except MMGFrogError as e:
        logger.error("%s", e)
        return EXIT_DATA

    logger.info("%s finished: %s", args.command, json.dumps(to_jsonable(summary)))
    return code


def main(argv: list[str] | None = None) -> int:
    """Entry point for the mmgfrog command line."""
    configure_logging()
    args = build_parser().parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
