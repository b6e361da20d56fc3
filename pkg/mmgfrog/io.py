"""File formats: spectrogram CSV/binary containers, result JSON, plot data, manifests."""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import GridError, SpectrogramFormatError
from .forward import KINDS, Spectrogram
from .grid import TimeGrid, grid_metadata, grids_from_metadata
from .retrieval import RetrievalConfig, RetrievalResult
from .states import ModeBasis, variance_to_squeezing_db
from .utils import load_json_file, parse_float, sha256_file, to_jsonable, write_json_file

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"MMGFROG\x01"
SPECTROGRAM_FORMAT = "mmgfrog-spectrogram"
RESULT_FORMAT = "mmgfrog-result"
MANIFEST_NAME = "manifest.json"


# -- spectrograms ------------------------------------------------------------------


def _spectrogram_from_header(header: dict[str, Any], values: np.ndarray, source: Path) -> Spectrogram:
    if header.get("format") != SPECTROGRAM_FORMAT:
        raise SpectrogramFormatError(f"{source}: not an mmgfrog spectrogram (format={header.get('format')!r}).")
    kind = header.get("kind")
    if kind not in KINDS:
        raise SpectrogramFormatError(f"{source}: unknown spectrogram kind {kind!r}.")
    try:
        _, freq_grid, delay_grid = grids_from_metadata(header["grid"])
    except (KeyError, TypeError, ValueError, GridError) as e:
        raise SpectrogramFormatError(f"{source}: invalid grid block: {e}")
    shape = (freq_grid.n_w, delay_grid.n_tau)
    if values.size != shape[0] * shape[1]:
        raise SpectrogramFormatError(
            f"{source}: expected {shape[0] * shape[1]} values for grid {shape}, found {values.size} "
            "(file truncated?)."
        )
    snr = header.get("snr_db")
    return Spectrogram(
        values=values.reshape(shape),
        freq_grid=freq_grid,
        delay_grid=delay_grid,
        kind=kind,
        normalization=parse_float(header.get("normalization", 1.0)),
        snr_db=None if snr is None else parse_float(snr),
    )


def write_spectrogram_csv(spec: Spectrogram, path: str | Path) -> Path:
    """
    CSV container: one '# {json header}' line, then one row per frequency.

    Values are written with 17 significant digits, so reading back is bitwise exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(to_jsonable(spec.header()), sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {header}\n")
        np.savetxt(f, spec.values, delimiter=",", fmt="%.17g")
    return path


def read_spectrogram_csv(path: str | Path) -> Spectrogram:
    """
    Read a CSV container.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SpectrogramFormatError: If the header or values are malformed or truncated
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Spectrogram file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith("#"):
            raise SpectrogramFormatError(f"{path}: missing '# {{json}}' header line.")
        try:
            header = json.loads(first[1:])
        except json.JSONDecodeError as e:
            raise SpectrogramFormatError(f"{path}: header is not valid JSON: {e}")
        try:
            values = np.loadtxt(f, delimiter=",", dtype=float, ndmin=2)
        except ValueError as e:
            raise SpectrogramFormatError(f"{path}: malformed value rows: {e}")
    n_tau = header.get("grid", {}).get("n_tau")
    if values.size and n_tau is not None and values.shape[1] != n_tau:
        raise SpectrogramFormatError(f"{path}: rows have {values.shape[1]} columns, grid has n_tau = {n_tau}.")
    return _spectrogram_from_header(header, values.reshape(-1), path)


def write_spectrogram_binary(spec: Spectrogram, path: str | Path) -> Path:
    """
    Binary container: magic, uint64 header length, JSON header, float64 values.

    Integers and values are little-endian; values are row-major (n_w, n_tau).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(to_jsonable(spec.header()), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(spec.values, dtype="<f8").tobytes())
    return path


def read_spectrogram_binary(path: str | Path) -> Spectrogram:
    """
    Read a binary container.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SpectrogramFormatError: On a bad magic number, header or truncated payload
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Spectrogram file not found: {path}")
    data = path.read_bytes()
    if not data.startswith(BINARY_MAGIC):
        raise SpectrogramFormatError(f"{path}: not an mmgfrog binary spectrogram (bad magic).")
    offset = len(BINARY_MAGIC)
    if len(data) < offset + 8:
        raise SpectrogramFormatError(f"{path}: file truncated inside the header length.")
    (length,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) < offset + length:
        raise SpectrogramFormatError(f"{path}: file truncated inside the JSON header.")
    try:
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SpectrogramFormatError(f"{path}: header is not valid JSON: {e}")
    payload = data[offset + length:]
    if len(payload) % 8:
        raise SpectrogramFormatError(f"{path}: payload is not a whole number of float64 values (truncated?).")
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    return _spectrogram_from_header(header, values, path)


def _is_binary(path: Path) -> bool:
    with open(path, "rb") as f:
        return f.read(len(BINARY_MAGIC)) == BINARY_MAGIC


def read_spectrogram(path: str | Path) -> Spectrogram:
    """Read either container, detected from the file contents."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Spectrogram file not found: {path}")
    return read_spectrogram_binary(path) if _is_binary(path) else read_spectrogram_csv(path)


def write_spectrogram(spec: Spectrogram, path: str | Path) -> Path:
    """Write the container chosen by the suffix: .csv for CSV, anything else binary."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return write_spectrogram_csv(spec, path)
    return write_spectrogram_binary(spec, path)


def convert_spectrogram(source: str | Path, destination: str | Path) -> Path:
    """Lossless conversion between the CSV and binary containers."""
    return write_spectrogram(read_spectrogram(source), destination)


# -- retrieval results -----------------------------------------------------------------


def result_to_dict(result: RetrievalResult, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    """JSON document of a retrieval result (modes as re/im arrays)."""
    grid = result.basis.grid
    modes = []
    for n, mode in enumerate(result.basis.modes):
        modes.append({
            "re": mode.samples.real,
            "im": mode.samples.imag,
            "var_x": result.var_x[n],
            "var_p": result.var_p[n],
            "angle_rad": result.angles[n],
            "squeezing_db": variance_to_squeezing_db(result.var_x[n]),
            "anti_squeezing_db": -variance_to_squeezing_db(result.var_p[n]),
        })
    document = {
        "format": RESULT_FORMAT,
        "version": 1,
        "grid": {"n_t": grid.n_t, "dt_fs": grid.dt},
        "n_modes": result.n_modes,
        "modes": modes,
        "final_loss": result.final_loss,
        "converged": result.converged,
        "iterations_run": result.iterations_run,
        "loss_trace": result.loss_trace,
        "config": result.config.echo(),
        "seed": result.config.seed,
        "diagnostics": result.diagnostics,
    }
    if result.synthesized is not None:
        document["spectrogram_grid"] = grid_metadata(
            result.synthesized.time_grid,
            result.synthesized.delay_grid,
            result.synthesized.freq_grid.w_center,
        )
    if extra:
        document.update(extra)
    return document


def write_result(result: RetrievalResult, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    """Write a result JSON document."""
    return write_json_file(path, result_to_dict(result, extra))


def read_result(path: str | Path, synthesized: Spectrogram | None = None) -> RetrievalResult:
    """
    Read a result JSON document back into a RetrievalResult.

    The mask is not stored, so the config comes back without one.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SpectrogramFormatError: If required fields are missing
    """
    document = load_json_file(path)
    if document.get("format") != RESULT_FORMAT:
        raise SpectrogramFormatError(f"{path}: not an mmgfrog result (format={document.get('format')!r}).")
    try:
        grid = TimeGrid(n_t=int(document["grid"]["n_t"]), dt=float(document["grid"]["dt_fs"]))
        samples = np.array([np.asarray(m["re"]) + 1j * np.asarray(m["im"]) for m in document["modes"]])
        echo = dict(document["config"])
        echo.pop("mask_pixels", None)
        echo["seed_key"] = tuple(echo.get("seed_key", ()))
        config = RetrievalConfig(**echo)
        return RetrievalResult(
            basis=ModeBasis.from_array(samples, grid),
            var_x=np.array([parse_float(m["var_x"]) for m in document["modes"]]),
            var_p=np.array([parse_float(m["var_p"]) for m in document["modes"]]),
            angles=np.array([parse_float(m["angle_rad"]) for m in document["modes"]]),
            loss_trace=np.array([parse_float(v) for v in document["loss_trace"]]),
            final_loss=parse_float(document["final_loss"]),
            converged=bool(document["converged"]),
            iterations_run=int(document["iterations_run"]),
            synthesized=synthesized,
            config=config,
            diagnostics=document.get("diagnostics", {}),
        )
    except (KeyError, TypeError) as e:
        raise SpectrogramFormatError(f"{path}: result document is missing or has a malformed field: {e}")


# -- plot data -----------------------------------------------------------------------------


def write_mode_csv(samples: np.ndarray, t: np.ndarray, path: str | Path) -> Path:
    """Columns time_fs, intensity (|psi|^2, 1/fs), phase_rad."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([t, np.abs(samples) ** 2, np.angle(samples)])
    np.savetxt(path, table, delimiter=",", fmt="%.17g", header="time_fs,intensity,phase_rad", comments="")
    return path


def write_mode_files(basis: ModeBasis, directory: str | Path, prefix: str = "mode") -> list[Path]:
    """One plot-data CSV per mode: {prefix}_{n}.csv."""
    directory = Path(directory)
    t = basis.grid.t
    return [write_mode_csv(mode.samples, t, directory / f"{prefix}_{n}.csv") for n, mode in enumerate(basis.modes)]


def write_table(path: str | Path, columns: list[str], rows: list[list[Any]], provenance: dict[str, Any] | None = None) -> Path:
    """
    Plain CSV table with optional '# key: value' provenance lines on top.

    Non-finite floats are written as inf / nan.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in (provenance or {}).items():
            f.write(f"# {key}: {value}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_loss_trace(trace: np.ndarray, path: str | Path) -> Path:
    return write_table(path, ["iteration", "loss"], [[k + 1, float(v)] for k, v in enumerate(trace)])


# -- manifests -------------------------------------------------------------------------------


def write_manifest(
    directory: str | Path,
    files: list[Path],
    config: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> Path:
    """
    Manifest with the config echo and SHA-256 checksums of every output file.

    File names are stored relative to `directory`; no timestamps are recorded,
    so identical runs give identical manifests.
    """
    directory = Path(directory)
    checksums = {
        Path(f).resolve().relative_to(directory.resolve()).as_posix(): sha256_file(f)
        for f in sorted(files, key=lambda p: Path(p).as_posix())
    }
    manifest = {"format": "mmgfrog-manifest", "version": 1, "config": config, "files": checksums}
    if extra:
        manifest.update(extra)
    path = write_json_file(directory / MANIFEST_NAME, manifest)
    logger.info("Wrote manifest with %d files to %s", len(checksums), path)
    return path


def verify_manifest(path: str | Path) -> list[str]:
    """
    Check every file listed in a manifest.

    Returns:
        Names of files that are missing or whose checksum changed (empty if all match)
    """
    path = Path(path)
    manifest = load_json_file(path)
    problems = []
    for name, digest in manifest.get("files", {}).items():
        target = path.parent / name
        if not target.exists() or sha256_file(target) != digest:
            problems.append(name)
    return problems
