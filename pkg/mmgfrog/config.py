"""Run configuration: JSON documents, --set overrides and validation.

Every block is validated into the package's value objects before any
computation starts; problems are reported as ConfigError with a JSON pointer
to the offending value.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, GateError, GridError, StateError
from .gate import GatePulse, chirped_gaussian_gate
from .grid import DelayGrid, TimeGrid
from .noise import DEFAULT_MASK_THRESHOLD, BootstrapSpec, NoiseSpec
from .retrieval import RetrievalConfig
from .states import (
    GaussianStateSpec,
    ModeBasis,
    TemporalMode,
    anti_squeezing_variance,
    hermite_gaussian_mode,
    squeezing_db_to_variance,
)
from .utils import load_json_file, normalize_string, parse_float

logger = logging.getLogger(__name__)

DEFAULT_GRID = {"n_t": 1024, "dt_fs": 2.0, "n_tau": 128, "dtau_fs": 4.0, "w_center_radfs": 0.0}
DEFAULT_SNR_LEVELS = [5.0, 10.0, 15.0, 20.0, 30.0]


@dataclass(frozen=True)
class GridBlock:
    time_grid: TimeGrid
    delay_grid: DelayGrid
    w_center: float = 0.0


@dataclass(frozen=True)
class NoiseBlock:
    """Noise settings plus the SNR sweep description."""

    spec: NoiseSpec
    levels: list[float]
    repeats: int = 1


@dataclass(frozen=True)
class BenchBlock:
    """Benchmark settings: mode counts at a fixed grid and a grid-size sweep."""

    mode_counts: list[int]
    iterations: int = 20
    grid_sweep: list[tuple[int, int]] = field(default_factory=list)
    full_scale: bool = False


@dataclass(frozen=True, eq=False)
class RunConfig:
    """
    A validated run configuration.

    Attributes:
        document: The JSON document after overrides (echoed into manifests)
        grid: Time and delay grids
        gate: Gate pulse
        state: Input state, when the config describes one
        retrieval: Retrieval settings, when present
        mask_threshold: Zeroing-mask threshold for retrieval (None disables it)
        noise: Noise block, when present
        bootstrap: Bootstrap block, when present
        bench: Benchmark block, when present
        output_dir: Directory for every file the run writes
        seed: Master seed
    """

    document: dict[str, Any]
    grid: GridBlock
    gate: GatePulse
    state: GaussianStateSpec | None
    retrieval: RetrievalConfig | None
    mask_threshold: float | None
    noise: NoiseBlock | None
    bootstrap: BootstrapSpec | None
    bench: BenchBlock | None
    output_dir: Path
    seed: int


# -- overrides --------------------------------------------------------------------


def parse_override(text: str) -> tuple[list[str], Any]:
    """
    Split "a.b.0.c=value" into a key path and a value.

    The value is parsed as JSON when possible and kept as a string otherwise.
    """
    if "=" not in text:
        raise ConfigError("/", f"override '{text}' must look like key.path=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError("/", f"override '{text}' has an empty key path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(document: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Return a copy of `document` with every --set override applied in order."""
    result = copy.deepcopy(document)
    for text in overrides:
        path, value = parse_override(text)
        target: Any = result
        for depth, part in enumerate(path[:-1]):
            pointer = "/" + "/".join(path[: depth + 1])
            if isinstance(target, list):
                index = _list_index(part, target, pointer)
                target = target[index]
            else:
                target = target.setdefault(part, {})
            if not isinstance(target, (dict, list)):
                raise ConfigError(pointer, "is not an object; cannot set a key below it")
        last = path[-1]
        if isinstance(target, list):
            target[_list_index(last, target, "/" + "/".join(path))] = value
        else:
            target[last] = value
        logger.debug("Override %s = %r", ".".join(path), value)
    return result


def _list_index(part: str, target: list, pointer: str) -> int:
    if not part.isdigit() or int(part) >= len(target):
        raise ConfigError(pointer, f"is not a valid index into a list of {len(target)}")
    return int(part)


# -- field helpers ------------------------------------------------------------------


def _block(document: dict[str, Any], key: str, required: bool = False) -> dict[str, Any] | None:
    value = document.get(key)
    if value is None:
        if required:
            raise ConfigError(f"/{key}", "block is required")
        return None
    if not isinstance(value, dict):
        raise ConfigError(f"/{key}", "must be an object")
    return value


def _number(block: dict[str, Any], key: str, pointer: str, default: Any = None, minimum: float | None = None,
            exclusive: bool = False, allow_inf: bool = False) -> float:
    value = block.get(key, default)
    where = f"{pointer}/{key}"
    if value is None:
        raise ConfigError(where, "is required")
    try:
        number = parse_float(value)
    except (TypeError, ValueError):
        raise ConfigError(where, f"must be a number, got {value!r}")
    if math.isnan(number) or (math.isinf(number) and not allow_inf):
        raise ConfigError(where, f"must be finite, got {value!r}")
    if minimum is not None:
        if (exclusive and not number > minimum) or (not exclusive and number < minimum):
            relation = ">" if exclusive else ">="
            raise ConfigError(where, f"must be {relation} {minimum}, got {number}")
    return number


def _integer(block: dict[str, Any], key: str, pointer: str, default: Any = None, minimum: int | None = None) -> int:
    value = block.get(key, default)
    where = f"{pointer}/{key}"
    if value is None:
        raise ConfigError(where, "is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(where, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(where, f"must be >= {minimum}, got {value}")
    return int(value)


def _samples(block: dict[str, Any], pointer: str, n_t: int) -> np.ndarray:
    re = block.get("re")
    im = block.get("im", [0.0] * n_t if re is not None else None)
    if not isinstance(re, list) or not isinstance(im, list):
        raise ConfigError(pointer, "sample generators need 're' and 'im' arrays")
    if len(re) != n_t or len(im) != n_t:
        raise ConfigError(pointer, f"sample arrays need n_t = {n_t} entries, got {len(re)} and {len(im)}")
    return np.asarray(re, dtype=float) + 1j * np.asarray(im, dtype=float)


# -- block parsers --------------------------------------------------------------------


def grid_from_dict(block: dict[str, Any], pointer: str = "/grid") -> GridBlock:
    """Parse {n_t, dt_fs, n_tau, dtau_fs[, tau_min_fs, w_center_radfs]}."""
    n_t = _integer(block, "n_t", pointer, DEFAULT_GRID["n_t"], minimum=1)
    dt = _number(block, "dt_fs", pointer, DEFAULT_GRID["dt_fs"], minimum=0, exclusive=True)
    n_tau = _integer(block, "n_tau", pointer, DEFAULT_GRID["n_tau"], minimum=1)
    dtau = _number(block, "dtau_fs", pointer, DEFAULT_GRID["dtau_fs"], minimum=0, exclusive=True)
    tau_min = block.get("tau_min_fs")
    w_center = _number(block, "w_center_radfs", pointer, 0.0)
    try:
        time_grid = TimeGrid(n_t=n_t, dt=dt)
        delay_grid = DelayGrid(n_tau=n_tau, dtau=dtau, tau_min=None if tau_min is None else float(tau_min))
        delay_grid.sample_shifts(time_grid)
    except GridError as e:
        raise ConfigError(pointer, str(e))
    return GridBlock(time_grid=time_grid, delay_grid=delay_grid, w_center=w_center)


def _mode_variances(mode: dict[str, Any], pointer: str) -> tuple[float, float]:
    explicit = [key for key in ("var_x", "var_p") if key in mode]
    if "squeezing_db" in mode and explicit:
        raise ConfigError(f"{pointer}/{explicit[0]}", "cannot be combined with squeezing_db; give one or the other")
    if "squeezing_db" in mode:
        db = _number(mode, "squeezing_db", pointer)
        anti_db = _number(mode, "anti_squeezing_db", pointer, default=db)
        return squeezing_db_to_variance(db), anti_squeezing_variance(anti_db)
    var_x = _number(mode, "var_x", pointer, minimum=0, exclusive=True)
    var_p = _number(mode, "var_p", pointer, minimum=0, exclusive=True)
    return var_x, var_p


def _mode_samples(generator: dict[str, Any], pointer: str, grid: TimeGrid, label: int) -> TemporalMode:
    kind = normalize_string(str(generator.get("type", "")))
    try:
        if kind == "hermite_gaussian":
            return hermite_gaussian_mode(
                order=_integer(generator, "order", pointer, minimum=0),
                t0=_number(generator, "t0_fs", pointer, minimum=0, exclusive=True),
                chirp=_number(generator, "chirp", pointer, 0.0),
                grid=grid,
                label=label,
            )
        if kind == "samples":
            return TemporalMode.normalized(_samples(generator, pointer, grid.n_t), grid, label)
    except (StateError, GridError) as e:
        raise ConfigError(pointer, str(e))
    raise ConfigError(f"{pointer}/type", f"unknown generator type '{generator.get('type')}'")


def state_from_dict(block: dict[str, Any], grid: TimeGrid, pointer: str = "/state") -> GaussianStateSpec:
    """
    Parse {w_s_radfs, modes: [{generator, var_x, var_p | squeezing_db, angle_rad}]}.

    Modes are validated as a basis (orthonormal to 1e-8) and the variances
    against the uncertainty bound.
    """
    modes = block.get("modes")
    if not isinstance(modes, list) or not modes:
        raise ConfigError(f"{pointer}/modes", "must be a nonempty list")
    samples, var_x, var_p, angles = [], [], [], []
    for n, mode in enumerate(modes):
        where = f"{pointer}/modes/{n}"
        if not isinstance(mode, dict):
            raise ConfigError(where, "must be an object")
        generator = mode.get("generator")
        if not isinstance(generator, dict):
            raise ConfigError(f"{where}/generator", "is required and must be an object")
        samples.append(_mode_samples(generator, f"{where}/generator", grid, n))
        vx, vp = _mode_variances(mode, where)
        if vx * vp < 1.0 / 16.0 - 1e-12:
            raise ConfigError(where, f"var_x * var_p = {vx * vp:.6g} violates the uncertainty bound 1/16")
        var_x.append(vx)
        var_p.append(vp)
        angles.append(_number(mode, "angle_rad", where, 0.0))
    try:
        basis = ModeBasis(tuple(samples))
        return GaussianStateSpec(
            basis=basis,
            var_x=np.array(var_x),
            var_p=np.array(var_p),
            angle=np.array(angles),
            w_s=_number(block, "w_s_radfs", pointer, 0.0),
        )
    except StateError as e:
        raise ConfigError(f"{pointer}/modes", str(e))


def gate_from_dict(block: dict[str, Any], grid: TimeGrid, w_s: float, pointer: str = "/gate") -> GatePulse:
    """Parse {type: chirped_gaussian, fwhm_fs, chirp, peak_gain_db} or {type: samples, re, im, kappa}."""
    kind = normalize_string(str(block.get("type", "chirped_gaussian")))
    try:
        if kind == "chirped_gaussian":
            return chirped_gaussian_gate(
                fwhm=_number(block, "fwhm_fs", pointer, minimum=0, exclusive=True),
                chirp=_number(block, "chirp", pointer, 0.0),
                peak_gain_db=_number(block, "peak_gain_db", pointer, minimum=0, exclusive=True),
                w_s=w_s,
                grid=grid,
            )
        if kind == "samples":
            return GatePulse(
                envelope=_samples(block, pointer, grid.n_t),
                kappa=_number(block, "kappa", pointer, minimum=0, exclusive=True),
                w_s=w_s,
                grid=grid,
            )
    except (GateError, GridError) as e:
        raise ConfigError(pointer, str(e))
    raise ConfigError(f"{pointer}/type", f"unknown gate type '{block.get('type')}'")


def retrieval_from_dict(block: dict[str, Any], seed: int, pointer: str = "/retrieval") -> tuple[RetrievalConfig, float | None]:
    """Parse the retrieval block; returns the config and the mask threshold."""
    threshold = block.get("mask_threshold", DEFAULT_MASK_THRESHOLD)
    if threshold is not None:
        threshold = _number(block, "mask_threshold", pointer, DEFAULT_MASK_THRESHOLD, minimum=0, exclusive=True)
        if threshold >= 1:
            raise ConfigError(f"{pointer}/mask_threshold", f"must be below 1, got {threshold}")
    config = RetrievalConfig(
        n_modes=_integer(block, "n_modes", pointer, minimum=1),
        max_iters=_integer(block, "max_iters", pointer, 10_000, minimum=1),
        step_size=_number(block, "step_size", pointer, 1.0, minimum=0),
        step_schedule=normalize_string(str(block.get("step_schedule", "fixed"))),
        seed=_integer(block, "seed", pointer, seed),
        convergence_tol=_number(block, "convergence_tol", pointer, 1e-7, minimum=0),
        convergence_window=_integer(block, "convergence_window", pointer, 200, minimum=1),
        success_loss_threshold=_number(block, "success_loss_threshold", pointer, 0.10),
        perturbation=_number(block, "perturbation", pointer, 0.05, minimum=0),
        log_every=_integer(block, "log_every", pointer, 500, minimum=0),
    )
    return config, threshold


def noise_from_dict(block: dict[str, Any], seed: int, pointer: str = "/noise") -> NoiseBlock:
    levels = block.get("levels", [block["snr_db"]] if "snr_db" in block else DEFAULT_SNR_LEVELS)
    if not isinstance(levels, list) or not levels:
        raise ConfigError(f"{pointer}/levels", "must be a nonempty list of SNR values (dB)")
    parsed = []
    for k, level in enumerate(levels):
        parsed.append(_number({"v": level}, "v", f"{pointer}/levels/{k}", allow_inf=True))
    snr = _number(block, "snr_db", pointer, parsed[0], allow_inf=True)
    spec = NoiseSpec(
        snr_db=snr,
        seed=seed,
        definition=normalize_string(str(block.get("definition", "rms"))),
        noisy_vacuum=bool(block.get("noisy_vacuum", False)),
    )
    return NoiseBlock(spec=spec, levels=sorted(parsed), repeats=_integer(block, "repeats", pointer, 1, minimum=1))


def bench_from_dict(block: dict[str, Any], pointer: str = "/bench") -> BenchBlock:
    counts = block.get("mode_counts", [1, 2, 4, 8, 16])
    if not isinstance(counts, list) or not counts:
        raise ConfigError(f"{pointer}/mode_counts", "must be a nonempty list")
    mode_counts = [_integer({"m": m}, "m", f"{pointer}/mode_counts/{k}", minimum=1) for k, m in enumerate(counts)]
    sweep = []
    for k, pair in enumerate(block.get("grid_sweep", [])):
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"{pointer}/grid_sweep/{k}", "must be a [n_t, n_tau] pair")
        sweep.append((
            _integer({"n": pair[0]}, "n", f"{pointer}/grid_sweep/{k}/0", minimum=1),
            _integer({"n": pair[1]}, "n", f"{pointer}/grid_sweep/{k}/1", minimum=1),
        ))
    return BenchBlock(
        mode_counts=mode_counts,
        iterations=_integer(block, "iterations", pointer, 20, minimum=1),
        grid_sweep=sweep,
        full_scale=bool(block.get("full_scale", False)),
    )


def parse_run_config(document: dict[str, Any]) -> RunConfig:
    """
    Validate a whole run configuration document.

    Raises:
        ConfigError: On the first invalid value, with its JSON pointer
    """
    if not isinstance(document, dict):
        raise ConfigError("/", "run configuration must be a JSON object")

    stochastic = [key for key in ("noise", "bootstrap") if document.get(key) is not None]
    seed = document.get("seed")
    if seed is None:
        if stochastic:
            raise ConfigError("/seed", f"master seed is required when {', '.join(stochastic)} is present")
        seed = 0
    seed = _integer(document, "seed", "", seed, minimum=0)

    grid = grid_from_dict(_block(document, "grid") or {})
    state_block = _block(document, "state")
    state = state_from_dict(state_block, grid.time_grid) if state_block is not None else None
    gate_block = _block(document, "gate", required=True)
    w_s = state.w_s if state is not None else _number(gate_block, "w_s_radfs", "/gate", 0.0)
    gate = gate_from_dict(gate_block, grid.time_grid, w_s)
    if state is not None:
        try:
            grid.time_grid.check_span(state.longest_duration())
        except GridError as e:
            raise ConfigError("/grid", str(e))

    retrieval, mask_threshold = None, None
    retrieval_block = _block(document, "retrieval")
    if retrieval_block is not None:
        retrieval, mask_threshold = retrieval_from_dict(retrieval_block, seed)

    noise_block = _block(document, "noise")
    bootstrap_block = _block(document, "bootstrap")
    bench_block = _block(document, "bench")
    bootstrap = None
    if bootstrap_block is not None:
        bootstrap = BootstrapSpec(
            n_replicas=_integer(bootstrap_block, "n_replicas", "/bootstrap", 100),
            seed=seed,
            resample_fraction=_number(bootstrap_block, "resample_fraction", "/bootstrap", 1.0),
        )

    output_dir = document.get("output_dir", "output")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("/output_dir", "must be a nonempty path string")

    return RunConfig(
        document=document,
        grid=grid,
        gate=gate,
        state=state,
        retrieval=retrieval,
        mask_threshold=mask_threshold,
        noise=noise_from_dict(noise_block, seed) if noise_block is not None else None,
        bootstrap=bootstrap,
        bench=bench_from_dict(bench_block) if bench_block is not None else None,
        output_dir=Path(output_dir),
        seed=seed,
    )


def load_run_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """
    Load, override and validate a run configuration file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        json.JSONDecodeError: If the file contains invalid JSON
        ConfigError: If validation fails
    """
    document = load_json_file(path)
    document = apply_overrides(document, overrides or [])
    config = parse_run_config(document)
    logger.info("Loaded run configuration %s", path)
    return config
