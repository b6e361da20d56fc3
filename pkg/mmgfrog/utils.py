"""Utility functions shared across the mmgfrog package."""

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

# Named random sub-streams derived from the master seed
STREAM_IDS = {
    "init": 0,
    "noise": 1,
    "bootstrap": 2,
}


def normalize_string(s: str) -> str:
    """
    Normalize a string to lowercase and strip whitespace.

    Args:
        s: Input string to normalize

    Returns:
        Normalized string (lowercase, stripped, "-" replaced by "_")
    """
    return s.strip().lower().replace("-", "_")


def load_json_file(file_path: str | Path) -> Any:
    """
    Safely load a JSON file with error handling.

    Args:
        file_path: Path to the JSON file

    Returns:
        Parsed JSON data

    Raises:
        FileNotFoundError: If the file doesn't exist
        json.JSONDecodeError: If the file contains invalid JSON
    """
    path = Path(file_path)
    if not path.exists():
        raise FileNotFoundError(f"JSON file not found: {file_path}")

    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_json_file(file_path: str | Path, data: Any) -> Path:
    """
    Write data as indented JSON with a trailing newline.

    Non-finite floats are written as the strings "inf", "-inf" and "nan".

    Args:
        file_path: Destination path; parent directories are created
        data: JSON-serializable data

    Returns:
        The path written
    """
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into plain JSON values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if np.isnan(value):
            return "nan"
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def parse_float(value: Any) -> float:
    """Parse a JSON number or one of the strings "inf", "-inf", "nan"."""
    if isinstance(value, str):
        token = value.strip().lower()
        if token in ("inf", "+inf", "infinity", "∞"):
            return float("inf")
        if token in ("-inf", "-infinity"):
            return float("-inf")
        if token == "nan":
            return float("nan")
        return float(token)
    return float(value)


def sha256_file(file_path: str | Path) -> str:
    """Return the hex SHA-256 digest of a file."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def seed_sequence(seed: int, stream: str, *index: int) -> np.random.SeedSequence:
    """
    Derive a named, indexed sub-stream of the master seed.

    The spawn key is (stream id, *index), so a replica's stream depends only on
    its index and never on the order in which replicas are scheduled.

    Args:
        seed: Master seed
        stream: One of STREAM_IDS ("init", "noise", "bootstrap")
        index: Optional counters (level, repeat, replica, ...)

    Returns:
        A SeedSequence for numpy.random.default_rng
    """
    if stream not in STREAM_IDS:
        raise KeyError(f"Unknown random stream '{stream}'. Known: {sorted(STREAM_IDS)}")
    key = (STREAM_IDS[stream], *(int(i) for i in index))
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def rng_stream(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Return a Generator on the named sub-stream of the master seed."""
    return np.random.default_rng(seed_sequence(seed, stream, *index))


def get_thread_count(override: int | None = None) -> int:
    """
    Get the worker count from the command line or environment.

    Args:
        override: Explicit value (e.g. from --threads); wins when given

    Returns:
        Positive worker count; MMGFROG_THREADS if set, else the CPU count

    Raises:
        ValueError: If MMGFROG_THREADS is not a positive integer
    """
    if override is not None:
        if override < 1:
            raise ValueError(f"Thread count must be >= 1, got {override}.")
        return override

    # Load .env file if it exists
    load_dotenv()

    env_value = os.getenv("MMGFROG_THREADS")
    if env_value:
        try:
            threads = int(env_value)
        except ValueError:
            raise ValueError(
                f"MMGFROG_THREADS must be a positive integer, got '{env_value}'."
            )
        if threads < 1:
            raise ValueError(f"MMGFROG_THREADS must be >= 1, got {threads}.")
        return threads

    return os.cpu_count() or 1


def get_log_level() -> str:
    """Get the log level name from MMGFROG_LOG_LEVEL (default INFO)."""
    load_dotenv()
    return os.getenv("MMGFROG_LOG_LEVEL", "INFO").strip().upper()
