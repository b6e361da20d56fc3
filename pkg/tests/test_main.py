"""Tests for the command-line front end and its exit codes."""

import json
import tempfile
from pathlib import Path

import pytest

from mmgfrog.io import read_result, read_spectrogram, verify_manifest
from mmgfrog.main import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    build_parser,
    main,
)


@pytest.fixture
def temp_dir():
    """Create a temporary working directory."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def config_path(temp_dir):
    """A one-mode configuration on a small grid."""
    document = {
        "seed": 3,
        "output_dir": str(temp_dir / "out"),
        "grid": {"n_t": 128, "dt_fs": 1.0, "n_tau": 16, "dtau_fs": 2.0},
        "state": {
            "modes": [
                {"generator": {"type": "hermite_gaussian", "order": 0, "t0_fs": 6.0, "chirp": 0.0},
                 "squeezing_db": 3.0, "angle_rad": 1.0},
            ]
        },
        "gate": {"type": "chirped_gaussian", "fwhm_fs": 12.0, "chirp": 0.5, "peak_gain_db": 20.0},
    }
    path = temp_dir / "run.json"
    path.write_text(json.dumps(document))
    return path


def _simulate(config_path: Path, output_dir: Path, *extra: str) -> int:
    return main(["simulate", "--config", str(config_path), "--output-dir", str(output_dir), *extra])


def test_parser_subcommands():
    """Test that every subcommand parses."""
    parser = build_parser()
    args = parser.parse_args(["retrieve", "--config", "c.json", "--set", "a=1", "--set", "b=2", "map.bin"])
    assert args.command == "retrieve"
    assert args.overrides == ["a=1", "b=2"]
    assert args.spectrogram == Path("map.bin")
    args = parser.parse_args(["noise-sweep", "--config", "c.json", "--snr", "5", "10"])
    assert args.snr == [5.0, 10.0]
    args = parser.parse_args(["convert", "a.csv", "b.bin"])
    assert args.destination == Path("b.bin")
    with pytest.raises(SystemExit):
        parser.parse_args(["simulate"])


def test_simulate_writes_verified_outputs(config_path, temp_dir):
    """Test that simulate writes the three maps, the mode file and a valid manifest."""
    out = temp_dir / "sim"
    assert _simulate(config_path, out) == EXIT_OK
    for name in ("raw.bin", "vacuum.bin", "vacuum_subtracted.bin", "true_mode_0.csv", "manifest.json"):
        assert (out / name).exists(), name
    assert verify_manifest(out / "manifest.json") == []
    assert read_spectrogram(out / "vacuum_subtracted.bin").kind == "vacuum_subtracted"
    assert read_spectrogram(out / "vacuum.bin").kind == "vacuum"


def test_simulate_is_reproducible(config_path, temp_dir):
    """Test that two runs of the same configuration are byte-identical."""
    assert _simulate(config_path, temp_dir / "a") == EXIT_OK
    assert _simulate(config_path, temp_dir / "b") == EXIT_OK
    for name in ("raw.bin", "vacuum_subtracted.bin", "manifest.json"):
        assert (temp_dir / "a" / name).read_bytes() == (temp_dir / "b" / name).read_bytes(), name


def test_simulate_csv_output(config_path, temp_dir):
    """Test the --csv switch."""
    out = temp_dir / "csv"
    assert _simulate(config_path, out, "--csv") == EXIT_OK
    assert (out / "raw.csv").exists()
    assert not (out / "raw.bin").exists()


def test_simulate_with_noise_block(config_path, temp_dir):
    """Test that a noise block adds a noisy vacuum-subtracted map."""
    out = temp_dir / "noisy"
    assert _simulate(config_path, out, "--set", "noise.snr_db=20") == EXIT_OK
    noisy = read_spectrogram(out / "noisy_vacuum_subtracted.bin")
    assert noisy.snr_db == 20.0


def test_invalid_config_exit_code(config_path, temp_dir):
    """Test exit code 2 for an invalid value."""
    assert _simulate(config_path, temp_dir / "x", "--set", "state.modes.0.var_x=-1") == EXIT_CONFIG


def test_missing_config_exit_code(temp_dir):
    """Test exit code 2 for a missing configuration file."""
    assert _simulate(temp_dir / "absent.json", temp_dir / "x") == EXIT_CONFIG


def test_malformed_json_exit_code(temp_dir):
    """Test exit code 2 for a file that is not JSON."""
    path = temp_dir / "broken.json"
    path.write_text("{not json")
    assert _simulate(path, temp_dir / "x") == EXIT_CONFIG


def test_retrieve_requires_retrieval_block(config_path, temp_dir):
    """Test that retrieve without a retrieval block is a configuration error."""
    out = temp_dir / "sim"
    assert _simulate(config_path, out) == EXIT_OK
    code = main(["retrieve", "--config", str(config_path), "--output-dir", str(out),
                 str(out / "vacuum_subtracted.bin")])
    assert code == EXIT_CONFIG


def test_retrieve_truncated_spectrogram(config_path, temp_dir):
    """Test exit code 3 for a truncated input file."""
    out = temp_dir / "sim"
    assert _simulate(config_path, out, "--csv") == EXIT_OK
    path = out / "vacuum_subtracted.csv"
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-5]))
    code = main(["retrieve", "--config", str(config_path), "--output-dir", str(temp_dir / "ret"),
                 "--set", "retrieval.n_modes=1", str(path)])
    assert code == EXIT_DATA


def test_retrieve_missing_spectrogram(config_path, temp_dir):
    """Test exit code 3 for a missing input file."""
    code = main(["retrieve", "--config", str(config_path), "--output-dir", str(temp_dir / "ret"),
                 "--set", "retrieval.n_modes=1", str(temp_dir / "absent.bin")])
    assert code == EXIT_DATA


def test_retrieve_writes_result(config_path, temp_dir):
    """Test a short retrieval run end to end."""
    sim = temp_dir / "sim"
    ret = temp_dir / "ret"
    assert _simulate(config_path, sim) == EXIT_OK
    code = main([
        "retrieve", "--config", str(config_path), "--output-dir", str(ret), "--threads", "1",
        "--set", "retrieval.n_modes=1", "--set", "retrieval.max_iters=30",
        str(sim / "vacuum_subtracted.bin"),
    ])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    for name in ("result.json", "loss_trace.csv", "retrieved.bin", "mode_0.csv", "manifest.json"):
        assert (ret / name).exists(), name
    result = read_result(ret / "result.json")
    assert result.iterations_run <= 30
    assert result.var_x[0] <= result.var_p[0]
    document = json.loads((ret / "result.json").read_text())
    assert "truth_comparison" in document
    assert verify_manifest(ret / "manifest.json") == []


def test_convert(config_path, temp_dir):
    """Test binary to CSV conversion and its failure code."""
    sim = temp_dir / "sim"
    assert _simulate(config_path, sim) == EXIT_OK
    assert main(["convert", str(sim / "raw.bin"), str(temp_dir / "raw.csv")]) == EXIT_OK
    assert read_spectrogram(temp_dir / "raw.csv").kind == "raw"
    assert main(["convert", str(temp_dir / "absent.bin"), str(temp_dir / "x.csv")]) == EXIT_DATA


def test_noise_sweep(config_path, temp_dir):
    """Test that a small sweep writes its tables."""
    out = temp_dir / "sweep"
    code = main([
        "noise-sweep", "--config", str(config_path), "--output-dir", str(out), "--threads", "2",
        "--set", "noise.levels=[20, 40]", "--set", "noise.repeats=2",
        "--set", "retrieval.n_modes=1", "--set", "retrieval.max_iters=20",
    ])
    assert code == EXIT_OK
    for name in ("noise_sweep.csv", "noise_sweep.json", "snr_0_loss_traces.csv", "snr_1_fidelities.csv"):
        assert (out / name).exists(), name
    summary = json.loads((out / "noise_sweep.json").read_text())
    assert [level["snr_db"] for level in summary["levels"]] == [20.0, 40.0]


def test_bootstrap(config_path, temp_dir):
    """Test a two-replica bootstrap from a simulated noisy measurement."""
    out = temp_dir / "boot"
    code = main([
        "bootstrap", "--config", str(config_path), "--output-dir", str(out),
        "--set", "noise.snr_db=30", "--set", "bootstrap.n_replicas=2",
        "--set", "retrieval.n_modes=1", "--set", "retrieval.max_iters=20",
    ])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert (out / "bootstrap.json").exists()
    assert (out / "mode_0_envelope.csv").exists()


def test_bootstrap_needs_noise_or_file(config_path, temp_dir):
    """Test that a bootstrap with neither a file nor a noise block is rejected."""
    code = main([
        "bootstrap", "--config", str(config_path), "--output-dir", str(temp_dir / "boot"),
        "--set", "bootstrap.n_replicas=2", "--set", "retrieval.n_modes=1",
    ])
    assert code == EXIT_CONFIG


def test_bench_small(config_path, temp_dir):
    """Test a two-point timing run."""
    out = temp_dir / "bench"
    code = main([
        "bench", "--config", str(config_path), "--output-dir", str(out),
        "--set", "bench.iterations=2", "--set", "bench.t0_fs=4.5", "--modes", "1", "2",
    ])
    assert code == EXIT_OK
    report = json.loads((out / "bench.json").read_text())
    assert len(report["rows"]) == 2
    assert "modes" in report["report"]


def test_simulate_svg(config_path, temp_dir):
    """Test that --svg renders the map and mode figures into the manifest."""
    out = temp_dir / "svg"
    assert _simulate(config_path, out, "--svg") == EXIT_OK
    assert (out / "vacuum_subtracted.svg").read_text().lstrip().startswith("<?xml")
    assert (out / "modes.svg").exists()
    assert verify_manifest(out / "manifest.json") == []


def test_retrieve_vacuum_measurement(config_path, temp_dir):
    """Test that a vacuum input retrieves successfully with vacuum variances."""
    sim = temp_dir / "sim"
    ret = temp_dir / "ret"
    assert _simulate(config_path, sim, "--set", "state.modes.0.squeezing_db=0") == EXIT_OK
    code = main([
        "retrieve", "--config", str(config_path), "--output-dir", str(ret), "--threads", "1",
        "--set", "retrieval.n_modes=1", "--set", "retrieval.max_iters=20",
        str(sim / "raw.bin"),
    ])
    assert code == EXIT_OK
    result = read_result(ret / "result.json")
    assert result.var_x[0] == pytest.approx(0.25, rel=0.05)
    assert result.var_p[0] == pytest.approx(0.25, rel=0.05)


@pytest.mark.slow
def test_bench_time_is_linear_in_mode_count(temp_dir):
    """Test that the per-iteration time grows linearly with the mode count."""
    config = Path(__file__).resolve().parent.parent / "sample_configs" / "roundtrip.json"
    out = temp_dir / "bench"
    code = main([
        "bench", "--config", str(config), "--output-dir", str(out), "--threads", "1",
        "--set", "bench.grid_sweep=[]", "--set", "bench.iterations=10", "--modes", "1", "2", "4", "8",
    ])
    assert code == EXIT_OK
    fit = json.loads((out / "bench.json").read_text())["report"]["modes"]
    assert fit["slope"] > 0
    assert fit["max_rel_deviation"] <= 0.2
