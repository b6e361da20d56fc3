"""Noise injection, zeroing masks and bootstrap error bars."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.ndimage import binary_dilation, uniform_filter

from .errors import ConfigError, EmptyMaskError, SpectrogramFormatError, UndefinedLossError
from .forward import Spectrogram, vacuum_subtract
from .gate import GateFunctions
from .retrieval import RetrievalConfig, RetrievalResult, compare_to_truth, match_modes, retrieve
from .states import GaussianStateSpec, ModeBasis
from .utils import rng_stream

logger = logging.getLogger(__name__)

SNR_DEFINITIONS = ("rms", "peak")
DEFAULT_MASK_THRESHOLD = 1e-3
MASK_DILATION = 2


@dataclass(frozen=True)
class NoiseSpec:
    """
    Additive Gaussian noise at a target SNR.

    Attributes:
        snr_db: Signal-to-noise ratio (dB); inf means no noise
        seed: Master seed of the "noise" stream
        definition: "rms" or "peak" signal reference
        seed_key: Extra spawn-key counters (level, repeat, ...)
        noisy_vacuum: Also add independent noise to the vacuum reference
    """

    snr_db: float
    seed: int = 0
    definition: str = "rms"
    seed_key: tuple[int, ...] = ()
    noisy_vacuum: bool = False

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError("/noise/snr_db", f"must be finite or +inf, got {self.snr_db}")
        if self.definition not in SNR_DEFINITIONS:
            raise ConfigError("/noise/definition", f"must be one of {SNR_DEFINITIONS}, got '{self.definition}'")
        object.__setattr__(self, "snr_db", float(self.snr_db))
        object.__setattr__(self, "seed_key", tuple(int(k) for k in self.seed_key))

    @property
    def noiseless(self) -> bool:
        return self.snr_db == math.inf


@dataclass(frozen=True)
class BootstrapSpec:
    """Pixel-resampling bootstrap settings."""

    n_replicas: int = 100
    seed: int = 0
    resample_fraction: float = 1.0

    def __post_init__(self):
        if int(self.n_replicas) < 2:
            raise ConfigError("/bootstrap/n_replicas", f"must be >= 2, got {self.n_replicas}")
        if not 0 < self.resample_fraction <= 1:
            raise ConfigError(
                "/bootstrap/resample_fraction", f"must be in (0, 1], got {self.resample_fraction}"
            )
        object.__setattr__(self, "n_replicas", int(self.n_replicas))


def signal_reference(values: np.ndarray, definition: str = "rms") -> float:
    """rms or peak magnitude of a value array."""
    if definition == "rms":
        return float(np.sqrt(np.mean(values**2)))
    if definition == "peak":
        return float(np.max(np.abs(values)))
    raise ValueError(f"Unknown SNR definition '{definition}'. Known: {SNR_DEFINITIONS}.")


def noise_sigma(reference: np.ndarray, noise: NoiseSpec) -> float:
    """sigma = signal_ref * 10^(-snr_db / 20)."""
    if noise.noiseless:
        return 0.0
    return signal_reference(reference, noise.definition) * 10.0 ** (-noise.snr_db / 20.0)


def add_noise(spec: Spectrogram, noise: NoiseSpec, reference: Spectrogram | None = None) -> Spectrogram:
    """
    Add i.i.d. zero-mean Gaussian noise at the requested SNR.

    Args:
        spec: Raw or vacuum-subtracted spectrogram
        noise: Noise settings; snr_db = inf returns `spec` unchanged
        reference: Spectrogram the SNR is referenced to (defaults to `spec`),
            e.g. the clean vacuum-subtracted signal when noising raw data

    Returns:
        Noisy spectrogram tagged with snr_db

    Raises:
        SpectrogramFormatError: If `spec` is a vacuum spectrogram
    """
    if spec.kind not in ("raw", "vacuum_subtracted"):
        raise SpectrogramFormatError(f"Noise is added to raw or vacuum-subtracted data, got '{spec.kind}'.")
    if noise.noiseless:
        return spec
    if reference is None:
        ref_values = spec.values
    else:
        spec.check_same_axes(reference)
        ref_values = reference.values * (reference.normalization / spec.normalization)

    sigma = noise_sigma(ref_values, noise)
    rng = rng_stream(noise.seed, "noise", *noise.seed_key)
    values = spec.values + rng.normal(0.0, sigma, size=spec.values.shape)
    logger.debug("Added noise at %.1f dB (%s): sigma %.4g", noise.snr_db, noise.definition, sigma)
    return replace(spec, values=values, snr_db=noise.snr_db)


def noisy_measurement(raw: Spectrogram, vac: Spectrogram, noise: NoiseSpec) -> Spectrogram:
    """
    Simulated noisy vacuum-subtracted measurement.

    Noise is added to the raw spectrogram with the SNR referenced to the clean
    vacuum-subtracted signal, then the vacuum is subtracted. With noisy_vacuum
    the vacuum reference gets its own independent draw.
    """
    clean = vacuum_subtract(raw, vac)
    if noise.noiseless:
        return clean
    noisy_raw = add_noise(raw, noise, reference=clean)
    if not noise.noisy_vacuum:
        return vacuum_subtract(noisy_raw, vac)

    sigma = noise_sigma(clean.values, noise)
    rng = rng_stream(noise.seed, "noise", *noise.seed_key, 1)
    vac_values = vac.values * (vac.normalization / raw.normalization)
    vac_values = vac_values + rng.normal(0.0, sigma, size=vac_values.shape)
    return replace(noisy_raw, values=noisy_raw.values - vac_values, kind="vacuum_subtracted")


def build_mask(
    spec: Spectrogram,
    threshold_fraction: float = DEFAULT_MASK_THRESHOLD,
    dilation: int = MASK_DILATION,
) -> np.ndarray:
    """
    Zeroing mask over the significantly nonzero part of a spectrogram.

    A pixel is kept where the 3x3 moving average of |values| reaches
    threshold_fraction of its maximum; the kept region is then dilated by
    `dilation` pixels so the wings are not clipped.

    Args:
        spec: Spectrogram (usually vacuum-subtracted)
        threshold_fraction: Fraction of the peak, in (0, 1)
        dilation: Dilation in pixels

    Returns:
        Boolean mask (n_w, n_tau)

    Raises:
        ValueError: If threshold_fraction is outside (0, 1)
        EmptyMaskError: If no pixel is selected
    """
    if not 0 < threshold_fraction < 1:
        raise ValueError(f"threshold_fraction must be in (0, 1), got {threshold_fraction}.")
    smoothed = uniform_filter(np.abs(spec.values), size=3, mode="nearest")
    peak = float(np.max(smoothed))
    if peak <= 0:
        raise EmptyMaskError("Spectrogram is identically zero; the zeroing mask is empty.")
    mask = smoothed >= threshold_fraction * peak
    if dilation > 0:
        mask = binary_dilation(mask, structure=np.ones((3, 3), dtype=bool), iterations=dilation)
    if not mask.any():
        raise EmptyMaskError(f"No pixel reaches {threshold_fraction:g} of the peak.")
    logger.debug("Mask keeps %d of %d pixels", int(mask.sum()), mask.size)
    return mask


def pixel_weights_from_mask(mask: np.ndarray) -> np.ndarray:
    """Loss weights: 1 inside the mask, 0 outside."""
    return np.asarray(mask, dtype=float)


def resample_weights(mask: np.ndarray, bspec: BootstrapSpec, replica: int) -> np.ndarray:
    """
    Bootstrap pixel weights for one replica.

    Masked pixels are drawn with replacement; each pixel's weight is the number
    of times it was drawn. The stream depends only on the replica index.
    """
    pixels = np.flatnonzero(mask)
    if pixels.size == 0:
        raise EmptyMaskError("Cannot resample an empty mask.")
    n_draw = max(1, int(round(bspec.resample_fraction * pixels.size)))
    rng = rng_stream(bspec.seed, "bootstrap", replica)
    counts = np.bincount(rng.integers(0, pixels.size, size=n_draw), minlength=pixels.size)
    weights = np.zeros(mask.size)
    weights[pixels] = counts
    return weights.reshape(mask.shape)


@dataclass
class ReplicaRecord:
    """Outcome of one bootstrap replica or one noisy repeat."""

    index: int
    final_loss: float
    success: bool
    iterations: int
    var_x: np.ndarray
    var_p: np.ndarray
    modes: np.ndarray
    loss_trace: np.ndarray
    fidelities: np.ndarray | None = None
    error: str | None = None

    def to_dict(self, include_trace: bool = False) -> dict[str, Any]:
        data = {
            "index": self.index,
            "final_loss": self.final_loss,
            "success": self.success,
            "iterations": self.iterations,
            "var_x": self.var_x,
            "var_p": self.var_p,
            "fidelities": self.fidelities,
            "error": self.error,
        }
        if include_trace:
            data["loss_trace"] = self.loss_trace
        return data


def _aligned(result: RetrievalResult, reference: ModeBasis) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recovered modes and variances permuted into reference order with the global phase removed."""
    match = match_modes(reference, result.basis)
    modes = result.basis.matrix[match.permutation] * np.exp(-1j * match.phases)[:, None]
    return modes, result.var_x[match.permutation], result.var_p[match.permutation]


def _record(
    index: int,
    result: RetrievalResult,
    reference: ModeBasis | None,
    truth: GaussianStateSpec | None,
) -> ReplicaRecord:
    if reference is not None:
        modes, var_x, var_p = _aligned(result, reference)
    else:
        modes, var_x, var_p = result.basis.matrix, result.var_x, result.var_p
    fidelities = None
    if truth is not None:
        fidelities = compare_to_truth(truth, result)["fidelities"]
    return ReplicaRecord(
        index=index,
        final_loss=result.final_loss,
        success=result.converged,
        iterations=result.iterations_run,
        var_x=var_x,
        var_p=var_p,
        modes=modes,
        loss_trace=result.loss_trace,
        fidelities=fidelities,
    )


def _mean_std(values: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.stack(values)
    return stacked.mean(axis=0), stacked.std(axis=0)


@dataclass
class BootstrapSummary:
    """
    Distribution of replica results.

    Statistics are over the successful replicas (loss at or below the success
    threshold). When none succeeded, `empty_success` is set and the statistics
    fall back to all replicas.
    """

    n_replicas: int
    n_success: int
    empty_success: bool
    var_x_mean: np.ndarray
    var_x_std: np.ndarray
    var_p_mean: np.ndarray
    var_p_std: np.ndarray
    loss_mean: float
    loss_std: float
    intensity_mean: np.ndarray
    intensity_std: np.ndarray
    phase_mean: np.ndarray
    phase_std: np.ndarray
    fidelity_mean: np.ndarray | None = None
    fidelity_std: np.ndarray | None = None
    replicas: list[ReplicaRecord] = field(default_factory=list)

    @property
    def success_fraction(self) -> float:
        return self.n_success / self.n_replicas

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_replicas": self.n_replicas,
            "n_success": self.n_success,
            "success_fraction": self.success_fraction,
            "empty_success": self.empty_success,
            "var_x_mean": self.var_x_mean,
            "var_x_std": self.var_x_std,
            "var_p_mean": self.var_p_mean,
            "var_p_std": self.var_p_std,
            "loss_mean": self.loss_mean,
            "loss_std": self.loss_std,
            "fidelity_mean": self.fidelity_mean,
            "fidelity_std": self.fidelity_std,
            "modes": [
                {
                    "intensity_mean": self.intensity_mean[n],
                    "intensity_std": self.intensity_std[n],
                    "phase_mean_rad": self.phase_mean[n],
                    "phase_std_rad": self.phase_std[n],
                }
                for n in range(self.intensity_mean.shape[0])
            ],
            "replicas": [r.to_dict() for r in self.replicas],
        }


def summarize(records: list[ReplicaRecord]) -> BootstrapSummary:
    """Mean and standard deviation of every recorded quantity."""
    successful = [r for r in records if r.success and r.error is None]
    empty_success = not successful
    pool = successful or [r for r in records if r.error is None]
    if not pool:
        raise UndefinedLossError("Every replica failed; there is nothing to summarize.")

    var_x_mean, var_x_std = _mean_std([r.var_x for r in pool])
    var_p_mean, var_p_std = _mean_std([r.var_p for r in pool])
    losses = np.array([r.final_loss for r in pool])
    intensity_mean, intensity_std = _mean_std([np.abs(r.modes) ** 2 for r in pool])

    # Circular statistics of the mode phase at each time
    unit = np.stack([np.exp(1j * np.angle(r.modes)) for r in pool]).mean(axis=0)
    phase_mean = np.angle(unit)
    phase_std = np.sqrt(-2.0 * np.log(np.clip(np.abs(unit), 1e-300, 1.0)))

    fidelity_mean = fidelity_std = None
    if all(r.fidelities is not None for r in pool):
        fidelity_mean, fidelity_std = _mean_std([r.fidelities for r in pool])

    return BootstrapSummary(
        n_replicas=len(records),
        n_success=len(successful),
        empty_success=empty_success,
        var_x_mean=var_x_mean,
        var_x_std=var_x_std,
        var_p_mean=var_p_mean,
        var_p_std=var_p_std,
        loss_mean=float(losses.mean()),
        loss_std=float(losses.std()),
        intensity_mean=intensity_mean,
        intensity_std=intensity_std,
        phase_mean=phase_mean,
        phase_std=phase_std,
        fidelity_mean=fidelity_mean,
        fidelity_std=fidelity_std,
        replicas=records,
    )


def bootstrap_retrieve(
    noisy: Spectrogram,
    gate: GateFunctions,
    config: RetrievalConfig,
    bspec: BootstrapSpec,
    truth: GaussianStateSpec | None = None,
    threads: int = 1,
    mask: np.ndarray | None = None,
) -> BootstrapSummary:
    """
    Bootstrap error bars from a single noisy spectrogram.

    Each replica resamples the masked pixels with replacement (unselected
    pixels get zero weight in the loss) and runs a full retrieval. Replica
    random streams are keyed by replica index, so the summary does not depend
    on `threads`.

    Args:
        noisy: Raw or vacuum-subtracted measurement
        gate: Known gate functions
        config: Retrieval settings; each replica's init stream is keyed by its index
        bspec: Bootstrap settings
        truth: Optional true state; adds fidelities and gauge-fixes the modes to it
        threads: Replicas run concurrently
        mask: Pixels eligible for resampling (defaults to config.mask, else build_mask)

    Returns:
        BootstrapSummary
    """
    if mask is None:
        mask = config.mask if config.mask is not None else build_mask(noisy)

    reference = truth.basis if truth is not None else None
    if reference is None:
        # Gauge reference: one retrieval on the full, unresampled data
        reference = retrieve(noisy, gate, replace(config, mask=mask)).basis

    def run_replica(replica: int) -> ReplicaRecord:
        weights = resample_weights(mask, bspec, replica)
        replica_config = replace(config, mask=mask, seed_key=config.seed_key + (replica,))
        try:
            result = retrieve(noisy, gate, replica_config, pixel_weights=weights)
        except (UndefinedLossError, EmptyMaskError) as e:
            logger.warning("Bootstrap replica %d failed: %s", replica, e)
            return ReplicaRecord(
                index=replica, final_loss=math.inf, success=False, iterations=0,
                var_x=np.full(config.n_modes, np.nan), var_p=np.full(config.n_modes, np.nan),
                modes=np.zeros((config.n_modes, gate.grid.n_t), dtype=complex),
                loss_trace=np.array([]), error=str(e),
            )
        logger.info("Bootstrap replica %d: loss %.4g", replica, result.final_loss)
        return _record(replica, result, reference, truth)

    replicas = range(bspec.n_replicas)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            records = list(executor.map(run_replica, replicas))
    else:
        records = [run_replica(i) for i in replicas]

    summary = summarize(records)
    if summary.empty_success:
        logger.warning("No bootstrap replica reached the success threshold")
    return summary


def noisy_repeats(
    raw: Spectrogram,
    vac: Spectrogram,
    gate: GateFunctions,
    config: RetrievalConfig,
    noise: NoiseSpec,
    repeats: int,
    truth: GaussianStateSpec | None = None,
    threads: int = 1,
    mask_threshold: float | None = DEFAULT_MASK_THRESHOLD,
) -> list[ReplicaRecord]:
    """
    Independent noisy retrievals at one SNR level.

    Repeat k draws its noise from the stream (noise, *noise.seed_key, k) and its
    initial guess from (init, *config.seed_key, k). With mask_threshold set, each
    noisy spectrogram is masked before retrieval.
    """

    def run_repeat(k: int) -> ReplicaRecord:
        measured = noisy_measurement(raw, vac, replace(noise, seed_key=noise.seed_key + (k,)))
        mask = config.mask
        if mask is None and mask_threshold is not None:
            mask = build_mask(measured, mask_threshold)
        repeat_config = replace(config, mask=mask, seed_key=config.seed_key + (k,))
        result = retrieve(measured, gate, repeat_config)
        reference = truth.basis if truth is not None else None
        return _record(k, result, reference, truth)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(run_repeat, range(repeats)))
    return [run_repeat(k) for k in range(repeats)]


def success_fractions(levels: dict[float, list[ReplicaRecord]]) -> dict[float, float]:
    """Fraction of successful runs per SNR level, in ascending SNR order."""
    return {
        level: (sum(r.success for r in records) / len(records) if records else 0.0)
        for level, records in sorted(levels.items())
    }
