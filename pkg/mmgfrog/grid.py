"""Time, frequency and delay sampling grids and the transform contract.

Every Fourier transform in the package goes through this module. The transform
is the discretized continuous one, F{f}(w) = sum_t f(t) exp(-i w t) dt, so that
Parseval reads  sum |f|^2 dt = sum |F|^2 dw / (2 pi).  Up to that fixed scale
factor (dt * sqrt(n_t)) it is the unitary DFT.

Units are femtoseconds and rad/fs throughout.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
import scipy.fft

from .errors import GridError, GridMismatchError, WrapAroundWarning

logger = logging.getLogger(__name__)

# Wrapped energy fraction above which a delay shift is reported
WRAP_ENERGY_TOL = 1e-10
# Relative tolerance for "integer multiple of dt"
_COMMENSURATE_TOL = 1e-9


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _samples(value: float, dt: float, what: str) -> int:
    """Convert a time to an integer sample count, rejecting non-multiples of dt."""
    ratio = value / dt
    k = int(round(ratio))
    if abs(ratio - k) > _COMMENSURATE_TOL * max(1.0, abs(ratio)):
        raise GridError(
            f"{what} = {value} fs is not an integer multiple of dt = {dt} fs."
        )
    return k


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid centered so that t = 0 falls on sample n_t // 2."""

    n_t: int
    dt: float
    t0_offset: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not isinstance(self.n_t, (int, np.integer)) or not _is_power_of_two(int(self.n_t)):
            raise GridError(f"n_t must be a power of two, got {self.n_t}.")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise GridError(f"dt must be positive and finite, got {self.dt}.")
        object.__setattr__(self, "n_t", int(self.n_t))
        object.__setattr__(self, "dt", float(self.dt))
        if self.t0_offset is None:
            object.__setattr__(self, "t0_offset", -(self.n_t // 2) * self.dt)

    @cached_property
    def t(self) -> np.ndarray:
        """Sample times (fs)."""
        return self.t0_offset + np.arange(self.n_t) * self.dt

    @property
    def span(self) -> float:
        """Total time window n_t * dt (fs)."""
        return self.n_t * self.dt

    def freq_grid(self, w_center: float = 0.0) -> "FreqGrid":
        """The DFT-conjugate frequency grid."""
        return FreqGrid.from_time_grid(self, w_center)

    def check_span(self, duration: float, what: str = "mode") -> None:
        """
        Require the window to cover at least six times a pulse duration.

        Raises:
            GridError: If n_t * dt < 6 * duration
        """
        if self.span < 6.0 * duration:
            raise GridError(
                f"Time window {self.span:g} fs is shorter than 6x the {what} "
                f"duration {duration:g} fs. Increase n_t or dt."
            )


@dataclass(frozen=True)
class FreqGrid:
    """Angular-frequency grid in centered (ascending) order."""

    n_w: int
    dw: float
    w_center: float = 0.0
    # Time step of the conjugate grid, kept exact so time_grid() round-trips
    dt: float | None = None

    @classmethod
    def from_time_grid(cls, grid: TimeGrid, w_center: float = 0.0) -> "FreqGrid":
        return cls(n_w=grid.n_t, dw=2.0 * np.pi / (grid.n_t * grid.dt), w_center=float(w_center), dt=grid.dt)

    @cached_property
    def w(self) -> np.ndarray:
        """Angular frequencies (rad/fs), ascending; w_center sits on index n_w // 2."""
        return self.w_center + (np.arange(self.n_w) - self.n_w // 2) * self.dw

    def time_grid(self) -> TimeGrid:
        """The DFT-conjugate time grid."""
        dt = self.dt if self.dt is not None else 2.0 * np.pi / (self.n_w * self.dw)
        return TimeGrid(n_t=self.n_w, dt=dt)


@dataclass(frozen=True)
class DelayGrid:
    """Gate delays tau_k = tau_min + k * dtau, symmetric about zero."""

    n_tau: int
    dtau: float
    tau_min: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if int(self.n_tau) < 1:
            raise GridError(f"n_tau must be >= 1, got {self.n_tau}.")
        if not (self.dtau > 0 and math.isfinite(self.dtau)):
            raise GridError(f"dtau must be positive and finite, got {self.dtau}.")
        object.__setattr__(self, "n_tau", int(self.n_tau))
        object.__setattr__(self, "dtau", float(self.dtau))
        if self.tau_min is None:
            object.__setattr__(self, "tau_min", -(self.n_tau // 2) * self.dtau)
        tau_max = self.tau_min + (self.n_tau - 1) * self.dtau
        if abs(self.tau_min + tau_max) > self.dtau * (1 + 1e-9):
            raise GridError(
                f"Delays [{self.tau_min:g}, {tau_max:g}] fs are not symmetric about 0."
            )

    @cached_property
    def tau(self) -> np.ndarray:
        """Delays (fs)."""
        return self.tau_min + np.arange(self.n_tau) * self.dtau

    def sample_shifts(self, grid: TimeGrid) -> np.ndarray:
        """
        Delays as integer sample shifts on a time grid.

        Raises:
            GridError: If dtau or tau_min is not a multiple of dt
        """
        _samples(self.dtau, grid.dt, "dtau")
        _samples(self.tau_min, grid.dt, "tau_min")
        return np.array([_samples(tau, grid.dt, "tau") for tau in self.tau], dtype=int)


def grid_metadata(time_grid: TimeGrid, delay_grid: DelayGrid, w_center: float = 0.0) -> dict[str, Any]:
    """The JSON grid block embedded in every spectrogram header."""
    return {
        "n_t": time_grid.n_t,
        "dt_fs": time_grid.dt,
        "n_tau": delay_grid.n_tau,
        "dtau_fs": delay_grid.dtau,
        "tau_min_fs": delay_grid.tau_min,
        "w_center_radfs": float(w_center),
    }


def grids_from_metadata(meta: dict[str, Any]) -> tuple[TimeGrid, FreqGrid, DelayGrid]:
    """Rebuild the three grids from a header grid block."""
    try:
        time_grid = TimeGrid(n_t=int(meta["n_t"]), dt=float(meta["dt_fs"]))
        delay_grid = DelayGrid(
            n_tau=int(meta["n_tau"]),
            dtau=float(meta["dtau_fs"]),
            tau_min=float(meta["tau_min_fs"]),
        )
    except KeyError as e:
        raise GridError(f"Grid metadata is missing field {e}.")
    freq_grid = time_grid.freq_grid(float(meta.get("w_center_radfs", 0.0)))
    return time_grid, freq_grid, delay_grid


def _check_length(signal: np.ndarray, grid: TimeGrid, axis: int) -> None:
    if signal.shape[axis] != grid.n_t:
        raise GridMismatchError(
            f"Signal has {signal.shape[axis]} samples along axis {axis}, grid has n_t = {grid.n_t}."
        )


def dft(signal: np.ndarray, grid: TimeGrid, axis: int = -1) -> np.ndarray:
    """Scaled DFT in natural (uncentered) bin order: dt * fft(signal)."""
    _check_length(signal, grid, axis)
    return scipy.fft.fft(signal, axis=axis) * grid.dt


def dft_adjoint(spectrum: np.ndarray, grid: TimeGrid, axis: int = -1) -> np.ndarray:
    """Hermitian adjoint of dft: dt * n_t * ifft(spectrum)."""
    _check_length(spectrum, grid, axis)
    return scipy.fft.ifft(spectrum, axis=axis) * (grid.dt * grid.n_t)


def forward_transform(signal: np.ndarray, grid: TimeGrid, axis: int = -1) -> np.ndarray:
    """
    Fourier transform of a signal sampled on a TimeGrid.

    Args:
        signal: Complex samples; axis `axis` must have length n_t
        grid: Time grid of the signal
        axis: Transform axis

    Returns:
        Spectrum on the conjugate FreqGrid (ascending frequency order)

    Raises:
        GridMismatchError: If the signal length differs from n_t
    """
    signal = np.asarray(signal)
    _check_length(signal, grid, axis)
    centered = scipy.fft.ifftshift(signal, axes=axis)
    return scipy.fft.fftshift(scipy.fft.fft(centered, axis=axis), axes=axis) * grid.dt


def inverse_transform(spectrum: np.ndarray, grid: TimeGrid, axis: int = -1) -> np.ndarray:
    """Inverse of forward_transform."""
    spectrum = np.asarray(spectrum)
    _check_length(spectrum, grid, axis)
    natural = scipy.fft.ifftshift(spectrum, axes=axis)
    return scipy.fft.fftshift(scipy.fft.ifft(natural, axis=axis), axes=axis) / grid.dt


def shift_by_delay(
    signal: np.ndarray,
    tau: float,
    grid: TimeGrid,
    check_wrap: bool = True,
) -> np.ndarray:
    """
    Delay a signal by tau as an exact circular sample roll: out(t) = signal(t - tau).

    Args:
        signal: Samples along the last axis
        tau: Delay (fs), an integer multiple of dt
        grid: Time grid of the signal
        check_wrap: Warn when more than WRAP_ENERGY_TOL of the energy wraps around

    Returns:
        The shifted signal

    Raises:
        GridError: If tau is not commensurate with dt
    """
    signal = np.asarray(signal)
    _check_length(signal, grid, -1)
    k = _samples(tau, grid.dt, "tau")
    if k == 0:
        return signal.copy()

    if check_wrap:
        wrapped = signal[..., grid.n_t - k:] if k > 0 else signal[..., :-k]
        total = float(np.sum(np.abs(signal) ** 2))
        spill = float(np.sum(np.abs(wrapped) ** 2))
        if total > 0 and spill > WRAP_ENERGY_TOL * total:
            warnings.warn(
                f"Delay {tau:g} fs wraps {spill / total:.2e} of the signal energy "
                "across the grid edge; widen the time window.",
                WrapAroundWarning,
                stacklevel=2,
            )
    return np.roll(signal, k, axis=-1)
