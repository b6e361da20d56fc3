"""Gate (pump) pulse and the per-time squeezing functions it induces.

A gate field E_g(t) sets the complex squeezing parameter xi(t) = kappa E_g(t),
from which r = |xi|, theta = arg xi (unwrapped), dphi = theta/2 - w_s t and
G = exp(-i dphi + r).
"""

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GateError, GridMismatchError, LowGainWarning
from .grid import DelayGrid, TimeGrid, shift_by_delay

logger = logging.getLogger(__name__)


def gain_db_to_r(peak_gain_db: float) -> float:
    """Peak squeezing parameter for a peak power gain exp(2 r) of `peak_gain_db` dB."""
    return peak_gain_db / 20.0 * math.log(10.0)


@dataclass(frozen=True, eq=False)
class GatePulse:
    """
    Gate envelope and coupling.

    Attributes:
        envelope: Complex field E_g(t) on `grid` (arbitrary amplitude units)
        kappa: Coupling so that xi(t) = kappa * E_g(t)
        w_s: State central frequency (rad/fs), used in dphi
        grid: Time grid of the envelope
    """

    envelope: np.ndarray
    kappa: float
    w_s: float
    grid: TimeGrid

    def __post_init__(self):
        envelope = np.array(self.envelope, dtype=complex)
        if envelope.shape != (self.grid.n_t,):
            raise GridMismatchError(
                f"Gate envelope has shape {envelope.shape}, grid needs ({self.grid.n_t},)."
            )
        xi = self.kappa * envelope
        if not np.all(np.isfinite(xi)):
            raise GateError("Gate squeezing parameter kappa * E_g(t) is not finite.")
        peak = float(np.max(np.abs(xi)))
        if peak <= 1.0:
            warnings.warn(
                f"Peak gain r = {peak:.3g} <= 1; the high-gain approximation does not hold.",
                LowGainWarning,
                stacklevel=3,
            )
        envelope.setflags(write=False)
        object.__setattr__(self, "envelope", envelope)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "w_s", float(self.w_s))

    @property
    def xi(self) -> np.ndarray:
        return self.kappa * self.envelope

    @property
    def peak_r(self) -> float:
        return float(np.max(np.abs(self.xi)))


@dataclass(frozen=True, eq=False)
class GateFunctions:
    """Pointwise r(t), theta(t), dphi(t) and G(t) of a gate."""

    r: np.ndarray
    theta: np.ndarray
    delta_phi: np.ndarray
    g: np.ndarray
    w_s: float
    grid: TimeGrid

    @property
    def power_gain(self) -> np.ndarray:
        """|G(t)|^2 = exp(2 r(t))."""
        return np.exp(2.0 * self.r)

    def shifted(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """
        G(t - tau) and dphi(t - tau) on the unshifted time axis.

        r and theta are rolled by an exact number of samples; the linear
        -w_s t part of dphi is re-evaluated at t - tau so it never wraps.
        """
        r = shift_by_delay(self.r, tau, self.grid)
        theta = shift_by_delay(self.theta, tau, self.grid, check_wrap=False)
        delta_phi = 0.5 * theta - self.w_s * (self.grid.t - tau)
        return np.exp(-1j * delta_phi + r), delta_phi

    def delay_stack(self, delays: DelayGrid) -> tuple[np.ndarray, np.ndarray]:
        """shifted() for every delay, stacked as (n_tau, n_t) arrays."""
        delays.sample_shifts(self.grid)
        pairs = [self.shifted(tau) for tau in delays.tau]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def gate_functions(gate: GatePulse) -> GateFunctions:
    """
    Evaluate r, theta, dphi and G for a gate.

    theta is unwrapped along t before halving so dphi has no pi jumps.
    """
    xi = gate.xi
    r = np.abs(xi)
    theta = np.unwrap(np.angle(xi))
    delta_phi = 0.5 * theta - gate.w_s * gate.grid.t
    g = np.exp(-1j * delta_phi + r)
    for values in (r, theta, delta_phi, g):
        values.setflags(write=False)
    return GateFunctions(r=r, theta=theta, delta_phi=delta_phi, g=g, w_s=gate.w_s, grid=gate.grid)


def chirped_gaussian_gate(
    fwhm: float,
    chirp: float,
    peak_gain_db: float,
    w_s: float,
    grid: TimeGrid,
) -> GatePulse:
    """
    Chirped Gaussian gate scaled to a peak power gain.

    |E_g|^2 has intensity FWHM `fwhm`; the phase is chirp * t^2 / (2 tg^2) with
    tg = fwhm / (2 sqrt(ln 2)) the amplitude 1/e half-width. kappa is chosen so
    that exp(2 r_peak) = 10^(peak_gain_db / 10).

    Args:
        fwhm: Intensity FWHM (fs)
        chirp: Dimensionless quadratic-phase coefficient
        peak_gain_db: Peak power gain (dB), > 0
        w_s: State central frequency (rad/fs)
        grid: Time grid

    Raises:
        GateError: If peak_gain_db <= 0 or the pulse is not resolved by the grid
    """
    if not peak_gain_db > 0:
        raise GateError(f"peak_gain_db must be positive, got {peak_gain_db}.")
    if fwhm <= 2.0 * grid.dt:
        raise GateError(f"Gate FWHM {fwhm:g} fs is not resolved by dt = {grid.dt:g} fs.")
    grid.check_span(fwhm, what="gate")
    tg = fwhm / (2.0 * math.sqrt(math.log(2.0)))
    u = grid.t / tg
    envelope = np.exp(-0.5 * u**2) * np.exp(0.5j * chirp * u**2)
    kappa = gain_db_to_r(peak_gain_db) / float(np.max(np.abs(envelope)))
    return GatePulse(envelope=envelope, kappa=kappa, w_s=w_s, grid=grid)


def fwhm_of(profile: np.ndarray, grid: TimeGrid) -> float:
    """Full width at half maximum of a single-peaked real profile, linearly interpolated."""
    profile = np.asarray(profile, dtype=float)
    peak = int(np.argmax(profile))
    half = profile[peak] / 2.0
    t = grid.t

    left = peak
    while left > 0 and profile[left - 1] >= half:
        left -= 1
    right = peak
    while right < profile.size - 1 and profile[right + 1] >= half:
        right += 1
    if left == 0 or right == profile.size - 1:
        raise GateError("Profile does not fall below half maximum inside the grid.")

    t_left = np.interp(half, [profile[left - 1], profile[left]], [t[left - 1], t[left]])
    t_right = np.interp(half, [profile[right + 1], profile[right]], [t[right + 1], t[right]])
    return float(t_right - t_left)
