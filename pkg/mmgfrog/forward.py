"""Forward model: the OPA-FROG spectrogram of a multimode Gaussian state.

For each mode n and delay tau, with g = G(t - tau), dphi = dphi(t - tau) and
z = psi_n(t) exp(i (dphi + w_s tau)):

    A_x  = F{ g Im z }              weighted by var_x
    A_p  = F{ g Re z }              weighted by var_p
    A_c1 = F{ g exp(-i dphi) psi* } weighted by 1/8
    A_c2 = F{ g exp(+i dphi) psi }  weighted by 1/8

and I(w, tau) is the weighted sum of |A|^2. Term fields are kept internally in
delay-major, natural-DFT order (n_tau, n_t); Spectrogram.values is (n_w, n_tau)
with ascending frequency.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from .errors import GateError, GridMismatchError, SpectrogramFormatError, StateError
from .gate import GateFunctions
from .grid import DelayGrid, FreqGrid, TimeGrid, dft, grid_metadata
from .states import VACUUM_VARIANCE, GaussianStateSpec, apply_squeezing_angle

logger = logging.getLogger(__name__)

KINDS = ("raw", "vacuum", "vacuum_subtracted")
NONNEGATIVE_TOL = 1e-9
VACUUM_FLAT_TOL = 1e-9


def to_spectrogram_layout(fields: np.ndarray) -> np.ndarray:
    """Internal (..., n_tau, n_t) natural order -> (..., n_w, n_tau) ascending frequency."""
    shifted = scipy.fft.fftshift(fields, axes=-1)
    return np.ascontiguousarray(np.swapaxes(shifted, -1, -2))


def from_spectrogram_layout(values: np.ndarray) -> np.ndarray:
    """Inverse of to_spectrogram_layout."""
    swapped = np.swapaxes(values, -1, -2)
    return np.ascontiguousarray(scipy.fft.ifftshift(swapped, axes=-1))


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """
    Real intensity map over (w, tau).

    Attributes:
        values: (n_w, n_tau) array
        freq_grid: Frequency axis
        delay_grid: Delay axis
        kind: "raw", "vacuum" or "vacuum_subtracted"
        normalization: Peak divided out by normalized() (1.0 if never normalized)
        snr_db: SNR tag of injected noise, None for noiseless data
    """

    values: np.ndarray
    freq_grid: FreqGrid
    delay_grid: DelayGrid
    kind: str = "raw"
    normalization: float = 1.0
    snr_db: float | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        shape = (self.freq_grid.n_w, self.delay_grid.n_tau)
        if values.shape != shape:
            raise GridMismatchError(f"Spectrogram values have shape {values.shape}, grids need {shape}.")
        if self.kind not in KINDS:
            raise SpectrogramFormatError(f"Unknown spectrogram kind '{self.kind}'. Known: {KINDS}.")
        peak = float(np.max(np.abs(values))) if values.size else 0.0
        if self.kind in ("raw", "vacuum") and self.snr_db is None:
            if np.min(values) < -NONNEGATIVE_TOL * max(peak, 1e-300):
                raise SpectrogramFormatError(f"A noiseless {self.kind} spectrogram must be nonnegative.")
        if self.kind == "vacuum" and peak > 0:
            if np.max(values) - np.min(values) > VACUUM_FLAT_TOL * peak:
                raise SpectrogramFormatError("A vacuum spectrogram must be constant over (w, tau).")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def time_grid(self) -> TimeGrid:
        return self.freq_grid.time_grid()

    @property
    def peak(self) -> float:
        return float(np.max(self.values))

    def header(self) -> dict:
        """File header: grid block, kind, normalization, units and noise tag."""
        return {
            "format": "mmgfrog-spectrogram",
            "version": 1,
            "grid": grid_metadata(self.time_grid, self.delay_grid, self.freq_grid.w_center),
            "kind": self.kind,
            "normalization": self.normalization,
            "snr_db": self.snr_db,
            "shape": list(self.values.shape),
            "units": {"omega": "rad/fs", "tau": "fs", "values": "photons per pulse"},
        }

    def normalized(self) -> "Spectrogram":
        """Divide by the peak |value|; the constant is kept in `normalization`."""
        peak = float(np.max(np.abs(self.values)))
        if peak == 0:
            return self
        return replace(self, values=self.values / peak, normalization=self.normalization * peak)

    def same_axes(self, other: "Spectrogram") -> bool:
        return self.freq_grid == other.freq_grid and self.delay_grid == other.delay_grid

    def check_same_axes(self, other: "Spectrogram") -> None:
        if not self.same_axes(other):
            raise GridMismatchError("Spectrograms are sampled on different (w, tau) grids.")


@dataclass(frozen=True, eq=False)
class TermFields:
    """
    Per-mode complex term fields in internal layout (M, n_tau, n_t).

    `background` is the state-independent intensity added after the mode sum
    (the vacuum complement when the basis is completed, else zero). c1/c2 may
    be None when only the quadrature terms were synthesized; their intensity is
    then part of `background`.
    """

    x: np.ndarray
    p: np.ndarray
    c1: np.ndarray | None
    c2: np.ndarray | None
    background: np.ndarray
    time_grid: TimeGrid
    delay_grid: DelayGrid
    w_center: float = 0.0

    @property
    def n_modes(self) -> int:
        return self.x.shape[0]

    @property
    def freq_grid(self) -> FreqGrid:
        return self.time_grid.freq_grid(self.w_center)

    def intensity(self, var_x: np.ndarray, var_p: np.ndarray) -> np.ndarray:
        """
        Weighted intensity in internal layout (n_tau, n_t).

        Summation order is fixed: modes ascending, then x, p, c1, c2, then the
        background.
        """
        var_x = np.asarray(var_x, dtype=float)
        var_p = np.asarray(var_p, dtype=float)
        if np.any(var_x <= 0) or np.any(var_p <= 0):
            raise StateError("Term weights (variances) must be positive.")
        total = np.zeros(self.x.shape[1:])
        for n in range(self.n_modes):
            total += var_x[n] * np.abs(self.x[n]) ** 2
            total += var_p[n] * np.abs(self.p[n]) ** 2
            if self.c1 is not None:
                total += 0.125 * np.abs(self.c1[n]) ** 2
            if self.c2 is not None:
                total += 0.125 * np.abs(self.c2[n]) ** 2
        return total + self.background

    def scaled(self, factor: np.ndarray) -> "TermFields":
        """Every field multiplied by a per-pixel real factor; the background by factor^2."""
        return replace(
            self,
            x=self.x * factor,
            p=self.p * factor,
            c1=None if self.c1 is None else self.c1 * factor,
            c2=None if self.c2 is None else self.c2 * factor,
            background=self.background * factor**2,
        )

    def spectrogram(self, var_x: np.ndarray, var_p: np.ndarray, kind: str = "raw") -> Spectrogram:
        return Spectrogram(
            values=to_spectrogram_layout(self.intensity(var_x, var_p)),
            freq_grid=self.freq_grid,
            delay_grid=self.delay_grid,
            kind=kind,
        )


def quadrature_fields(
    psi: np.ndarray,
    g_stack: np.ndarray,
    phase_stack: np.ndarray,
    grid: TimeGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """
    The x and p term fields of a stack of modes.

    Args:
        psi: Modes (M, n_t)
        g_stack: G(t - tau) per delay (n_tau, n_t)
        phase_stack: exp(i (dphi(t - tau) + w_s tau)) per delay (n_tau, n_t)
        grid: Time grid

    Returns:
        (A_x, A_p), each (M, n_tau, n_t) in natural DFT order
    """
    z = psi[:, None, :] * phase_stack[None, :, :]
    a_x = dft(g_stack * z.imag, grid)
    a_p = dft(g_stack * z.real, grid)
    return a_x, a_p


def vacuum_level(gate: GateFunctions) -> float:
    """
    Vacuum-input intensity, constant over (w, tau).

    Summing the coherent terms over a complete basis at variance 1/4 gives
    sum_n (|A_c1|^2 + |A_c2|^2)/4 = (1/2) sum |G(t)|^2 dt, exactly on the grid.
    """
    return 0.5 * float(np.sum(np.abs(gate.g) ** 2)) * gate.grid.dt


def vacuum_spectrogram(gate: GateFunctions, delays: DelayGrid, w_center: float = 0.0) -> Spectrogram:
    """Constant spectrogram of a vacuum input (kind "vacuum")."""
    freq_grid = gate.grid.freq_grid(w_center)
    values = np.full((freq_grid.n_w, delays.n_tau), vacuum_level(gate))
    return Spectrogram(values=values, freq_grid=freq_grid, delay_grid=delays, kind="vacuum")


def _check_compatible(state: GaussianStateSpec, gate: GateFunctions) -> None:
    if state.grid != gate.grid:
        raise GridMismatchError("State and gate are sampled on different time grids.")
    if abs(state.w_s - gate.w_s) > 1e-12:
        raise GateError(f"Gate w_s = {gate.w_s} differs from the state's w_s = {state.w_s}.")


def synthesize_term_fields(
    state: GaussianStateSpec,
    gate: GateFunctions,
    delays: DelayGrid,
    include_vacuum_complement: bool = False,
    w_center: float = 0.0,
) -> TermFields:
    """
    Term fields A_x, A_p, A_c1, A_c2 of every mode at every delay.

    Squeezing angles are folded into the modes first. With
    include_vacuum_complement the background holds I_vac minus the vacuum
    contribution of the occupied modes, so the total equals what a complete
    basis would give.

    Raises:
        GridMismatchError: If the state and gate grids differ
        GridError: If the window is too short or a delay is not a multiple of dt
    """
    _check_compatible(state, gate)
    grid = state.grid
    grid.check_span(state.longest_duration())
    state = apply_squeezing_angle(state)

    g_stack, dphi_stack = gate.delay_stack(delays)
    phase_stack = np.exp(1j * (dphi_stack + state.w_s * delays.tau[:, None]))
    psi = state.basis.matrix

    a_x, a_p = quadrature_fields(psi, g_stack, phase_stack, grid)
    c1 = dft(g_stack * np.exp(-1j * dphi_stack) * np.conj(psi)[:, None, :], grid)
    c2 = dft(g_stack * np.exp(1j * dphi_stack) * psi[:, None, :], grid)

    background = np.zeros((delays.n_tau, grid.n_t))
    fields = TermFields(
        x=a_x, p=a_p, c1=c1, c2=c2,
        background=background,
        time_grid=grid, delay_grid=delays, w_center=w_center,
    )
    if include_vacuum_complement:
        vacuum = np.full(state.n_modes, VACUUM_VARIANCE)
        occupied_vacuum = fields.intensity(vacuum, vacuum)
        fields = replace(fields, background=vacuum_level(gate) - occupied_vacuum)
    return fields


def synthesize_spectrogram(
    state: GaussianStateSpec,
    gate: GateFunctions,
    delays: DelayGrid,
    include_vacuum_complement: bool = True,
    normalize: bool = False,
    w_center: float = 0.0,
) -> Spectrogram:
    """
    Raw OPA-FROG spectrogram of a state.

    Args:
        state: Input Gaussian state
        gate: Gate functions on the same time grid
        delays: Delay grid
        include_vacuum_complement: Add the unoccupied modes' vacuum contribution
        normalize: Divide by the peak (the constant is stored on the result)
        w_center: Frequency offset recorded in the FreqGrid

    Returns:
        Spectrogram of kind "raw"
    """
    fields = synthesize_term_fields(state, gate, delays, include_vacuum_complement, w_center)
    spectrogram = fields.spectrogram(state.var_x, state.var_p, kind="raw")
    logger.debug(
        "Synthesized %d-mode spectrogram, peak %.4g, complement=%s",
        state.n_modes, spectrogram.peak, include_vacuum_complement,
    )
    return spectrogram.normalized() if normalize else spectrogram


def vacuum_subtract(raw: Spectrogram, vac: Spectrogram) -> Spectrogram:
    """
    Measured minus vacuum spectrogram; negative values indicate squeezing.

    Raises:
        SpectrogramFormatError: If the kinds are not raw and vacuum
        GridMismatchError: If the axes differ
    """
    if raw.kind != "raw" or vac.kind != "vacuum":
        raise SpectrogramFormatError(
            f"vacuum_subtract needs a raw and a vacuum spectrogram, got {raw.kind} and {vac.kind}."
        )
    raw.check_same_axes(vac)
    values = raw.values - vac.values * (vac.normalization / raw.normalization)
    return replace(raw, values=values, kind="vacuum_subtracted")


def complete_with_vacuum(spectrogram: Spectrogram, vac: Spectrogram) -> Spectrogram:
    """
    Full (raw) intensity from a raw or vacuum-subtracted spectrogram.

    Raw input is returned unchanged (de-normalized if it was normalized).
    """
    spectrogram.check_same_axes(vac)
    values = spectrogram.values * spectrogram.normalization
    if spectrogram.kind == "vacuum_subtracted":
        values = values + vac.values * vac.normalization
    elif spectrogram.kind != "raw":
        raise SpectrogramFormatError(f"Cannot complete a spectrogram of kind '{spectrogram.kind}'.")
    return replace(spectrogram, values=values, kind="raw", normalization=1.0)
