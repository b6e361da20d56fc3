"""Multimode OPA-FROG retrieval.

Each iteration synthesizes the model spectrogram from the current modes and
variances, projects the term fields onto the measured (vacuum-completed)
intensity, takes a preconditioned Wirtinger-gradient step on the modes with a
closed-form variance refit, and re-orthonormalizes the modes with modified
Gram-Schmidt.

Internally all intensities use the delay-major natural-DFT layout (n_tau, n_t)
of forward.TermFields.
"""

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .errors import (
    ConfigError,
    LossTrendWarning,
    NonFiniteGradientError,
    ReseedWarning,
    SpectrogramFormatError,
    UndefinedLossError,
)
from .forward import (
    Spectrogram,
    TermFields,
    complete_with_vacuum,
    from_spectrogram_layout,
    quadrature_fields,
    to_spectrogram_layout,
    vacuum_level,
    vacuum_spectrogram,
)
from .gate import GateFunctions
from .grid import DelayGrid, TimeGrid, dft_adjoint
from .states import (
    VACUUM_VARIANCE,
    GaussianStateSpec,
    ModeBasis,
    TemporalMode,
    gram_matrix,
    hermite_gaussian_basis,
)
from .utils import rng_stream

logger = logging.getLogger(__name__)

STEP_SCHEDULES = ("fixed", "backtracking")
VARIANCE_BOUNDS = (1e-6, 1e3)
DEGENERATE_PIXEL_EPS = 1e-12
# A mode whose Gram-Schmidt residual falls below this relative norm is dependent
RANK_TOL = 1e-6
# Relative RMS of the vacuum-subtracted data below which a measurement counts as pure vacuum
VACUUM_RESIDUAL_TOL = 1e-9
GRAM_DET_TOL = 1e-12
PHASE_SUPPORT_FRACTION = 1e-2
# Weighted RMS residual (rad) of the doubled-phase fit above which an angle is flagged
PHASE_FIT_TOL = 0.1
LOSS_TREND_WINDOW = 100
LOSS_TREND_TOL = 0.05
MAX_BACKTRACKS = 8


@dataclass(frozen=True, eq=False)
class RetrievalConfig:
    """
    Retrieval settings.

    Attributes:
        n_modes: Number of modes M to recover
        max_iters: Iteration budget
        step_size: Mode step in units of the inverse curvature bound (stable below 2)
        step_schedule: "fixed" or "backtracking"
        seed: Seed of the "init" random stream
        seed_key: Extra spawn-key counters (replica, repeat, ...) for the init stream
        mask: Optional zeroing mask in spectrogram layout (n_w, n_tau)
        convergence_tol: Stop when the loss moves less than this over convergence_window
        convergence_window: Iterations compared by the convergence test
        success_loss_threshold: Loss at or below which a retrieval counts as successful
        perturbation: Relative amplitude of the random perturbation of the initial modes
        log_every: Progress log interval (iterations)
    """

    n_modes: int
    max_iters: int = 10_000
    step_size: float = 1.0
    step_schedule: str = "fixed"
    seed: int = 0
    seed_key: tuple[int, ...] = ()
    mask: np.ndarray | None = None
    convergence_tol: float = 1e-7
    convergence_window: int = 200
    success_loss_threshold: float = 0.10
    perturbation: float = 0.05
    log_every: int = 500

    def __post_init__(self):
        if int(self.n_modes) < 1:
            raise ConfigError("/retrieval/n_modes", f"must be >= 1, got {self.n_modes}")
        if int(self.max_iters) < 1:
            raise ConfigError("/retrieval/max_iters", f"must be >= 1, got {self.max_iters}")
        if not self.step_size >= 0:
            raise ConfigError("/retrieval/step_size", f"must be >= 0, got {self.step_size}")
        if self.step_schedule not in STEP_SCHEDULES:
            raise ConfigError(
                "/retrieval/step_schedule",
                f"must be one of {STEP_SCHEDULES}, got '{self.step_schedule}'",
            )
        if not 0 < self.success_loss_threshold <= 1:
            raise ConfigError(
                "/retrieval/success_loss_threshold",
                f"must be in (0, 1], got {self.success_loss_threshold}",
            )
        if int(self.convergence_window) < 1:
            raise ConfigError("/retrieval/convergence_window", "must be >= 1")
        object.__setattr__(self, "n_modes", int(self.n_modes))
        object.__setattr__(self, "max_iters", int(self.max_iters))
        object.__setattr__(self, "seed_key", tuple(int(k) for k in self.seed_key))
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    def echo(self) -> dict[str, Any]:
        """JSON-ready copy of the settings (mask summarized by its pixel count)."""
        return {
            "n_modes": self.n_modes,
            "max_iters": self.max_iters,
            "step_size": self.step_size,
            "step_schedule": self.step_schedule,
            "seed": self.seed,
            "seed_key": list(self.seed_key),
            "mask_pixels": None if self.mask is None else int(self.mask.sum()),
            "convergence_tol": self.convergence_tol,
            "convergence_window": self.convergence_window,
            "success_loss_threshold": self.success_loss_threshold,
            "perturbation": self.perturbation,
            "log_every": self.log_every,
        }


@dataclass
class CandidateState:
    """
    Working estimate during retrieval.

    Attributes:
        modes: (M, n_t) complex modes (orthonormal after orthonormalize)
        var_x, var_p: Per-mode variances
        seed_orders: Hermite-Gaussian order each slot was last seeded from
        next_order: Next unused Hermite-Gaussian order for reseeding
        t0: Duration scale used for (re)seeding (fs)
        center: Time offset of the seeded modes (fs)
    """

    modes: np.ndarray
    var_x: np.ndarray
    var_p: np.ndarray
    seed_orders: list[int]
    next_order: int
    t0: float
    center: float = 0.0
    reseeds: int = 0

    def copy(self, **changes) -> "CandidateState":
        values = {
            "modes": self.modes.copy(),
            "var_x": self.var_x.copy(),
            "var_p": self.var_p.copy(),
            "seed_orders": list(self.seed_orders),
        }
        values.update(changes)
        return replace(self, **values)

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]


@dataclass(frozen=True, eq=False)
class DelayedGate:
    """Per-delay gate arrays shared by every iteration."""

    g: np.ndarray
    phase: np.ndarray
    grid: TimeGrid
    delays: DelayGrid
    gain_bound: float

    @classmethod
    def build(cls, gate: GateFunctions, delays: DelayGrid) -> "DelayedGate":
        g, delta_phi = gate.delay_stack(delays)
        phase = np.exp(1j * (delta_phi + gate.w_s * delays.tau[:, None]))
        # max over t of sum over tau |G(t - tau)|^2, scaled by the DFT's ||F||^2
        gain_bound = float(np.max(np.sum(np.abs(g) ** 2, axis=0))) * gate.grid.dt**2 * gate.grid.n_t
        return cls(g=g, phase=phase, grid=gate.grid, delays=delays, gain_bound=gain_bound)


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    """
    Output of retrieve().

    `synthesized` is the retrieved vacuum-subtracted spectrogram (None when
    read back from a result file without one). `converged`
    means final_loss <= success_loss_threshold; the stop reason is in
    diagnostics["stopped"].
    """

    basis: ModeBasis
    var_x: np.ndarray
    var_p: np.ndarray
    angles: np.ndarray
    loss_trace: np.ndarray
    final_loss: float
    converged: bool
    iterations_run: int
    synthesized: Spectrogram | None
    config: RetrievalConfig
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.basis)

    def to_state(self, w_s: float = 0.0) -> GaussianStateSpec:
        """The recovered state (raises StateError if a variance pair is unphysical)."""
        return GaussianStateSpec(basis=self.basis, var_x=self.var_x, var_p=self.var_p, w_s=w_s)


@dataclass(frozen=True)
class ModeMatch:
    """Greedy truth-to-recovered assignment; permutation[i] is the recovered index for truth mode i."""

    permutation: list[int]
    fidelities: np.ndarray
    phases: np.ndarray


@dataclass(frozen=True)
class SqueezingAngles:
    """Per-mode squeezing angles (mod pi) and covariance matrices in a common frame."""

    angles: np.ndarray
    relative: np.ndarray
    covariance: np.ndarray
    ambiguous: np.ndarray
    gate_referenced: bool


# -- loss -------------------------------------------------------------------


def _combined_weights(mask: np.ndarray | None, weights: np.ndarray | None, shape: tuple) -> np.ndarray:
    w = np.ones(shape)
    if mask is not None:
        w = w * np.asarray(mask, dtype=float)
    if weights is not None:
        w = w * np.asarray(weights, dtype=float)
    return w


def weighted_loss(measured: np.ndarray, synthesized: np.ndarray, weights: np.ndarray) -> float:
    """sqrt(sum w (I_meas - I_syn)^2) / sqrt(sum w I_meas^2) on plain arrays."""
    denominator = float(np.sum(weights * measured**2))
    if denominator <= 0:
        raise UndefinedLossError(
            "Measured spectrogram is identically zero under the mask; the loss is undefined."
        )
    return math.sqrt(float(np.sum(weights * (measured - synthesized) ** 2)) / denominator)


def loss(
    measured: Spectrogram,
    synthesized: Spectrogram,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> float:
    """
    Normalized RMS distance between two spectrograms.

    Args:
        measured: Reference spectrogram
        synthesized: Model spectrogram on the same axes
        mask: Optional zeroing mask (n_w, n_tau)
        weights: Optional per-pixel weights (bootstrap resampling counts)

    Raises:
        GridMismatchError: If the axes differ
        UndefinedLossError: If the measured values vanish under the mask
    """
    measured.check_same_axes(synthesized)
    w = _combined_weights(mask, weights, measured.values.shape)
    return weighted_loss(
        measured.values * measured.normalization,
        synthesized.values * synthesized.normalization,
        w,
    )


# -- model ------------------------------------------------------------------


def model_term_fields(candidate: CandidateState, gate: DelayedGate, vac_level: float) -> TermFields:
    """
    Quadrature term fields of the candidate with the vacuum complement as background.

    |A_c1|^2 + |A_c2|^2 = 2 (|A_x|^2 + |A_p|^2) pointwise, so the c1/c2 terms
    and the unoccupied modes' vacuum level reduce to
    I_vac - (1/4) sum_n (|A_x|^2 + |A_p|^2).
    """
    a_x, a_p = quadrature_fields(candidate.modes, gate.g, gate.phase, gate.grid)
    occupied = np.zeros(a_x.shape[1:])
    for n in range(candidate.n_modes):
        occupied += np.abs(a_x[n]) ** 2
        occupied += np.abs(a_p[n]) ** 2
    return TermFields(
        x=a_x, p=a_p, c1=None, c2=None,
        background=vac_level - VACUUM_VARIANCE * occupied,
        time_grid=gate.grid, delay_grid=gate.delays,
    )


def projection_factor(i_syn: np.ndarray, i_meas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Per-pixel magnitude rescaling sqrt(I_meas / I_syn).

    Pixels with zero weight or I_syn below DEGENERATE_PIXEL_EPS * peak keep factor 1.
    Negative measured intensities (noise) are clipped to zero.
    """
    factor = np.ones_like(i_syn)
    peak = float(np.max(i_syn)) if i_syn.size else 0.0
    valid = (i_syn > DEGENERATE_PIXEL_EPS * peak) & (weights > 0)
    factor[valid] = np.sqrt(np.clip(i_meas[valid], 0.0, None) / i_syn[valid])
    return factor


def data_projection(
    term_fields: TermFields,
    var_x: np.ndarray,
    var_p: np.ndarray,
    measured: Spectrogram,
    vac: Spectrogram,
    mask: np.ndarray | None = None,
) -> TermFields:
    """
    Rescale every term field so the synthesized intensity matches the measurement.

    The target is the full intensity (vacuum-subtracted input is completed with
    `vac`), so the rescaling argument is nonnegative. `term_fields` must carry
    the vacuum complement in its background.

    Args:
        term_fields: Current model fields
        var_x, var_p: Term weights (positive)
        measured: Raw or vacuum-subtracted measurement
        vac: Vacuum spectrogram of the gate
        mask: Optional zeroing mask (n_w, n_tau); masked pixels are untouched

    Returns:
        Projected term fields
    """
    full = complete_with_vacuum(measured, vac)
    i_meas = from_spectrogram_layout(full.values)
    i_syn = term_fields.intensity(var_x, var_p)
    w = from_spectrogram_layout(_combined_weights(mask, None, full.values.shape))
    return term_fields.scaled(projection_factor(i_syn, i_meas, w))


# -- gradient step ------------------------------------------------------------


def mode_objective(
    candidate: CandidateState,
    projected: TermFields,
    gate: DelayedGate,
    weights: np.ndarray | None = None,
    model: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Z = sum w (var_x |A_x^proj - A_x|^2 + var_p |A_p^proj - A_p|^2) over modes and pixels."""
    a_x, a_p = model if model is not None else quadrature_fields(candidate.modes, gate.g, gate.phase, gate.grid)
    w = 1.0 if weights is None else weights
    total = 0.0
    for n in range(candidate.n_modes):
        total += candidate.var_x[n] * float(np.sum(w * np.abs(projected.x[n] - a_x[n]) ** 2))
        total += candidate.var_p[n] * float(np.sum(w * np.abs(projected.p[n] - a_p[n]) ** 2))
    return total


def mode_gradient(
    candidate: CandidateState,
    projected: TermFields,
    gate: DelayedGate,
    weights: np.ndarray | None = None,
    model: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """
    Wirtinger gradient dZ/dpsi* of mode_objective, via adjoint transforms.

    With e = exp(i (dphi + w_s tau)) and F^H the adjoint DFT:
        dZ/dpsi* = sum_tau conj(e) [ i var_x Re(conj(g) F^H(w (A_x - P_x)))
                                     + var_p Re(conj(g) F^H(w (A_p - P_p))) ]
    """
    a_x, a_p = model if model is not None else quadrature_fields(candidate.modes, gate.g, gate.phase, gate.grid)
    w = 1.0 if weights is None else weights
    back_x = dft_adjoint(w * (a_x - projected.x), gate.grid)
    back_p = dft_adjoint(w * (a_p - projected.p), gate.grid)
    g_conj = np.conj(gate.g)[None]
    inner = (
        1j * candidate.var_x[:, None, None] * np.real(g_conj * back_x)
        + candidate.var_p[:, None, None] * np.real(g_conj * back_p)
    )
    return np.sum(np.conj(gate.phase)[None] * inner, axis=1)


def _refit_variances(
    candidate: CandidateState,
    projected: TermFields,
    model: tuple[np.ndarray, np.ndarray],
    weights: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """var <- sum |sqrt(var) A^proj|^2 / sum |A^model|^2 per mode and quadrature, clamped."""
    a_x, a_p = model
    w = 1.0 if weights is None else weights
    var_x = candidate.var_x.copy()
    var_p = candidate.var_p.copy()
    for n in range(candidate.n_modes):
        for var, proj, unit in ((var_x, projected.x[n], a_x[n]), (var_p, projected.p[n], a_p[n])):
            model_energy = float(np.sum(w * np.abs(unit) ** 2))
            if model_energy > 0:
                var[n] = var[n] * float(np.sum(w * np.abs(proj) ** 2)) / model_energy
    return np.clip(var_x, *VARIANCE_BOUNDS), np.clip(var_p, *VARIANCE_BOUNDS)


def gradient_step(
    candidate: CandidateState,
    projected: TermFields,
    gate: DelayedGate,
    step: float,
    weights: np.ndarray | None = None,
    model: tuple[np.ndarray, np.ndarray] | None = None,
    backtracking: bool = False,
) -> CandidateState:
    """
    One preconditioned gradient step on the modes plus the closed-form variance refit.

    Each mode moves by -step * dZ/dpsi* / L_n, where L_n bounds the curvature of
    Z in that mode (gain bound times max(var_x, var_p) times the mean pixel weight).

    Args:
        candidate: Current estimate
        projected: Term fields after data_projection
        gate: Per-delay gate arrays
        step: Step size (>= 0); 0 leaves the modes unchanged
        weights: Per-pixel weights in internal layout
        model: Precomputed (A_x, A_p) of the candidate
        backtracking: Halve the step until Z does not increase

    Raises:
        NonFiniteGradientError: If the gradient has NaN or infinite entries
    """
    if step < 0:
        raise ValueError(f"Step size must be >= 0, got {step}.")
    if model is None:
        model = quadrature_fields(candidate.modes, gate.g, gate.phase, gate.grid)
    var_x, var_p = _refit_variances(candidate, projected, model, weights)
    if step == 0:
        return candidate.copy(var_x=var_x, var_p=var_p)

    gradient = mode_gradient(candidate, projected, gate, weights, model)
    if not np.all(np.isfinite(gradient)):
        bad = int(np.argwhere(~np.isfinite(gradient))[0][0])
        raise NonFiniteGradientError(
            f"Mode gradient is not finite (first bad mode {bad}); "
            f"var_x={candidate.var_x[bad]:.4g}, var_p={candidate.var_p[bad]:.4g}."
        )
    mean_weight = 1.0
    if weights is not None and np.any(weights > 0):
        mean_weight = max(1.0, float(np.mean(weights[weights > 0])))
    curvature = gate.gain_bound * mean_weight * np.maximum(candidate.var_x, candidate.var_p)
    direction = gradient / curvature[:, None]

    modes = candidate.modes - step * direction
    if backtracking:
        before = mode_objective(candidate, projected, gate, weights, model)
        trial = candidate.copy(modes=modes)
        for _ in range(MAX_BACKTRACKS):
            if mode_objective(trial, projected, gate, weights) <= before:
                break
            step *= 0.5
            trial = candidate.copy(modes=candidate.modes - step * direction)
        modes = trial.modes
    return candidate.copy(modes=modes, var_x=var_x, var_p=var_p)


# -- orthonormalization ---------------------------------------------------------


def _seed_mode(order: int, t0: float, center: float, grid: TimeGrid) -> np.ndarray:
    mode = hermite_gaussian_basis(1, t0, 0.0, grid, start_order=order).modes[0].samples
    return np.roll(mode, int(round(center / grid.dt)))


def gram_schmidt(vectors: np.ndarray, grid: TimeGrid, order: list[int]) -> tuple[np.ndarray, list[int]]:
    """
    Modified Gram-Schmidt with one reorthogonalization pass.

    Args:
        vectors: (M, n_t) complex vectors
        grid: Time grid (inner product sum a b* dt)
        order: Processing order of the rows

    Returns:
        (orthonormal rows in the original slots, rows found dependent)
    """
    out = np.array(vectors, dtype=complex)
    done: list[int] = []
    dependent: list[int] = []
    for n in order:
        v = out[n].copy()
        original = math.sqrt(float(np.sum(np.abs(v) ** 2)) * grid.dt)
        for _ in range(2):
            for q in done:
                v -= (np.sum(v * np.conj(out[q])) * grid.dt) * out[q]
        norm = math.sqrt(float(np.sum(np.abs(v) ** 2)) * grid.dt)
        if original == 0 or norm < RANK_TOL * original:
            dependent.append(n)
            continue
        out[n] = v / norm
        done.append(n)
    return out, dependent


def orthonormalize(candidate: CandidateState, grid: TimeGrid) -> CandidateState:
    """
    Orthonormalize the candidate modes, strongest (farthest from vacuum) first.

    Ties are broken by the lower seed order. A mode that is linearly dependent
    on the ones before it is reseeded from the next unused Hermite-Gaussian
    order (with a ReseedWarning). Variances are left unchanged.
    """
    distance = np.abs(candidate.var_x - VACUUM_VARIANCE) + np.abs(candidate.var_p - VACUUM_VARIANCE)
    order = sorted(range(candidate.n_modes), key=lambda n: (-distance[n], candidate.seed_orders[n]))

    normalized = candidate.modes / np.sqrt(np.sum(np.abs(candidate.modes) ** 2, axis=1) * grid.dt)[:, None]
    det = float(np.real(np.linalg.det(gram_matrix(normalized, grid))))
    modes = candidate.modes
    seed_orders = list(candidate.seed_orders)
    next_order = candidate.next_order
    reseeds = candidate.reseeds
    if det <= GRAM_DET_TOL:
        logger.debug("Gram determinant %.3e: candidate modes nearly dependent", det)

    for _ in range(candidate.n_modes + 1):
        modes, dependent = gram_schmidt(modes, grid, order)
        if not dependent:
            break
        modes = modes.copy()
        for n in dependent:
            warnings.warn(
                f"Mode slot {n} is linearly dependent; reseeding from Hermite-Gaussian order {next_order}.",
                ReseedWarning,
                stacklevel=2,
            )
            modes[n] = _seed_mode(next_order, candidate.t0, candidate.center, grid)
            seed_orders[n] = next_order
            next_order += 1
            reseeds += 1
    return candidate.copy(modes=modes, seed_orders=seed_orders, next_order=next_order, reseeds=reseeds)


# -- initialization -------------------------------------------------------------


def _estimate_mode_scale(
    marginal: np.ndarray,
    delays: DelayGrid,
    gate: GateFunctions,
    n_modes: int,
) -> tuple[float, float]:
    """Duration scale t0 and center of the modes from the delay marginal of |I_vacsub|."""
    grid = gate.grid
    lower, upper = 5.0 * grid.dt, grid.span / 12.0
    excess_gain = np.exp(2.0 * np.asarray(gate.r)) - 1.0
    if np.sum(excess_gain) > 0:
        t = grid.t
        gate_center = np.sum(t * excess_gain) / np.sum(excess_gain)
        gate_var = float(np.sum((t - gate_center) ** 2 * excess_gain) / np.sum(excess_gain))
    else:
        gate_var = 0.0

    total = float(np.sum(marginal))
    if total <= 0:
        return float(np.clip(math.sqrt(gate_var) if gate_var > 0 else grid.span / 32.0, lower, upper)), 0.0

    tau = delays.tau
    center = float(np.sum(tau * marginal) / total)
    spread = float(np.sum((tau - center) ** 2 * marginal) / total)
    mode_var = max(spread - gate_var, 0.0)
    # <t^2> averaged over Hermite-Gaussian orders 0..M-1 is (M/2) t0^2
    t0 = math.sqrt(2.0 * mode_var / n_modes) if mode_var > 0 else lower
    return float(np.clip(t0, lower, upper)), center


def initialize(config: RetrievalConfig, measured: Spectrogram, gate: GateFunctions) -> CandidateState:
    """
    Seeded starting point: Hermite-Gaussian orders 0..M-1 plus a random perturbation.

    t0 comes from the delay marginal of the vacuum-subtracted measurement;
    variances start at the vacuum value 1/4. Identical seeds give bit-identical
    candidates.
    """
    grid = gate.grid
    vac = vacuum_spectrogram(gate, measured.delay_grid, measured.freq_grid.w_center)
    full = complete_with_vacuum(measured, vac)
    excess = np.abs(full.values - vac.values)
    if config.mask is not None:
        excess = excess * config.mask
    t0, center = _estimate_mode_scale(excess.sum(axis=0), measured.delay_grid, gate, config.n_modes)
    center = round(center / grid.dt) * grid.dt

    m = config.n_modes
    modes = np.stack([_seed_mode(n, t0, center, grid) for n in range(m)])
    rng = rng_stream(config.seed, "init", *config.seed_key)
    noise = rng.standard_normal((m, grid.n_t)) + 1j * rng.standard_normal((m, grid.n_t))
    envelope = np.exp(-0.5 * ((grid.t - center) / (2.0 * t0)) ** 2)
    modes = modes + config.perturbation * float(np.max(np.abs(modes))) * noise * envelope

    logger.debug("Initialized %d modes with t0 = %.2f fs at %.1f fs", m, t0, center)
    candidate = CandidateState(
        modes=modes,
        var_x=np.full(m, VACUUM_VARIANCE),
        var_p=np.full(m, VACUUM_VARIANCE),
        seed_orders=list(range(m)),
        next_order=m,
        t0=t0,
        center=center,
    )
    return orthonormalize(candidate, grid)


# -- analysis -------------------------------------------------------------------


def _samples(mode: TemporalMode | np.ndarray) -> np.ndarray:
    return mode.samples if isinstance(mode, TemporalMode) else np.asarray(mode)


def mode_fidelity(truth: TemporalMode | np.ndarray, recovered: TemporalMode | np.ndarray, grid: TimeGrid | None = None) -> float:
    """|sum psi_truth^* psi_rec dt|^2, clipped to [0, 1]."""
    if grid is None:
        grid = truth.grid if isinstance(truth, TemporalMode) else recovered.grid  # type: ignore[union-attr]
    value = abs(np.sum(np.conj(_samples(truth)) * _samples(recovered)) * grid.dt) ** 2
    return float(min(max(value, 0.0), 1.0))


def match_modes(truth: ModeBasis, recovered: ModeBasis) -> ModeMatch:
    """
    Greedy maximum-fidelity assignment of recovered modes to truth modes.

    Pairs are taken in descending fidelity without reuse. phases[i] is the
    residual global phase with recovered ~ exp(i phase) * truth. Recovered
    modes beyond the truth count are left unmatched.
    """
    if len(recovered) < len(truth):
        raise ValueError(f"Cannot match {len(truth)} truth modes to {len(recovered)} recovered modes.")
    grid = truth.grid
    overlaps = (recovered.matrix.conj() @ truth.matrix.T).T * grid.dt
    overlaps = np.conj(overlaps)
    fidelity = np.abs(overlaps) ** 2

    m = len(truth)
    permutation = [-1] * m
    used_truth: set[int] = set()
    used_rec: set[int] = set()
    for flat in np.argsort(-fidelity, axis=None, kind="stable"):
        i, j = divmod(int(flat), len(recovered))
        if i in used_truth or j in used_rec:
            continue
        permutation[i] = j
        used_truth.add(i)
        used_rec.add(j)
        if len(used_truth) == m:
            break
    fidelities = np.array([min(fidelity[i, permutation[i]], 1.0) for i in range(m)])
    phases = np.array([np.angle(overlaps[i, permutation[i]]) for i in range(m)])
    return ModeMatch(permutation=permutation, fidelities=fidelities, phases=phases)


def compare_to_truth(truth: GaussianStateSpec, result: "RetrievalResult") -> dict[str, Any]:
    """
    Fidelities and variance errors of a retrieval against a known state.

    Truth variances are put in the var_x <= var_p convention before comparing.
    Entries are indexed by truth mode. "unmatched" lists recovered modes with no truth
    partner when more modes were retrieved than the truth has.
    """
    match = match_modes(truth.basis, result.basis)
    truth_x = np.minimum(truth.var_x, truth.var_p)
    truth_p = np.maximum(truth.var_x, truth.var_p)
    rec_x = result.var_x[match.permutation]
    rec_p = result.var_p[match.permutation]
    return {
        "permutation": match.permutation,
        "fidelities": match.fidelities,
        "var_x_truth": truth_x,
        "var_p_truth": truth_p,
        "var_x_recovered": rec_x,
        "var_p_recovered": rec_p,
        "var_x_rel_error": np.abs(rec_x - truth_x) / truth_x,
        "var_p_rel_error": np.abs(rec_p - truth_p) / truth_p,
        "unmatched": [j for j in range(result.n_modes) if j not in match.permutation],
    }


def canonical_form(modes: np.ndarray, var_x: np.ndarray, var_p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Put each mode in the var_x <= var_p convention.

    (psi, var_x, var_p) and (i psi, var_p, var_x) give identical spectrograms,
    so modes with var_x > var_p are rotated by pi/2 and their variances swapped.
    """
    modes = np.array(modes, dtype=complex)
    var_x = np.array(var_x, dtype=float)
    var_p = np.array(var_p, dtype=float)
    swap = var_x > var_p
    modes[swap] *= 1j
    var_x[swap], var_p[swap] = var_p[swap].copy(), var_x[swap].copy()
    return modes, var_x, var_p


def covariance_matrices(var_x: np.ndarray, var_p: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Per-mode R(phi) diag(var_x, var_p) R(phi)^T, shape (M, 2, 2)."""
    c, s = np.cos(angles), np.sin(angles)
    rotation = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
    diagonal = np.zeros((len(var_x), 2, 2))
    diagonal[:, 0, 0] = var_x
    diagonal[:, 1, 1] = var_p
    return rotation @ diagonal @ np.swapaxes(rotation, -1, -2)


def _mode_phase(samples: np.ndarray, t: np.ndarray) -> tuple[float, bool]:
    """
    Phase of a mode at its intensity centroid, from a quadratic fit of its doubled phase.

    Doubling removes the pi jumps at Hermite nodes; the quadratic absorbs a
    common chirp. The fit is weighted by |psi| over samples above
    PHASE_SUPPORT_FRACTION of the peak. Returns (phase, ambiguous), where
    ambiguous means the weighted RMS fit residual exceeds PHASE_FIT_TOL.
    """
    magnitude = np.abs(samples)
    peak = float(np.max(magnitude))
    support = magnitude >= PHASE_SUPPORT_FRACTION * peak
    if np.count_nonzero(support) < 3:
        index = int(np.argmax(magnitude))
        return float(np.angle(samples[index])), False
    weight = magnitude[support]
    intensity = weight**2
    center = float(np.sum(t[support] * intensity) / np.sum(intensity))
    scale = math.sqrt(float(np.sum((t[support] - center) ** 2 * intensity) / np.sum(intensity))) or 1.0
    u = (t[support] - center) / scale
    doubled = np.unwrap(np.angle(samples[support] ** 2))
    coefficients = np.polyfit(u, doubled, 2, w=weight)
    residual = doubled - np.polyval(coefficients, u)
    rms = math.sqrt(float(np.sum(intensity * residual**2) / np.sum(intensity)))
    return float(coefficients[-1]) / 2.0, rms > PHASE_FIT_TOL


def extract_squeezing_angles(result: RetrievalResult, reference: ModeBasis | None = None) -> SqueezingAngles:
    """
    Squeezing angle of each recovered mode, modulo pi.

    Without a reference the angle is the mode.s fitted phase at its
    intensity centroid (see _mode_phase); a chirp shared by the modes
    cancels from the relative angles. With a reference basis
    (e.g. the unrotated generator modes) the angle is the residual phase of the
    matched reference mode. Relative angles are taken against mode 0; a single
    mode is only defined against the gate phase (gate_referenced=True).
    """
    modes = result.basis.matrix
    m = modes.shape[0]
    ambiguous = np.zeros(m, dtype=bool)
    if reference is None:
        angles = np.empty(m)
        for n in range(m):
            angles[n], ambiguous[n] = _mode_phase(modes[n], result.basis.grid.t)
    else:
        match = match_modes(reference, result.basis)
        angles = np.empty(m)
        for j in range(m):
            if j not in match.permutation:
                angles[j], ambiguous[j] = _mode_phase(modes[j], result.basis.grid.t)
        for i, j in enumerate(match.permutation):
            angles[j] = match.phases[i]
    angles = np.mod(angles, np.pi)
    relative = np.mod(angles - angles[0], np.pi)
    covariance = covariance_matrices(result.var_x, result.var_p, angles)
    return SqueezingAngles(
        angles=angles,
        relative=relative,
        covariance=covariance,
        ambiguous=ambiguous,
        gate_referenced=(m == 1),
    )


# -- driver -----------------------------------------------------------------------


class RetrievalEngine:
    """Iterates synthesize -> project -> gradient -> orthonormalize for one measurement."""

    def __init__(
        self,
        measured: Spectrogram,
        gate: GateFunctions,
        config: RetrievalConfig,
        pixel_weights: np.ndarray | None = None,
    ):
        """
        Prepare a retrieval.

        Args:
            measured: Raw or vacuum-subtracted spectrogram
            gate: Known gate functions
            config: Retrieval settings
            pixel_weights: Optional per-pixel weights (n_w, n_tau), e.g. bootstrap counts

        Raises:
            SpectrogramFormatError: If `measured` is a vacuum spectrogram
            UndefinedLossError: If the full intensity vanishes under the mask
        """
        if measured.kind not in ("raw", "vacuum_subtracted"):
            raise SpectrogramFormatError(
                f"Retrieval needs a raw or vacuum-subtracted spectrogram, got '{measured.kind}'."
            )
        self.gate = gate
        self.config = config
        self.grid = gate.grid
        self.delays = measured.delay_grid
        self.freq_grid = measured.freq_grid
        if measured.time_grid != self.grid:
            raise SpectrogramFormatError("Spectrogram time grid does not match the gate's grid.")

        self.vac_level = vacuum_level(gate)
        vac = vacuum_spectrogram(gate, self.delays, self.freq_grid.w_center)
        full = complete_with_vacuum(measured, vac)
        self.i_meas = from_spectrogram_layout(full.values)
        self.i_meas_vacsub = self.i_meas - self.vac_level
        weights = _combined_weights(config.mask, pixel_weights, full.values.shape)
        self.weights = from_spectrogram_layout(weights)
        full_energy = float(np.sum(self.weights * self.i_meas**2))
        if full_energy <= 0:
            raise UndefinedLossError("Measurement is identically zero under the mask; nothing to retrieve.")
        # Pure vacuum leaves nothing after subtraction; score against the full intensity instead.
        residual = float(np.sum(self.weights * self.i_meas_vacsub**2))
        self.vacuum_only = residual <= VACUUM_RESIDUAL_TOL**2 * full_energy
        if self.vacuum_only:
            logger.info("Measurement equals the vacuum level under the mask; loss uses the full intensity.")

        self.delayed_gate = DelayedGate.build(gate, self.delays)
        self.candidate = initialize(config, measured, gate)
        self.loss_trace: list[float] = []

    def current_fields(self) -> TermFields:
        return model_term_fields(self.candidate, self.delayed_gate, self.vac_level)

    def _loss(self, i_syn: np.ndarray) -> float:
        if self.vacuum_only:
            return weighted_loss(self.i_meas, i_syn, self.weights)
        return weighted_loss(self.i_meas_vacsub, i_syn - self.vac_level, self.weights)

    def current_loss(self, fields: TermFields | None = None) -> float:
        fields = fields or self.current_fields()
        return self._loss(fields.intensity(self.candidate.var_x, self.candidate.var_p))

    def step(self) -> float:
        """Run one iteration; returns the loss of the model it started from."""
        candidate = self.candidate
        fields = self.current_fields()
        i_syn = fields.intensity(candidate.var_x, candidate.var_p)
        current = self._loss(i_syn)

        projected = fields.scaled(projection_factor(i_syn, self.i_meas, self.weights))
        candidate = gradient_step(
            candidate,
            projected,
            self.delayed_gate,
            self.config.step_size,
            weights=self.weights,
            model=(fields.x, fields.p),
            backtracking=self.config.step_schedule == "backtracking",
        )
        self.candidate = orthonormalize(candidate, self.grid)
        self.loss_trace.append(current)
        return current

    def _converged(self) -> bool:
        window = self.config.convergence_window
        if len(self.loss_trace) <= window:
            return False
        return abs(self.loss_trace[-1] - self.loss_trace[-1 - window]) < self.config.convergence_tol

    def _trend_violations(self) -> int:
        trace = self.loss_trace
        violations = 0
        for start in range(0, len(trace) - LOSS_TREND_WINDOW, LOSS_TREND_WINDOW):
            if trace[start + LOSS_TREND_WINDOW] > trace[start] * (1.0 + LOSS_TREND_TOL):
                violations += 1
        return violations

    def run(self) -> RetrievalResult:
        """Iterate until convergence or max_iters and package the result."""
        config = self.config
        started = time.perf_counter()
        stopped = "max_iters"
        for iteration in range(1, config.max_iters + 1):
            value = self.step()
            if config.log_every and iteration % config.log_every == 0:
                logger.info("Iteration %d: loss %.6g", iteration, value)
            else:
                logger.debug("Iteration %d: loss %.6g", iteration, value)
            if self._converged():
                stopped = "tolerance"
                break
        elapsed = time.perf_counter() - started
        return self.result(stopped=stopped, elapsed=elapsed)

    def result(self, stopped: str = "max_iters", elapsed: float = 0.0) -> RetrievalResult:
        """Package the current candidate as a RetrievalResult."""
        config = self.config
        fields = self.current_fields()
        final_loss = self.current_loss(fields)
        i_syn = fields.intensity(self.candidate.var_x, self.candidate.var_p)
        synthesized = Spectrogram(
            values=to_spectrogram_layout(i_syn - self.vac_level),
            freq_grid=self.freq_grid,
            delay_grid=self.delays,
            kind="vacuum_subtracted",
        )

        modes, var_x, var_p = canonical_form(self.candidate.modes, self.candidate.var_x, self.candidate.var_p)
        basis = ModeBasis.from_array(modes, self.grid)
        violations = self._trend_violations()
        if violations:
            warnings.warn(
                f"Loss rose over {violations} window(s) of {LOSS_TREND_WINDOW} iterations.",
                LossTrendWarning,
                stacklevel=2,
            )
        result = RetrievalResult(
            basis=basis,
            var_x=var_x,
            var_p=var_p,
            angles=np.zeros(len(basis)),
            loss_trace=np.array(self.loss_trace),
            final_loss=final_loss,
            converged=final_loss <= config.success_loss_threshold,
            iterations_run=len(self.loss_trace),
            synthesized=synthesized,
            config=config,
            diagnostics={
                "stopped": stopped,
                "elapsed_s": elapsed,
                "reseeds": self.candidate.reseeds,
                "trend_violations": violations,
                "t0_init_fs": self.candidate.t0,
                "seed": config.seed,
                "seed_key": list(config.seed_key),
            },
        )
        angles = extract_squeezing_angles(result)
        result.diagnostics["ambiguous_angles"] = angles.ambiguous.tolist()
        result.diagnostics["gate_referenced_angle"] = angles.gate_referenced
        logger.info(
            "Retrieval stopped (%s) after %d iterations: loss %.4g", stopped, result.iterations_run, final_loss
        )
        return replace(result, angles=angles.angles)


def retrieve(
    measured: Spectrogram,
    gate: GateFunctions,
    config: RetrievalConfig,
    pixel_weights: np.ndarray | None = None,
) -> RetrievalResult:
    """
    Recover modes, variances and squeezing angles from a spectrogram.

    Args:
        measured: Raw or vacuum-subtracted spectrogram (the latter is completed
            with the gate's vacuum level)
        gate: Known gate functions
        config: Retrieval settings
        pixel_weights: Optional per-pixel weights (n_w, n_tau)

    Returns:
        RetrievalResult with the loss trace and a converged flag
    """
    return RetrievalEngine(measured, gate, config, pixel_weights).run()
