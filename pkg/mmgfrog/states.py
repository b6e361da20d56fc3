"""Multimode Gaussian input states: principal modes, quadrature variances, angles.

Quadratures follow x = (a + a^dag)/2, so the vacuum variance is 1/4 and a pure
state saturates var_x * var_p = 1/16.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import eval_hermite

from .errors import GridMismatchError, StateError, UnderResolvedError
from .grid import TimeGrid

logger = logging.getLogger(__name__)

VACUUM_VARIANCE = 0.25
MAX_HERMITE_ORDER = 20
NORM_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8
HEISENBERG_TOL = 1e-12


def overlap(a: np.ndarray, b: np.ndarray, grid: TimeGrid) -> complex:
    """Inner product  sum a(t) b*(t) dt."""
    return complex(np.sum(a * np.conj(b)) * grid.dt)


def gram_matrix(samples: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Gram matrix G[m, n] = sum psi_m psi_n^* dt of a stack of modes (M, n_t)."""
    return (samples @ samples.conj().T) * grid.dt


@dataclass(frozen=True, eq=False)
class TemporalMode:
    """One unit-norm principal mode sampled on a TimeGrid."""

    samples: np.ndarray
    grid: TimeGrid
    label: int = 0

    def __post_init__(self):
        samples = np.array(self.samples, dtype=complex)
        if samples.shape != (self.grid.n_t,):
            raise GridMismatchError(
                f"Mode {self.label} has shape {samples.shape}, grid needs ({self.grid.n_t},)."
            )
        norm = float(np.sum(np.abs(samples) ** 2) * self.grid.dt)
        if abs(norm - 1.0) > NORM_TOL:
            raise StateError(f"Mode {self.label} is not unit norm (norm = {norm:.12g}).")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @classmethod
    def normalized(cls, samples: np.ndarray, grid: TimeGrid, label: int = 0) -> "TemporalMode":
        """Build a mode from arbitrary samples, rescaling to unit norm."""
        samples = np.asarray(samples, dtype=complex)
        norm = np.sqrt(np.sum(np.abs(samples) ** 2) * grid.dt)
        if not norm > 0:
            raise StateError(f"Mode {label} has zero norm and cannot be normalized.")
        return cls(samples / norm, grid, label)

    def rms_width(self) -> float:
        """RMS duration of |psi|^2 about its centroid (fs)."""
        t = self.grid.t
        weight = np.abs(self.samples) ** 2 * self.grid.dt
        center = np.sum(t * weight)
        return float(np.sqrt(np.sum((t - center) ** 2 * weight)))

    def rotated(self, angle: float) -> "TemporalMode":
        """Mode multiplied by exp(i * angle)."""
        return TemporalMode(self.samples * np.exp(1j * angle), self.grid, self.label)


@dataclass(frozen=True, eq=False)
class ModeBasis:
    """Ordered, pairwise orthonormal set of modes on one grid."""

    modes: tuple[TemporalMode, ...]

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise StateError("A mode basis needs at least one mode.")
        grid = modes[0].grid
        for mode in modes[1:]:
            if mode.grid != grid:
                raise GridMismatchError("All modes of a basis must share one TimeGrid.")
        object.__setattr__(self, "modes", modes)
        deviation = self.gram_deviation()
        if deviation > ORTHONORMAL_TOL:
            raise StateError(
                f"Modes are not orthonormal: Gram matrix deviates from identity by {deviation:.3e}."
            )

    @classmethod
    def from_array(cls, samples: np.ndarray, grid: TimeGrid, labels: list[int] | None = None) -> "ModeBasis":
        """Build a basis from a (M, n_t) array of already-orthonormal samples."""
        samples = np.atleast_2d(np.asarray(samples, dtype=complex))
        labels = labels if labels is not None else list(range(samples.shape[0]))
        return cls(tuple(TemporalMode(s, grid, int(l)) for s, l in zip(samples, labels)))

    @property
    def grid(self) -> TimeGrid:
        return self.modes[0].grid

    @property
    def matrix(self) -> np.ndarray:
        """Mode samples stacked as (M, n_t)."""
        return np.stack([mode.samples for mode in self.modes])

    def __len__(self) -> int:
        return len(self.modes)

    def gram(self) -> np.ndarray:
        return gram_matrix(self.matrix, self.grid)

    def gram_deviation(self) -> float:
        """Max-norm distance of the Gram matrix from the identity."""
        return float(np.max(np.abs(self.gram() - np.eye(len(self.modes)))))


@dataclass(frozen=True, eq=False)
class GaussianStateSpec:
    """
    Zero-mean multimode Gaussian state in its principal-mode basis.

    Attributes:
        basis: Orthonormal principal modes
        var_x: Per-mode <x^2> (vacuum 1/4)
        var_p: Per-mode <p^2>
        angle: Per-mode squeezing angle (rad), folded into the mode phase by
            apply_squeezing_angle
        w_s: Central angular frequency of the state (rad/fs, rotating frame)
    """

    basis: ModeBasis
    var_x: np.ndarray
    var_p: np.ndarray
    angle: np.ndarray = field(default=None)  # type: ignore[assignment]
    w_s: float = 0.0

    def __post_init__(self):
        m = len(self.basis)
        var_x = np.array(self.var_x, dtype=float).reshape(-1)
        var_p = np.array(self.var_p, dtype=float).reshape(-1)
        angle = np.zeros(m) if self.angle is None else np.array(self.angle, dtype=float).reshape(-1)
        for name, values in (("var_x", var_x), ("var_p", var_p), ("angle", angle)):
            if values.shape != (m,):
                raise StateError(f"{name} has {values.size} entries for {m} modes.")
            if not np.all(np.isfinite(values)):
                raise StateError(f"{name} contains non-finite values.")
        if np.any(var_x <= 0) or np.any(var_p <= 0):
            raise StateError("Quadrature variances must be positive.")
        product = var_x * var_p
        bad = np.flatnonzero(product < 1.0 / 16.0 - HEISENBERG_TOL)
        if bad.size:
            n = int(bad[0])
            raise StateError(
                f"Mode {n} violates the uncertainty bound: var_x * var_p = {product[n]:.6g} < 1/16."
            )
        for name, values in (("var_x", var_x), ("var_p", var_p), ("angle", angle)):
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        object.__setattr__(self, "w_s", float(self.w_s))

    @property
    def grid(self) -> TimeGrid:
        return self.basis.grid

    @property
    def n_modes(self) -> int:
        return len(self.basis)

    def longest_duration(self) -> float:
        """Largest rms full width (2 x rms) over the modes (fs)."""
        return max(2.0 * mode.rms_width() for mode in self.basis.modes)


def hermite_gaussian_mode(
    order: int,
    t0: float,
    chirp: float,
    grid: TimeGrid,
    label: int | None = None,
) -> TemporalMode:
    """
    Chirped Hermite-Gaussian temporal mode.

    psi_n(t) ~ H_n(t/t0) exp(-t^2 / 2 t0^2) exp(i chirp t^2 / 2 t0^2),
    normalized to unit norm on the grid.

    Args:
        order: Hermite polynomial order (0..20)
        t0: Duration scale (fs), must exceed 4 dt
        chirp: Dimensionless quadratic-phase coefficient
        grid: Time grid
        label: Mode label (defaults to the order)

    Raises:
        StateError: If order is negative or above 20
        UnderResolvedError: If t0 <= 4 dt
    """
    if order < 0 or order > MAX_HERMITE_ORDER:
        raise StateError(f"Hermite order must be in [0, {MAX_HERMITE_ORDER}], got {order}.")
    if t0 <= 4.0 * grid.dt:
        raise UnderResolvedError(
            f"t0 = {t0:g} fs is under-resolved by dt = {grid.dt:g} fs (need t0 > 4 dt)."
        )
    u = grid.t / t0
    envelope = eval_hermite(order, u) * np.exp(-0.5 * u**2)
    samples = envelope * np.exp(0.5j * chirp * u**2)
    return TemporalMode.normalized(samples, grid, order if label is None else label)


def hermite_functions(n_max: int, u: np.ndarray) -> np.ndarray:
    """
    Normalized Hermite functions of orders 0..n_max at points u.

    Uses the three-term recurrence on the normalized functions, which stays
    finite far beyond the order where H_n(u) exp(-u^2/2) loses precision.
    """
    out = np.empty((n_max + 1, u.size))
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * u**2)
    if n_max >= 1:
        out[1] = np.sqrt(2.0) * u * out[0]
    for n in range(1, n_max):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * u * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def hermite_gaussian_basis(
    n_modes: int,
    t0: float,
    chirp: float,
    grid: TimeGrid,
    start_order: int = 0,
) -> ModeBasis:
    """
    Consecutive chirped Hermite-Gaussian orders start_order .. start_order + n_modes - 1.

    Unlike hermite_gaussian_mode this is not limited to order 20, so it can
    build the large vacuum bases used for completeness sums.
    """
    if t0 <= 4.0 * grid.dt:
        raise UnderResolvedError(
            f"t0 = {t0:g} fs is under-resolved by dt = {grid.dt:g} fs (need t0 > 4 dt)."
        )
    u = grid.t / t0
    functions = hermite_functions(start_order + n_modes - 1, u)[start_order:]
    phase = np.exp(0.5j * chirp * u**2)
    return ModeBasis(tuple(
        TemporalMode.normalized(f * phase, grid, label=n)
        for n, f in enumerate(functions)
    ))


def squeezing_db_to_variance(db: float) -> float:
    """Squeezed-quadrature variance for `db` decibels of squeezing: (1/4) 10^(-db/10)."""
    return VACUUM_VARIANCE * 10.0 ** (-db / 10.0)


def anti_squeezing_variance(db: float) -> float:
    """Anti-squeezed partner of a pure state with `db` of squeezing: (1/4) 10^(db/10)."""
    return VACUUM_VARIANCE * 10.0 ** (db / 10.0)


def variance_to_squeezing_db(variance: float | np.ndarray) -> float | np.ndarray:
    """Inverse of squeezing_db_to_variance; anti-squeezed variances give negative dB."""
    return -10.0 * np.log10(np.asarray(variance, dtype=float) / VACUUM_VARIANCE)


def apply_squeezing_angle(state: GaussianStateSpec) -> GaussianStateSpec:
    """
    Fold each mode's squeezing angle into its complex phase.

    Each mode is multiplied by exp(i angle_n) and the angle reset to zero;
    variances are unchanged and the basis stays orthonormal.
    """
    if not np.any(state.angle):
        return state
    basis = ModeBasis(tuple(
        mode.rotated(float(a)) for mode, a in zip(state.basis.modes, state.angle)
    ))
    return replace(state, basis=basis, angle=np.zeros(state.n_modes))
