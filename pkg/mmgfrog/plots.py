"""Optional SVG rendering of spectrograms and modes (matplotlib, Agg backend)."""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mmgfrog"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .forward import Spectrogram  # noqa: E402
from .states import ModeBasis  # noqa: E402

logger = logging.getLogger(__name__)


def render_spectrogram_svg(spec: Spectrogram, path: str | Path, title: str | None = None) -> Path:
    """
    Heatmap of a spectrogram over (tau, w).

    Vacuum-subtracted maps use a diverging colormap centered on zero so
    negative (squeezed) regions stand out.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tau = spec.delay_grid.tau
    w = spec.freq_grid.w
    values = spec.values

    fig, ax = plt.subplots(figsize=(5, 4))
    if spec.kind == "vacuum_subtracted":
        limit = float(np.max(np.abs(values))) or 1.0
        image = ax.pcolormesh(tau, w, values, cmap="RdBu_r", vmin=-limit, vmax=limit, shading="nearest")
    else:
        image = ax.pcolormesh(tau, w, values, cmap="viridis", shading="nearest")
    fig.colorbar(image, ax=ax)
    ax.set_xlabel("Delay (fs)")
    ax.set_ylabel("Frequency (rad/fs)")
    ax.set_title(title or spec.kind.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_modes_svg(
    basis: ModeBasis,
    path: str | Path,
    intensity_std: np.ndarray | None = None,
    truth: ModeBasis | None = None,
) -> Path:
    """
    One panel per mode: |psi|^2 (with an optional one-sigma band) and phase.

    Args:
        basis: Modes to draw
        path: Output SVG path
        intensity_std: Optional (M, n_t) standard deviation of |psi|^2
        truth: Optional true modes drawn as dashed lines
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t = basis.grid.t
    m = len(basis)

    fig, axes = plt.subplots(1, m, figsize=(3 * m, 3), squeeze=False)
    for n, (ax, mode) in enumerate(zip(axes[0], basis.modes)):
        intensity = np.abs(mode.samples) ** 2
        ax.plot(t, intensity, color="C0")
        if intensity_std is not None:
            ax.fill_between(t, intensity - intensity_std[n], intensity + intensity_std[n], color="C0", alpha=0.3)
        if truth is not None and n < len(truth):
            ax.plot(t, np.abs(truth.modes[n].samples) ** 2, "k--", linewidth=0.8)
        phase_ax = ax.twinx()
        support = intensity > 1e-3 * intensity.max()
        phase_ax.plot(t[support], np.unwrap(np.angle(mode.samples[support])), color="C1", linewidth=0.8)
        ax.set_xlabel("Time (fs)")
        ax.set_title(f"Mode {n}")
    axes[0][0].set_ylabel("|psi|^2 (1/fs)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
