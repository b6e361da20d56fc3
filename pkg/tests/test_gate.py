"""Tests for the gate pulse and its squeezing functions."""

import math

import numpy as np
import pytest

from mmgfrog.errors import GateError, GridError, GridMismatchError, LowGainWarning
from mmgfrog.gate import GatePulse, chirped_gaussian_gate, fwhm_of, gain_db_to_r, gate_functions
from mmgfrog.grid import DelayGrid, TimeGrid


@pytest.fixture
def grid():
    return TimeGrid(n_t=1024, dt=1.0)


@pytest.fixture
def gate(grid):
    """A chirped 100 fs gate with 50 dB peak gain."""
    return chirped_gaussian_gate(fwhm=100.0, chirp=0.5, peak_gain_db=50.0, w_s=0.0, grid=grid)


def test_gain_db_to_r():
    """Test exp(2 r) = 10^(dB / 10)."""
    r = gain_db_to_r(50.0)
    assert math.exp(2 * r) == pytest.approx(1e5)
    assert r == pytest.approx(5.7565, abs=1e-4)


def test_peak_gain(gate):
    """Test that the gate reaches the requested peak gain."""
    functions = gate_functions(gate)
    assert gate.peak_r == pytest.approx(gain_db_to_r(50.0))
    assert np.max(functions.power_gain) == pytest.approx(1e5)


def test_gate_intensity_fwhm(gate, grid):
    """Test that |E_g|^2 has the requested FWHM and r = |xi| is sqrt(2) wider."""
    assert fwhm_of(np.abs(gate.envelope) ** 2, grid) == pytest.approx(100.0, abs=0.5)
    assert fwhm_of(gate_functions(gate).r, grid) == pytest.approx(100.0 * np.sqrt(2.0), abs=0.5)


def test_gate_functions_relations(gate, grid):
    """Test G = exp(-i dphi + r) with dphi = theta / 2 - w_s t."""
    f = gate_functions(gate)
    assert np.allclose(np.abs(f.g) ** 2, np.exp(2 * f.r))
    assert np.allclose(f.delta_phi, f.theta / 2)
    assert np.max(np.abs(np.diff(f.theta))) < np.pi


def test_delta_phi_includes_carrier(grid):
    """Test the -w_s t term of dphi."""
    gate = chirped_gaussian_gate(fwhm=100.0, chirp=0.0, peak_gain_db=30.0, w_s=0.2, grid=grid)
    f = gate_functions(gate)
    assert np.allclose(f.delta_phi, -0.2 * grid.t)


def test_shifted_is_exact_roll(gate):
    """Test that delayed gates are rolled by whole samples."""
    f = gate_functions(gate)
    g, dphi = f.shifted(8.0)
    assert np.allclose(g, np.roll(f.g, 8))
    assert np.allclose(dphi, np.roll(f.delta_phi, 8))


def test_delay_stack_shape(gate):
    """Test that the delay stack has one row per delay."""
    g, dphi = gate_functions(gate).delay_stack(DelayGrid(n_tau=8, dtau=4.0))
    assert g.shape == (8, 1024)
    assert dphi.shape == (8, 1024)


def test_gain_must_be_positive(grid):
    """Test that a non-positive peak gain is rejected."""
    with pytest.raises(GateError):
        chirped_gaussian_gate(fwhm=100.0, chirp=0.0, peak_gain_db=0.0, w_s=0.0, grid=grid)


def test_unresolved_gate(grid):
    """Test that a gate shorter than two samples is rejected."""
    with pytest.raises(GateError):
        chirped_gaussian_gate(fwhm=1.5, chirp=0.0, peak_gain_db=20.0, w_s=0.0, grid=grid)


def test_window_too_short():
    """Test that the window must cover six gate durations."""
    with pytest.raises(GridError):
        chirped_gaussian_gate(fwhm=20.0, chirp=0.0, peak_gain_db=20.0, w_s=0.0, grid=TimeGrid(n_t=64, dt=1.0))


def test_low_gain_warns(grid):
    """Test that r_peak <= 1 is reported."""
    with pytest.warns(LowGainWarning):
        GatePulse(envelope=np.exp(-(grid.t / 50.0) ** 2), kappa=0.5, w_s=0.0, grid=grid)


def test_non_finite_gate(grid):
    """Test that a non-finite envelope is rejected."""
    envelope = np.full(grid.n_t, 2.0)
    envelope[3] = np.nan
    with pytest.raises(GateError):
        GatePulse(envelope=envelope, kappa=1.0, w_s=0.0, grid=grid)


def test_envelope_length_mismatch(grid):
    """Test that the envelope must match the grid."""
    with pytest.raises(GridMismatchError):
        GatePulse(envelope=np.ones(10), kappa=2.0, w_s=0.0, grid=grid)
