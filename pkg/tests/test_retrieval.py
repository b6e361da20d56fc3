"""Tests for the multimode retrieval engine and its analysis helpers."""

from pathlib import Path

import numpy as np
import pytest

from mmgfrog.config import load_run_config
from mmgfrog.errors import ConfigError, ReseedWarning, SpectrogramFormatError, UndefinedLossError
from mmgfrog.forward import (
    Spectrogram,
    TermFields,
    from_spectrogram_layout,
    synthesize_spectrogram,
    vacuum_level,
    vacuum_spectrogram,
    vacuum_subtract,
)
from mmgfrog.gate import chirped_gaussian_gate, gate_functions
from mmgfrog.grid import DelayGrid, TimeGrid
from mmgfrog.noise import build_mask
from mmgfrog.retrieval import (
    CandidateState,
    DelayedGate,
    RetrievalConfig,
    RetrievalEngine,
    RetrievalResult,
    canonical_form,
    compare_to_truth,
    covariance_matrices,
    data_projection,
    extract_squeezing_angles,
    gram_schmidt,
    initialize,
    loss,
    match_modes,
    mode_fidelity,
    mode_gradient,
    mode_objective,
    model_term_fields,
    orthonormalize,
    retrieve,
)
from mmgfrog.states import GaussianStateSpec, ModeBasis, hermite_gaussian_basis

CONFIG_DIR = Path(__file__).resolve().parent.parent / "sample_configs"


@pytest.fixture
def grid():
    return TimeGrid(n_t=256, dt=1.0)


@pytest.fixture
def delays():
    return DelayGrid(n_tau=16, dtau=2.0)


@pytest.fixture
def gate(grid):
    return gate_functions(chirped_gaussian_gate(fwhm=20.0, chirp=0.5, peak_gain_db=20.0, w_s=0.0, grid=grid))


@pytest.fixture
def truth(grid):
    """Two-mode squeezed state."""
    basis = hermite_gaussian_basis(2, t0=8.0, chirp=1.0, grid=grid)
    return GaussianStateSpec(basis, var_x=[0.125, 0.1], var_p=[0.6, 0.9])


@pytest.fixture
def measured(truth, gate, delays):
    return synthesize_spectrogram(truth, gate, delays)


def _result(basis: ModeBasis, var_x, var_p) -> RetrievalResult:
    return RetrievalResult(
        basis=basis,
        var_x=np.asarray(var_x, dtype=float),
        var_p=np.asarray(var_p, dtype=float),
        angles=np.zeros(len(basis)),
        loss_trace=np.array([0.05]),
        final_loss=0.05,
        converged=True,
        iterations_run=1,
        synthesized=None,
        config=RetrievalConfig(n_modes=len(basis)),
    )


def test_mode_gradient_matches_finite_differences():
    """Test dZ/dRe = 2 Re g and dZ/dIm = 2 Im g against central differences."""
    grid = TimeGrid(n_t=64, dt=1.0)
    delays = DelayGrid(n_tau=8, dtau=2.0)
    gate = DelayedGate.build(
        gate_functions(chirped_gaussian_gate(fwhm=8.0, chirp=0.5, peak_gain_db=10.0, w_s=0.0, grid=grid)),
        delays,
    )
    rng = np.random.default_rng(11)
    shape = (2, delays.n_tau, grid.n_t)
    candidate = CandidateState(
        modes=0.2 * (rng.standard_normal((2, grid.n_t)) + 1j * rng.standard_normal((2, grid.n_t))),
        var_x=np.array([0.1, 0.6]),
        var_p=np.array([0.7, 0.2]),
        seed_orders=[0, 1],
        next_order=2,
        t0=5.0,
    )
    projected = TermFields(
        x=rng.standard_normal(shape) + 1j * rng.standard_normal(shape),
        p=rng.standard_normal(shape) + 1j * rng.standard_normal(shape),
        c1=None,
        c2=None,
        background=np.zeros(shape[1:]),
        time_grid=grid,
        delay_grid=delays,
    )
    weights = rng.uniform(0.5, 2.0, shape[1:])

    gradient = mode_gradient(candidate, projected, gate, weights)
    scale = float(np.max(np.abs(gradient)))
    eps = 1e-5
    for n, k in [(0, 3), (0, 31), (1, 17), (1, 40), (1, 63)]:
        for direction, part in ((1.0, np.real), (1j, np.imag)):
            plus = candidate.modes.copy()
            minus = candidate.modes.copy()
            plus[n, k] += eps * direction
            minus[n, k] -= eps * direction
            z_plus = mode_objective(candidate.copy(modes=plus), projected, gate, weights)
            z_minus = mode_objective(candidate.copy(modes=minus), projected, gate, weights)
            numeric = (z_plus - z_minus) / (2 * eps)
            assert abs(numeric - 2 * part(gradient[n, k])) <= 1e-6 * scale


def test_data_projection_matches_measurement(truth, gate, delays, measured, grid):
    """Test that projected fields reproduce the measured intensity exactly."""
    other = hermite_gaussian_basis(2, t0=11.0, chirp=-0.5, grid=grid)
    candidate = CandidateState(
        modes=other.matrix, var_x=np.array([0.2, 0.3]), var_p=np.array([0.4, 0.5]),
        seed_orders=[0, 1], next_order=2, t0=11.0,
    )
    fields = model_term_fields(candidate, DelayedGate.build(gate, delays), vacuum_level(gate))
    vac = vacuum_spectrogram(gate, delays)
    projected = data_projection(fields, candidate.var_x, candidate.var_p, measured, vac)
    target = from_spectrogram_layout(measured.values)
    result = projected.intensity(candidate.var_x, candidate.var_p)
    assert np.max(np.abs(result - target)) <= 1e-10 * measured.peak


def test_data_projection_leaves_masked_pixels(truth, gate, delays, measured, grid):
    """Test that pixels outside the mask keep their model intensity."""
    candidate = CandidateState(
        modes=hermite_gaussian_basis(2, t0=11.0, chirp=0.0, grid=grid).matrix,
        var_x=np.array([0.2, 0.3]), var_p=np.array([0.4, 0.5]),
        seed_orders=[0, 1], next_order=2, t0=11.0,
    )
    fields = model_term_fields(candidate, DelayedGate.build(gate, delays), vacuum_level(gate))
    mask = np.zeros(measured.values.shape, dtype=bool)
    mask[:, :4] = True
    projected = data_projection(fields, candidate.var_x, candidate.var_p, measured, vacuum_spectrogram(gate, delays), mask)
    before = fields.intensity(candidate.var_x, candidate.var_p)
    after = projected.intensity(candidate.var_x, candidate.var_p)
    outside = from_spectrogram_layout(~mask)
    assert np.allclose(after[outside], before[outside])


def test_gram_schmidt_orthonormality():
    """Test that random vectors come out orthonormal to 1e-10."""
    grid = TimeGrid(n_t=64, dt=0.5)
    rng = np.random.default_rng(5)
    vectors = rng.standard_normal((5, 64)) + 1j * rng.standard_normal((5, 64))
    out, dependent = gram_schmidt(vectors, grid, list(range(5)))
    assert dependent == []
    gram = out @ out.conj().T * grid.dt
    assert np.max(np.abs(gram - np.eye(5))) <= 1e-10


def test_gram_schmidt_reports_dependent_rows():
    """Test that a repeated vector is flagged."""
    grid = TimeGrid(n_t=64, dt=1.0)
    rng = np.random.default_rng(6)
    v = rng.standard_normal(64) + 0j
    _, dependent = gram_schmidt(np.stack([v, 2 * v]), grid, [0, 1])
    assert dependent == [1]


def test_orthonormalize_reseeds_dependent_mode(grid):
    """Test that a duplicated mode is replaced by the next Hermite-Gaussian order."""
    mode = hermite_gaussian_basis(1, t0=10.0, chirp=0.0, grid=grid).matrix[0]
    candidate = CandidateState(
        modes=np.stack([mode, mode]), var_x=np.full(2, 0.25), var_p=np.full(2, 0.25),
        seed_orders=[0, 1], next_order=2, t0=10.0,
    )
    with pytest.warns(ReseedWarning):
        out = orthonormalize(candidate, grid)
    assert out.seed_orders == [0, 2]
    assert out.next_order == 3
    assert out.reseeds == 1
    gram = out.modes @ out.modes.conj().T * grid.dt
    assert np.max(np.abs(gram - np.eye(2))) <= 1e-10


def test_orthonormalize_keeps_strongest_mode(grid):
    """Test that the mode farthest from vacuum keeps its direction."""
    basis = hermite_gaussian_basis(2, t0=10.0, chirp=0.0, grid=grid).matrix
    weak = basis[0] + 0.5 * basis[1]
    strong = basis[1]
    candidate = CandidateState(
        modes=np.stack([weak, strong]), var_x=np.array([0.24, 0.1]), var_p=np.array([0.27, 1.0]),
        seed_orders=[0, 1], next_order=2, t0=10.0,
    )
    out = orthonormalize(candidate, grid)
    assert np.allclose(out.modes[1], strong)
    assert np.allclose(out.modes[0], basis[0])


def test_canonical_form():
    """Test that var_x > var_p modes are rotated by pi/2 and swapped."""
    modes = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex)
    out, var_x, var_p = canonical_form(modes, np.array([0.1, 0.9]), np.array([0.5, 0.2]))
    assert var_x.tolist() == [0.1, 0.2]
    assert var_p.tolist() == [0.5, 0.9]
    assert out[0, 0] == 1.0
    assert out[1, 1] == 1j


def test_match_modes_recovers_permutation_and_phase(grid):
    """Test greedy matching of a permuted, rotated basis."""
    truth = hermite_gaussian_basis(3, t0=10.0, chirp=0.5, grid=grid)
    m = truth.matrix
    recovered = ModeBasis.from_array(
        np.stack([m[2] * np.exp(0.3j), m[0] * np.exp(1.0j), m[1] * np.exp(-0.5j)]), grid
    )
    match = match_modes(truth, recovered)
    assert match.permutation == [1, 2, 0]
    assert np.allclose(match.fidelities, 1.0)
    assert np.allclose(match.phases, [1.0, -0.5, 0.3])


def test_match_modes_leaves_extra_modes_unmatched(grid):
    """Test matching when more modes were recovered than the truth has."""
    basis = hermite_gaussian_basis(3, t0=10.0, chirp=0.5, grid=grid)
    truth = ModeBasis.from_array(basis.matrix[[0, 2]], grid)
    recovered = ModeBasis.from_array(basis.matrix[[2, 1, 0]], grid)
    match = match_modes(truth, recovered)
    assert match.permutation == [2, 0]
    report = compare_to_truth(GaussianStateSpec(truth, var_x=[0.1, 0.2], var_p=[0.7, 0.4]),
                              _result(recovered, [0.2, 0.25, 0.1], [0.4, 0.25, 0.7]))
    assert report["unmatched"] == [1]
    assert np.allclose(report["var_x_rel_error"], 0.0)
    with pytest.raises(ValueError):
        match_modes(recovered, truth)


def test_mode_fidelity(grid):
    """Test fidelity of identical and orthogonal modes."""
    basis = hermite_gaussian_basis(2, t0=10.0, chirp=0.0, grid=grid)
    assert mode_fidelity(basis.modes[0], basis.modes[0]) == pytest.approx(1.0)
    assert mode_fidelity(basis.modes[0], basis.modes[1]) == pytest.approx(0.0, abs=1e-12)


def test_compare_to_truth(truth, grid):
    """Test fidelities and variance errors against a known state."""
    result = _result(truth.basis, [0.125, 0.11], [0.6, 0.9])
    report = compare_to_truth(truth, result)
    assert report["permutation"] == [0, 1]
    assert np.allclose(report["fidelities"], 1.0)
    assert report["var_x_rel_error"][0] == pytest.approx(0.0)
    assert report["var_x_rel_error"][1] == pytest.approx(0.1)


def test_squeezing_angles_against_reference(grid):
    """Test that angles are recovered modulo pi against the unrotated modes."""
    reference = hermite_gaussian_basis(2, t0=10.0, chirp=1.0, grid=grid)
    rotated = ModeBasis.from_array(
        reference.matrix * np.exp(1j * np.array([[np.pi / 4], [np.pi / 2 + np.pi]])), grid
    )
    angles = extract_squeezing_angles(_result(rotated, [0.1, 0.1], [0.7, 0.7]), reference)
    assert angles.angles[0] == pytest.approx(np.pi / 4)
    assert angles.angles[1] == pytest.approx(np.pi / 2)
    assert angles.relative[1] == pytest.approx(np.pi / 4)
    assert not angles.gate_referenced


def test_squeezing_angle_zero_phase_convention(grid):
    """Test the centroid-phase convention for a single mode."""
    basis = hermite_gaussian_basis(1, t0=10.0, chirp=0.0, grid=grid)
    rotated = ModeBasis.from_array(basis.matrix * np.exp(0.7j), grid)
    angles = extract_squeezing_angles(_result(rotated, [0.1], [0.7]))
    assert angles.angles[0] == pytest.approx(0.7)
    assert angles.gate_referenced
    assert not angles.ambiguous[0]


def test_relative_angles_ignore_shared_chirp(grid):
    """Test that chirped modes with a common phase have zero relative angle without a reference."""
    basis = hermite_gaussian_basis(4, t0=8.0, chirp=1.0, grid=grid)
    common = ModeBasis.from_array(basis.matrix * np.exp(0.3j), grid)
    angles = extract_squeezing_angles(_result(common, [0.1] * 4, [0.7] * 4))
    assert angles.angles == pytest.approx([0.3] * 4, abs=1e-6)
    relative = np.angle(np.exp(2j * angles.relative)) / 2
    assert np.max(np.abs(relative)) <= 0.05
    assert not np.any(angles.ambiguous)

    shifted = basis.matrix * np.exp(0.3j)
    shifted[2] *= np.exp(0.4j)
    angles = extract_squeezing_angles(_result(ModeBasis.from_array(shifted, grid), [0.1] * 4, [0.7] * 4))
    assert angles.relative[2] == pytest.approx(0.4, abs=1e-6)


def test_covariance_matrices():
    """Test rotation of the diagonal covariance."""
    cov = covariance_matrices(np.array([0.1, 0.1]), np.array([0.9, 0.9]), np.array([0.0, np.pi / 2]))
    assert np.allclose(cov[0], np.diag([0.1, 0.9]))
    assert np.allclose(cov[1], np.diag([0.9, 0.1]))


def test_loss_of_identical_spectrograms(measured):
    """Test that the loss of a map against itself is zero."""
    assert loss(measured, measured) == 0.0
    assert loss(measured, measured.normalized()) == pytest.approx(0.0, abs=1e-14)


def test_masked_loss_of_clean_data(measured, gate, delays):
    """Test the masked loss of clean data against itself."""
    vacsub = vacuum_subtract(measured, vacuum_spectrogram(gate, delays))
    mask = build_mask(vacsub)
    assert loss(vacsub, vacsub, mask=mask) == 0.0


def test_loss_undefined_for_zero_data(grid, delays):
    """Test that an all-zero measurement has no defined loss."""
    zero = Spectrogram(np.zeros((grid.n_t, delays.n_tau)), grid.freq_grid(), delays, kind="vacuum_subtracted")
    with pytest.raises(UndefinedLossError):
        loss(zero, zero)


def test_retrieval_config_validation():
    """Test that invalid settings carry a JSON pointer."""
    with pytest.raises(ConfigError) as excinfo:
        RetrievalConfig(n_modes=0)
    assert excinfo.value.pointer == "/retrieval/n_modes"
    with pytest.raises(ConfigError):
        RetrievalConfig(n_modes=1, step_schedule="adam")


def test_engine_rejects_vacuum_input(gate, delays):
    """Test that a vacuum spectrogram is not retrievable."""
    with pytest.raises(SpectrogramFormatError):
        RetrievalEngine(vacuum_spectrogram(gate, delays), gate, RetrievalConfig(n_modes=1))


def test_pure_vacuum_retrieves_vacuum_variances(gate, delays, grid):
    """Test that a vacuum measurement returns variances of 1/4 and a near-zero loss."""
    basis = hermite_gaussian_basis(2, t0=8.0, chirp=0.0, grid=grid)
    vacuum = GaussianStateSpec(basis, var_x=[0.25, 0.25], var_p=[0.25, 0.25])
    raw = synthesize_spectrogram(vacuum, gate, delays)
    result = retrieve(raw, gate, RetrievalConfig(n_modes=2, max_iters=50))
    assert np.allclose(result.var_x, 0.25, rtol=0.05)
    assert np.allclose(result.var_p, 0.25, rtol=0.05)
    assert result.final_loss <= 1e-6
    assert result.converged


def test_vacuum_subtracted_zeros_are_vacuum(gate, delays, grid):
    """Test that an all-zero vacuum-subtracted map is read as vacuum."""
    zero = Spectrogram(np.zeros((grid.n_t, delays.n_tau)), grid.freq_grid(), delays, kind="vacuum_subtracted")
    engine = RetrievalEngine(zero, gate, RetrievalConfig(n_modes=1))
    assert engine.vacuum_only
    assert engine.current_loss() <= 1e-6


def test_engine_refuses_all_zero_raw_data(gate, delays, grid):
    """Test that a raw map with no intensity at all is refused before iterating."""
    zero = Spectrogram(np.zeros((grid.n_t, delays.n_tau)), grid.freq_grid(), delays, kind="raw")
    with pytest.raises(UndefinedLossError):
        RetrievalEngine(zero, gate, RetrievalConfig(n_modes=1))


def test_initialize_is_seeded(measured, gate):
    """Test that the initial guess depends only on the seed."""
    a = initialize(RetrievalConfig(n_modes=2, seed=1), measured, gate)
    b = initialize(RetrievalConfig(n_modes=2, seed=1), measured, gate)
    c = initialize(RetrievalConfig(n_modes=2, seed=2), measured, gate)
    assert np.array_equal(a.modes, b.modes)
    assert not np.array_equal(a.modes, c.modes)
    gram = a.modes @ a.modes.conj().T * gate.grid.dt
    assert np.max(np.abs(gram - np.eye(2))) <= 1e-10


def test_truth_is_a_fixed_point(truth, measured, gate):
    """Test that the true state has zero loss and stays put under iteration."""
    engine = RetrievalEngine(measured, gate, RetrievalConfig(n_modes=2, max_iters=5))
    engine.candidate = CandidateState(
        modes=truth.basis.matrix.copy(),
        var_x=np.array(truth.var_x),
        var_p=np.array(truth.var_p),
        seed_orders=[0, 1],
        next_order=2,
        t0=8.0,
    )
    assert engine.current_loss() < 1e-8
    for _ in range(3):
        engine.step()
    assert engine.current_loss() < 1e-6
    assert np.allclose(engine.candidate.var_x, truth.var_x, rtol=1e-6)


def test_retrieve_is_deterministic(measured, gate):
    """Test that the same seed gives bit-identical retrievals."""
    config = RetrievalConfig(n_modes=2, max_iters=10, seed=3)
    a = retrieve(measured, gate, config)
    b = retrieve(measured, gate, config)
    assert np.array_equal(a.loss_trace, b.loss_trace)
    assert np.array_equal(a.basis.matrix, b.basis.matrix)
    assert np.array_equal(a.var_x, b.var_x)


def test_retrieve_result_shape(measured, gate, delays):
    """Test the packaged result of a short run."""
    config = RetrievalConfig(n_modes=2, max_iters=10)
    result = retrieve(measured, gate, config)
    assert result.iterations_run == 10
    assert len(result.loss_trace) == 10
    assert np.isfinite(result.final_loss)
    assert result.converged == (result.final_loss <= config.success_loss_threshold)
    assert np.all(result.var_x <= result.var_p)
    assert result.basis.gram_deviation() <= 1e-8
    assert result.synthesized.kind == "vacuum_subtracted"
    assert result.synthesized.values.shape == measured.values.shape
    assert np.all((result.angles >= 0) & (result.angles <= np.pi))


def test_retrieve_accepts_vacuum_subtracted_input(measured, gate, delays):
    """Test that raw and vacuum-subtracted inputs start from the same model."""
    vacsub = vacuum_subtract(measured, vacuum_spectrogram(gate, delays))
    config = RetrievalConfig(n_modes=2, max_iters=3)
    a = retrieve(measured, gate, config)
    b = retrieve(vacsub, gate, config)
    assert np.allclose(a.loss_trace, b.loss_trace, rtol=1e-8)


@pytest.mark.slow
def test_four_mode_round_trip():
    """Test recovery of a four-mode state from a noiseless spectrogram."""
    run = load_run_config(CONFIG_DIR / "roundtrip.json")
    gate = gate_functions(run.gate)
    raw = synthesize_spectrogram(run.state, gate, run.grid.delay_grid)
    vacsub = vacuum_subtract(raw, vacuum_spectrogram(gate, run.grid.delay_grid))
    mask = build_mask(vacsub, run.mask_threshold)
    config = RetrievalConfig(n_modes=4, seed=run.seed, mask=mask)
    result = retrieve(vacsub, gate, config)
    report = compare_to_truth(run.state, result)
    assert result.converged
    assert np.all(report["fidelities"] >= 0.99)
    assert np.all(report["var_x_rel_error"] <= 0.02)
    assert np.all(report["var_p_rel_error"] <= 0.02)


@pytest.mark.slow
@pytest.mark.parametrize("angle", [np.pi / 4, np.pi / 2])
def test_single_mode_angle_recovery(angle):
    """Test that the squeezing angle of one rotated mode is recovered modulo pi."""
    grid = TimeGrid(n_t=1024, dt=2.0)
    delays = DelayGrid(n_tau=128, dtau=4.0)
    gate = gate_functions(chirped_gaussian_gate(fwhm=100.0, chirp=0.5, peak_gain_db=50.0, w_s=0.0, grid=grid))
    reference = hermite_gaussian_basis(1, t0=18.0, chirp=1.0, grid=grid)
    state = GaussianStateSpec(reference, var_x=[0.125], var_p=[0.5], angle=[angle])
    raw = synthesize_spectrogram(state, gate, delays)
    result = retrieve(raw, gate, RetrievalConfig(n_modes=1, seed=5))
    recovered = extract_squeezing_angles(result, reference).angles[0]
    error = np.angle(np.exp(2j * (recovered - angle))) / 2
    assert abs(error) <= 0.05


def _acceptance_gate():
    grid = TimeGrid(n_t=1024, dt=2.0)
    delays = DelayGrid(n_tau=128, dtau=4.0)
    gate = gate_functions(chirped_gaussian_gate(fwhm=100.0, chirp=0.5, peak_gain_db=50.0, w_s=0.0, grid=grid))
    return grid, delays, gate


@pytest.mark.slow
def test_single_mode_round_trip():
    """Test that a one-mode state is recovered with fidelity above 0.99."""
    grid, delays, gate = _acceptance_gate()
    state = GaussianStateSpec(hermite_gaussian_basis(1, t0=18.0, chirp=1.0, grid=grid), var_x=[0.125], var_p=[0.5])
    raw = synthesize_spectrogram(state, gate, delays)
    result = retrieve(raw, gate, RetrievalConfig(n_modes=1, seed=2))
    report = compare_to_truth(state, result)
    assert result.converged
    assert report["fidelities"][0] > 0.99
    assert report["var_x_rel_error"][0] <= 0.05
    assert report["var_p_rel_error"][0] <= 0.05


@pytest.mark.slow
def test_zero_relative_angles_without_reference():
    """Test that unrotated chirped modes come back with relative angles of zero."""
    run = load_run_config(CONFIG_DIR / "noise.json")
    gate = gate_functions(run.gate)
    raw = synthesize_spectrogram(run.state, gate, run.grid.delay_grid)
    result = retrieve(raw, gate, RetrievalConfig(n_modes=run.state.n_modes, seed=run.seed))
    assert result.converged
    relative = extract_squeezing_angles(result).relative
    assert np.max(np.abs(np.angle(np.exp(2j * relative)) / 2)) <= 0.05


@pytest.mark.slow
def test_extra_modes_settle_at_vacuum():
    """Test that modes retrieved beyond the true count end up with vacuum variances."""
    grid, delays, gate = _acceptance_gate()
    state = GaussianStateSpec(
        hermite_gaussian_basis(2, t0=18.0, chirp=1.0, grid=grid), var_x=[0.125, 0.1], var_p=[0.5, 0.8]
    )
    raw = synthesize_spectrogram(state, gate, delays)
    result = retrieve(raw, gate, RetrievalConfig(n_modes=3, seed=3))
    report = compare_to_truth(state, result)
    assert np.all(report["fidelities"] >= 0.95)
    (extra,) = report["unmatched"]
    assert result.var_x[extra] == pytest.approx(0.25, rel=0.1)
    assert result.var_p[extra] == pytest.approx(0.25, rel=0.1)
