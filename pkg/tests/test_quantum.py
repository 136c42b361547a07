import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    KETS,
    cascade_coherence_closed_form,
    cascade_negativity_quadrature,
    negativity_by_eigs,
    random_density_matrix,
    werner_negativity,
)
from qdpair.quantum import (
    BASIS_LABELS,
    CascadeModelParams,
    DensityMatrix,
    StateError,
    WaveplateSetting,
    averaged_coherence,
    basis_projection_settings,
    bell_state,
    fidelity_to,
    hwp,
    ideal_cascade_state,
    jitter_averaged_state,
    local_unitary,
    maximally_mixed,
    model_negativity_curve,
    negativity_2n,
    partial_transpose,
    precession_frequency,
    product_ket,
    projector_probability,
    qwp,
    werner_state,
)

seeds = st.integers(0, 2**32 - 1)


def random_unitary(rng):
    z = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / abs(np.diag(r)))


# density matrix validation ----------------------------------------------------

def test_rejects_non_hermitian():
    m = np.eye(4) / 4
    m = m.astype(complex)
    m[0, 1] = 0.1
    with pytest.raises(StateError, match="Hermitian"):
        DensityMatrix(m)


def test_rejects_bad_trace():
    with pytest.raises(StateError, match="trace"):
        DensityMatrix(np.eye(4) / 3)


def test_rejects_negative_eigenvalue():
    with pytest.raises(StateError, match="positive semidefinite"):
        DensityMatrix(np.diag([0.6, 0.5, -0.1, 0.0]))


def test_clamps_roundoff_negative_eigenvalue():
    d = DensityMatrix(np.diag([0.5 + 5e-10, 0.5, -5e-10, 0.0]))
    assert d.eigenvalues().min() >= 0
    assert abs(np.trace(d.matrix) - 1) < 1e-12


def test_rejects_wrong_shape():
    with pytest.raises(StateError):
        DensityMatrix(np.eye(2) / 2)


def test_matrix_is_read_only():
    d = maximally_mixed()
    with pytest.raises(ValueError):
        d.matrix[0, 0] = 1


# negativity -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["phi+", "phi-", "psi+", "psi-"])
def test_bell_states_maximal(kind):
    assert negativity_2n(bell_state(kind)) == pytest.approx(1.0, abs=1e-9)


def test_maximally_mixed_separable():
    assert negativity_2n(maximally_mixed()) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("p", np.linspace(0, 1, 21))
def test_werner_sweep(p):
    assert negativity_2n(werner_state(p)) == pytest.approx(werner_negativity(p), abs=1e-9)


@given(seeds)
def test_product_states_are_separable(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=2) + 1j * rng.normal(size=2)
    b = rng.normal(size=2) + 1j * rng.normal(size=2)
    assert negativity_2n(DensityMatrix.from_ket(np.kron(a, b))) == pytest.approx(0.0, abs=1e-9)


@given(seeds, st.integers(1, 4))
def test_negativity_matches_independent_eigs(seed, rank):
    rho = random_density_matrix(np.random.default_rng(seed), rank)
    n = negativity_2n(DensityMatrix(rho))
    assert 0.0 <= n <= 1.0
    assert n == pytest.approx(negativity_by_eigs(rho), abs=1e-10)


@given(seeds)
def test_negativity_invariant_under_local_unitaries(seed):
    rng = np.random.default_rng(seed)
    rho = random_density_matrix(rng, 2)
    rotated = local_unitary(rho, random_unitary(rng), random_unitary(rng))
    assert negativity_2n(DensityMatrix(rotated)) == pytest.approx(negativity_2n(DensityMatrix(rho)), abs=1e-9)


@given(seeds)
def test_partial_transposes_share_spectrum(seed):
    rho = random_density_matrix(np.random.default_rng(seed))
    a = np.linalg.eigvalsh(partial_transpose(rho, "first"))
    b = np.linalg.eigvalsh(partial_transpose(rho, "second"))
    assert np.allclose(a, b, atol=1e-12)
    assert np.trace(partial_transpose(rho)).real == pytest.approx(1.0)


def test_partial_transpose_bad_subsystem():
    with pytest.raises(ValueError):
        partial_transpose(np.eye(4) / 4, "third")


# fidelity and projections -----------------------------------------------------

def test_fidelity_bell():
    assert fidelity_to(bell_state("phi+"), bell_state("phi+")) == pytest.approx(1.0)
    assert fidelity_to(bell_state("psi-"), bell_state("phi+")) == pytest.approx(0.0, abs=1e-12)
    assert fidelity_to(maximally_mixed(), bell_state("phi+")) == pytest.approx(0.25)


def test_fidelity_rejects_mixed_target():
    with pytest.raises(StateError):
        fidelity_to(bell_state("phi+"), maximally_mixed())


def test_phi_plus_projection_table():
    phi = bell_state("phi+")
    table = {"HH": 0.5, "VV": 0.5, "HV": 0.0, "VH": 0.0, "DD": 0.5, "DA": 0.0, "RL": 0.5, "RR": 0.0, "HD": 0.25}
    for lab, p in table.items():
        assert projector_probability(phi, lab[0], lab[1]) == pytest.approx(p, abs=1e-12)


@given(seeds)
def test_projections_form_complete_measurements(seed):
    rho = random_density_matrix(np.random.default_rng(seed))
    pairs = [("H", "V"), ("D", "A"), ("R", "L")]
    for a, a_ in pairs:
        for b, b_ in pairs:
            total = sum(projector_probability(rho, x, y) for x in (a, a_) for y in (b, b_))
            assert total == pytest.approx(1.0, abs=1e-12)


def test_product_ket_matches_kron():
    for a in BASIS_LABELS:
        for b in BASIS_LABELS:
            assert np.allclose(product_ket(a, b), np.kron(KETS[a], KETS[b]))


# waveplates -------------------------------------------------------------------

def test_waveplates_are_unitary():
    for ang in (0, 10, 22.5, 45, 77):
        for m in (hwp(ang), qwp(ang)):
            assert np.allclose(m.conj().T @ m, np.eye(2), atol=1e-12)


def test_hwp_at_45_swaps_h_and_v():
    out = hwp(45) @ KETS["H"]
    assert abs(out[1]) == pytest.approx(1.0)


def test_hwp_at_22_5_maps_d_to_h():
    assert abs((hwp(22.5) @ KETS["D"])[0]) ** 2 == pytest.approx(1.0)


def test_qwp_at_45_makes_circular():
    out = qwp(45) @ KETS["H"]
    # equal magnitudes and a quarter-wave relative phase
    assert abs(out[0]) == pytest.approx(abs(out[1]))
    assert abs(np.angle(out[1] / out[0])) == pytest.approx(math.pi / 2)


@pytest.mark.parametrize("label", BASIS_LABELS)
def test_basis_settings_route_basis_to_h_port(label):
    s = basis_projection_settings(label)
    assert s.transmission(KETS[label]) == pytest.approx(1.0, abs=1e-12)
    orth = {"H": "V", "V": "H", "D": "A", "A": "D", "R": "L", "L": "R"}[label]
    assert s.transmission(KETS[orth]) == pytest.approx(0.0, abs=1e-12)


def test_known_settings():
    assert basis_projection_settings("H") == WaveplateSetting(0, 0)
    assert basis_projection_settings("V") == WaveplateSetting(45, 0)
    assert basis_projection_settings("D") == WaveplateSetting(22.5, 45)


@given(seeds, st.sampled_from(BASIS_LABELS))
def test_analyzer_transmission_is_projection(seed, label):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=2) + 1j * rng.normal(size=2)
    psi /= np.linalg.norm(psi)
    s = basis_projection_settings(label)
    assert s.transmission(psi) == pytest.approx(abs(np.vdot(KETS[label], psi)) ** 2, abs=1e-12)


def test_setting_angles_normalised():
    s = WaveplateSetting(200, -45)
    assert (s.hwp_angle, s.qwp_angle) == (20.0, 135.0)


# cascade model ----------------------------------------------------------------

def test_precession_half_period():
    # pi hbar / S at 2.54 ueV
    half = math.pi / precession_frequency(2.54)
    assert half == pytest.approx(814.09, abs=0.05)


def test_ideal_state_is_maximally_entangled():
    p = CascadeModelParams()
    for tau in (0, 50, 407, 814):
        assert negativity_2n(ideal_cascade_state(tau, p)) == pytest.approx(1.0, abs=1e-9)


def test_ideal_state_phase_rotates_to_phi_minus():
    p = CascadeModelParams()
    half = math.pi / p.omega
    assert fidelity_to(ideal_cascade_state(half, p), bell_state("phi-")) == pytest.approx(1.0, abs=1e-9)


def test_zero_jitter_curve_is_one():
    p = CascadeModelParams(jitter_fwhm_2ph=0.0)
    for _, v in model_negativity_curve(p, np.linspace(0, 810, 82)):
        assert v == pytest.approx(1.0, abs=1e-9)


def test_zero_fss_curve_is_one():
    p = CascadeModelParams(fss_energy=0.0)
    for _, v in model_negativity_curve(p, np.linspace(-100, 800, 46)):
        assert v == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("tau", [-150.0, -20.0, 0.0, 30.0, 162.0, 486.0, 810.0])
def test_coherence_matches_closed_form(tau):
    p = CascadeModelParams()
    c = averaged_coherence(tau, p)
    ref = cascade_coherence_closed_form(tau, p.fss_energy, p.t1_x, p.jitter_fwhm_2ph)
    assert abs(c - ref) < 1e-8


@pytest.mark.parametrize("tau", [0.0, 40.0, 162.0, 400.0])
def test_curve_matches_quadrature_oracle(tau):
    p = CascadeModelParams()
    (_, v), = model_negativity_curve(p, [tau])
    assert v == pytest.approx(cascade_negativity_quadrature(tau, 2.54, 162.0, 50.0), abs=1e-6)


def test_frozen_curve_values():
    # values from the closed-form oracle at the reference parameters
    p = CascadeModelParams()
    vals = dict(model_negativity_curve(p, [0.0, 810.0]))
    assert vals[0.0] == pytest.approx(0.998873652, abs=1e-7)
    assert vals[810.0] == pytest.approx(0.996648789, abs=1e-7)


def test_averaged_state_has_cascade_form():
    rho = jitter_averaged_state(100.0, CascadeModelParams()).matrix
    assert rho[0, 0].real == pytest.approx(0.5)
    assert rho[3, 3].real == pytest.approx(0.5)
    assert abs(rho[1, 1]) < 1e-15 and abs(rho[0, 1]) < 1e-15
    assert negativity_2n(rho) == pytest.approx(2 * abs(rho[3, 0]), abs=1e-12)


def test_curve_rejects_descending_grid():
    with pytest.raises(ValueError):
        model_negativity_curve(CascadeModelParams(), [10.0, 0.0])


def test_basis_rotation_keeps_negativity():
    p = CascadeModelParams(basis_rotation=30.0)
    q = CascadeModelParams()
    assert negativity_2n(jitter_averaged_state(200, p)) == pytest.approx(negativity_2n(jitter_averaged_state(200, q)), abs=1e-12)
