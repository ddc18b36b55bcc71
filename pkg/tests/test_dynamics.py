import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccorbit.dynamics import (B_INPUT, MU_EARTH, ControlType, DiscreteSegment, DomainError, DynamicsModel,
                              ReferenceTrajectory, discretize, discretize_segment, eval_eom,
                              integrate_linearization, propagate, propagate_with_stm)
from ccorbit.uncertainty import GatesParams, acceleration_noise, gates_matrix
from oracles import cwh_expm_stm, cwh_matrix

N_CWH = np.sqrt(MU_EARTH / 7228.0**3)
NRHO_GUESS = np.array([1.0300, 0.0, -0.1871, 0.0, -0.1200, 0.0])


def test_cwh_origin_is_equilibrium():
    m = DynamicsModel.cwh(N_CWH)
    assert np.all(eval_eom(m, np.zeros(6), np.zeros(3)) == 0.0)


def test_cr3bp_x_axis_symmetry():
    m = DynamicsModel.cr3bp()
    f = eval_eom(m, np.array([0.8, 0, 0, 0, 0, 0]), np.zeros(3))
    assert f[4] == 0.0 and f[5] == 0.0


def test_cwh_mean_motion_and_matrix_entry():
    m = DynamicsModel.cwh_from_radius(7228.0)
    assert m.n == pytest.approx(1.0274e-3, rel=1e-4)
    assert m.jacobian(np.zeros(6))[3, 0] == pytest.approx(3 * m.n**2, rel=1e-14)
    assert 3 * m.n**2 == pytest.approx(3.167e-6, rel=1e-3)


def test_jacobian_matches_finite_differences():
    m = DynamicsModel.cr3bp()
    x = np.array([1.02, 0.01, -0.18, 0.002, -0.11, 0.003])
    J = m.jacobian(x)
    h = 1e-6
    fd = np.column_stack([(m.f0(x + h * e) - m.f0(x - h * e)) / (2 * h) for e in np.eye(6)])
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-7)


def test_singularity_raises():
    m = DynamicsModel.two_body()
    with pytest.raises(DomainError):
        eval_eom(m, np.zeros(6), np.zeros(3))


def test_stm_identity_at_zero_duration():
    m = DynamicsModel.cr3bp()
    x1, Phi = propagate_with_stm(m, NRHO_GUESS, 0.3, 0.3)
    assert np.array_equal(x1, NRHO_GUESS)
    assert np.array_equal(Phi, np.eye(6))


@given(st.floats(1.0, 3000.0))
def test_cwh_stm_matches_matrix_exponential(dt):
    m = DynamicsModel.cwh(N_CWH)
    _, Phi = propagate_with_stm(m, np.array([1.0, 0.2, -0.1, 1e-3, 0.0, 2e-3]), 0.0, dt)
    ref = cwh_expm_stm(N_CWH, dt)
    assert np.linalg.norm(Phi - ref) / np.linalg.norm(ref) < 1e-10


def test_cr3bp_semigroup():
    m = DynamicsModel.cr3bp()
    x1, P10 = propagate_with_stm(m, NRHO_GUESS, 0.0, 0.4)
    _, P21 = propagate_with_stm(m, x1, 0.4, 0.9)
    _, P20 = propagate_with_stm(m, NRHO_GUESS, 0.0, 0.9)
    assert np.linalg.norm(P21 @ P10 - P20) / np.linalg.norm(P20) < 1e-9


def test_impulsive_segment_input_matrix():
    m = DynamicsModel.cwh(N_CWH)
    ref = ReferenceTrajectory.propagate(m, np.zeros(6), np.array([0.0, 30.0]))
    seg = discretize_segment(m, ref, 0)
    assert np.allclose(seg.B, cwh_expm_stm(N_CWH, 30.0) @ B_INPUT, rtol=0, atol=1e-10)
    assert np.all(seg.G == 0.0)
    assert np.all(seg.G_exe == 0.0)


def test_scalar_noise_gram_matches_closed_form():
    a, dt = -0.7, 1.3
    arc = integrate_linearization(lambda x, t: a * x, lambda x, t: np.array([[a]]), np.array([0.5]),
                                  0.0, dt, G=np.array([[1.0]]), rtol=1e-12, atol=1e-14)
    expected = np.exp(2 * a * dt) * (1 - np.exp(-2 * a * dt)) / (2 * a)
    assert arc.Q[0, 0] == pytest.approx(expected, rel=1e-9)
    assert arc.Phi[0, 0] == pytest.approx(np.exp(a * dt), rel=1e-10)


def test_cwh_noise_gram_matches_quadrature():
    from scipy.integrate import quad_vec
    from scipy.linalg import expm
    m = DynamicsModel.cwh(N_CWH)
    G = acceleration_noise(1e-3)
    ref = ReferenceTrajectory.propagate(m, np.zeros(6), np.array([0.0, 60.0]))
    seg = discretize_segment(m, ref, 0, noise=G)
    A = cwh_matrix(N_CWH)
    Q, _ = quad_vec(lambda s: expm(A * (60.0 - s)) @ G @ G.T @ expm(A * (60.0 - s)).T, 0.0, 60.0,
                    epsabs=1e-16, epsrel=1e-12)
    assert np.allclose(seg.G @ seg.G.T, Q, rtol=1e-8, atol=1e-16)


def test_execution_noise_only_at_maneuver_nodes():
    m = DynamicsModel.cwh(N_CWH)
    ref = ReferenceTrajectory.propagate(m, np.zeros(6), np.array([0.0, 30.0, 60.0]))
    gates = GatesParams(0.01, 0.0, 0.0, 0.0)
    segs = discretize(m, ref, gates=gates, maneuver_mask=[True, False])
    assert np.allclose(segs[0].G_exe, segs[0].B @ gates_matrix(np.zeros(3), gates))
    assert np.all(segs[1].G_exe == 0.0)


def test_zoh_segment_matches_augmented_exponential():
    from scipy.linalg import expm
    m = DynamicsModel.cwh(N_CWH, control_type=ControlType.ZOH)
    ref = ReferenceTrajectory.propagate(m, np.zeros(6), np.array([0.0, 50.0]))
    seg = discretize_segment(m, ref, 0)
    M = np.zeros((9, 9))
    M[:6, :6] = cwh_matrix(N_CWH)
    M[:6, 6:] = B_INPUT
    E = expm(M * 50.0)
    assert np.allclose(seg.B, E[:6, 6:], rtol=1e-9, atol=1e-12)


def test_reference_rejects_bad_epochs():
    with pytest.raises(ValueError):
        ReferenceTrajectory(np.array([0.0, 0.0]), np.zeros((2, 6)), None)


@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1e-3, 1e-3))
def test_cwh_propagation_is_linear(x0, y0, vx0):
    m = DynamicsModel.cwh(N_CWH)
    x = np.array([x0, y0, 0.0, vx0, 0.0, 0.0])
    x1 = propagate(m, x, 0.0, 100.0)
    assert np.allclose(x1, cwh_expm_stm(N_CWH, 100.0) @ x, rtol=1e-9, atol=1e-11)


def test_segment_is_dataclass_with_execution_removal():
    seg = DiscreteSegment(np.eye(6), B_INPUT, np.zeros(6), np.zeros((6, 3)), np.ones((6, 3)), 1.0)
    assert np.all(seg.without_execution_noise().G_exe == 0)
