import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ccorbit._linalg import NumericalError, psd_factor
from ccorbit.uncertainty import (GatesParams, InitialUncertainty, full_state_observation, gates_envelope,
                                 gates_frame, gates_matrix, innovation_covariance, linearize_observation,
                                 range_bearing_observation)

vec3 = arrays(float, 3, elements=st.floats(-10, 10))
sigmas = st.tuples(*[st.floats(0.0, 0.1)] * 4)


def test_gates_zero_burn():
    G = gates_matrix(np.zeros(3), GatesParams(sigma1=0.01))
    assert np.allclose(G, np.diag([0.0, 0.0, 0.01]), atol=0)


def test_gates_frame_axis_aligned():
    T = gates_frame(np.array([1.0, 0.0, 0.0]))
    assert np.allclose(T[:, 2], [1, 0, 0])
    assert np.allclose(T[:, 1], [0, 1, 0])
    assert np.allclose(T[:, 0], [0, 0, -1])


@given(vec3)
def test_gates_frame_is_rotation(u):
    T = gates_frame(u)
    assert np.allclose(T.T @ T, np.eye(3), atol=1e-12)
    assert np.linalg.det(T) == pytest.approx(1.0, abs=1e-12)


def test_gates_sampled_covariance():
    p = GatesParams(0.01, 0.02, 0.005, 0.03)
    u = np.array([0.3, -1.2, 0.5])
    G = gates_matrix(u, p)
    w = np.random.default_rng(7).standard_normal((1_000_000, 3))
    S = np.cov(w @ G.T, rowvar=False)
    mag2 = u @ u
    T = gates_frame(u)
    ref = T @ np.diag([p.sigma3**2 + p.sigma4**2 * mag2] * 2 + [p.sigma1**2 + p.sigma2**2 * mag2]) @ T.T
    assert np.all(np.abs(S - ref) <= 0.01 * np.abs(ref).max())


@given(vec3, sigmas)
def test_gates_envelope_bounds_gates_covariance(u, s):
    p = GatesParams(*s)
    G = gates_matrix(u, p)
    E = gates_envelope(np.linalg.norm(u), p)
    gap = E @ E.T - G @ G.T
    assert np.linalg.eigvalsh(gap)[0] >= -1e-12 * max(1.0, np.trace(E @ E.T))


def test_full_state_observation_linearization():
    lin = linearize_observation(full_state_observation(1e-3, 1e-5), np.arange(6.0))
    assert np.array_equal(lin.C, np.eye(6))
    assert np.all(lin.c_obs == 0)


def test_affine_observation_is_exact():
    from ccorbit.uncertainty import ObservationModel
    M = np.arange(12.0).reshape(2, 6)
    m = ObservationModel(lambda x: M @ x + 1.0, lambda x: np.eye(2), 2)
    x0 = np.linspace(-1, 1, 6)
    lin = linearize_observation(m, x0)
    x = x0 + 0.3
    assert np.allclose(lin.C @ x + lin.c_obs, M @ x + 1.0, atol=1e-8)


def test_range_bearing_jacobian_against_central_difference():
    from ccorbit.uncertainty import ObservationModel
    m = range_bearing_observation(1e-3, 1e-4)
    x = np.array([7000.0, 1200.0, -300.0, 1.0, 7.0, 0.1])
    analytic = linearize_observation(m, x).C
    fd = linearize_observation(ObservationModel(m.f_obs, m.G_obs, 3), x).C
    assert np.allclose(analytic, fd, rtol=1e-6, atol=1e-12)


def test_innovation_covariance_limits():
    D = np.diag([1.0, 2.0])
    assert np.allclose(innovation_covariance(np.zeros((2, 2)), D, np.eye(2)), D @ D.T)
    assert np.allclose(innovation_covariance(np.eye(2), np.eye(2), np.eye(2)), 2 * np.eye(2))


def test_innovation_covariance_cwh_values():
    sr, sv = 1e-3, 1e-5  # km, km/s
    D = np.diag([sr] * 3 + [sv] * 3)
    P0 = np.diag([0.1**2] * 3 + [1e-3**2] * 3)
    S = innovation_covariance(np.eye(6), D, P0)
    assert np.allclose(S, np.diag([0.1**2 + sr**2] * 3 + [1e-6 + sv**2] * 3), rtol=1e-15)


def test_singular_innovation_raises():
    with pytest.raises(NumericalError):
        innovation_covariance(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))


def test_initial_uncertainty_validation():
    with pytest.raises(ValueError):
        InitialUncertainty(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(ValueError):
        InitialUncertainty(np.zeros(2), -np.eye(2), np.eye(2))


@given(arrays(float, (4, 4), elements=st.floats(-3, 3)))
def test_psd_factor_reproduces_gram(M):
    P = M @ M.T
    F = psd_factor(P)
    assert np.allclose(F @ F.T, P, atol=1e-10 * max(1.0, np.abs(P).max()))
