import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccorbit.blockstats import (Policy, assemble_block_operators, dispersion_covariance, open_loop_dispersion,
                                sqrt_covariances, state_mean)
from ccorbit.dynamics import DiscreteSegment
from ccorbit.navigation import build_filter_schedule
from ccorbit.uncertainty import InitialUncertainty, LinearObservation
from oracles import brute_force_closed_loop, random_linear_system


def _system(seed, n_x=3, n_u=2, n_y=2, N=4):
    r = np.random.default_rng(seed)
    segs, obs, init = random_linear_system(r, n_x, n_u, n_y, N)
    sch = build_filter_schedule(segs, obs, init)
    return r, segs, obs, init, sch, assemble_block_operators(segs, sch, init.P_hat0)


def _policy(r, N, n_u, n_x, scale=0.3):
    return Policy(r.standard_normal((N, n_u)), scale * r.standard_normal((N, n_u, n_x)), np.ones(N, bool))


def test_scalar_single_step_structure():
    a, b, c = 2.0, 3.0, 0.5
    seg = DiscreteSegment(np.array([[a]]), np.array([[b]]), np.array([c]), np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    obs = [LinearObservation(np.eye(1), np.eye(1), np.zeros(1))] * 2
    init = InitialUncertainty(np.zeros(1), np.eye(1), np.eye(1))
    sch = build_filter_schedule([seg], obs, init)
    bo = assemble_block_operators([seg], sch, init.P_hat0)
    assert np.allclose(bo.A, [[1.0], [a]])
    assert np.allclose(bo.B, [[0.0], [b]])
    assert np.allclose(bo.C, [0.0, c])
    l0, l1 = sch.L[0, 0, 0], sch.L[1, 0, 0]
    assert np.allclose(bo.L, [[l0, 0.0], [a * l0, l1]])
    assert np.allclose(bo.L_Z, [[0.0, 0.0], [0.0, l1]])


def test_extractors_recover_blocks(rng):
    *_, bo = _system(1)
    X = rng.standard_normal((bo.N + 1) * bo.n_x)
    for k in range(bo.N + 1):
        assert np.array_equal(bo.x_block(X, k), X[k * bo.n_x:(k + 1) * bo.n_x])


def test_stacked_estimate_matches_recursion():
    r, segs, obs, init, sch, bo = _system(2)
    U = r.standard_normal((bo.N, bo.n_u))
    Y = r.standard_normal((bo.N + 1, bo.n_y))  # innovations
    xh = init.mean + sch.L[0] @ Y[0]
    out = [xh]
    for k in range(bo.N):
        s = segs[k]
        xh = s.A @ xh + s.B @ U[k] + s.c + sch.L[k + 1] @ Y[k + 1]
        out.append(xh)
    stacked = bo.A @ init.mean + bo.B @ U.ravel() + bo.C + bo.L @ Y.ravel()
    assert np.allclose(stacked, np.concatenate(out), rtol=0, atol=1e-12 * np.abs(stacked).max())


def test_zero_input_mean_is_free_response():
    _, segs, _, init, _, bo = _system(3)
    bo0 = assemble_block_operators(
        [DiscreteSegment(s.A, s.B, np.zeros_like(s.c), s.G, s.G_exe, 1.0) for s in segs],
        build_filter_schedule(segs, [LinearObservation(np.eye(3)[:2], np.eye(2), np.zeros(2))] * 5, init),
        init.P_hat0)
    assert np.allclose(state_mean(bo0, init.mean, np.zeros(bo.N * bo.n_u)), bo0.A @ init.mean)


@given(st.integers(0, 2**32 - 1))
def test_mean_is_affine(seed):
    r, _, _, init, _, bo = _system(seed % 1000)
    U1 = r.standard_normal(bo.N * bo.n_u)
    U2 = r.standard_normal(bo.N * bo.n_u)
    d = state_mean(bo, init.mean, U1 + U2) - state_mean(bo, init.mean, U2)
    assert np.allclose(d, bo.B @ U1, atol=1e-10 * max(1.0, np.abs(d).max()))


def test_zero_gain_gives_open_loop_dispersion():
    *_, bo = _system(4)
    Kb = Policy.zero(bo.N, bo.n_u, bo.n_x).K_block()
    S = open_loop_dispersion(bo)
    for k in range(bo.N):
        Phat, _, Pu = sqrt_covariances(bo, Kb, k)
        assert np.all(Pu == 0)
        assert np.allclose(Phat @ Phat.T, S[bo.sx(k), bo.sx(k)])


def test_factors_match_brute_force_recursion():
    r, segs, obs, init, sch, bo = _system(5)
    pol = _policy(r, bo.N, bo.n_u, bo.n_x)
    _, Px, _, _, _, Pu = brute_force_closed_loop(segs, obs, init, sch.L, pol.ubar, pol.K)
    for k in range(bo.N + 1):
        _, P, Pu_f = sqrt_covariances(bo, pol, k)
        assert np.linalg.norm(P @ P.T - Px[k]) <= 1e-10 * np.linalg.norm(Px[k])
        if k < bo.N:
            assert np.linalg.norm(Pu_f @ Pu_f.T - Pu[k]) <= 1e-10 * np.linalg.norm(Pu[k])


def test_control_covariance_matches_z_recursion():
    r, segs, obs, init, sch, bo = _system(6)
    pol = _policy(r, bo.N, bo.n_u, bo.n_x)
    # z_0 = (xhat_0^- - xbar_0) + L_0 innov_0, z_{k+1} = A_k z_k + L_{k+1} innov_{k+1}, innovations white
    Z = init.P_hat0 + sch.L[0] @ sch.P_y[0] @ sch.L[0].T
    for k in range(bo.N):
        _, _, Pu = sqrt_covariances(bo, pol, k)
        ref = pol.K[k] @ Z @ pol.K[k].T
        assert np.linalg.norm(Pu @ Pu.T - ref) <= 1e-10 * np.linalg.norm(ref)
        s = segs[k]
        Z = s.A @ Z @ s.A.T + sch.L[k + 1] @ sch.P_y[k + 1] @ sch.L[k + 1].T


def test_factors_match_monte_carlo():
    r, segs, obs, init, sch, bo = _system(7, N=3)
    pol = _policy(r, bo.N, bo.n_u, bo.n_x)
    from ccorbit.simulator import MCConfig, simulate_linear
    X, _, _ = simulate_linear(pol, segs, obs, init, sch, MCConfig(n_samples=1_000_000, seed=3))
    for k in range(bo.N + 1):
        _, P, _ = sqrt_covariances(bo, pol, k)
        S = np.cov(X[:, k], rowvar=False)
        assert np.linalg.norm(S - P @ P.T) <= 0.015 * np.linalg.norm(P @ P.T)


def test_full_dispersion_covariance_blocks():
    r, *_, bo = _system(8)
    pol = _policy(r, bo.N, bo.n_u, bo.n_x)
    Cov = dispersion_covariance(bo, pol)
    for k in range(bo.N + 1):
        Phat, _, _ = sqrt_covariances(bo, pol, k)
        assert np.allclose(Cov[bo.sx(k), bo.sx(k)], Phat @ Phat.T, atol=1e-10 * np.abs(Cov).max())


def test_policy_rejects_gains_off_mask():
    with pytest.raises(ValueError):
        Policy(np.ones((2, 1)), np.zeros((2, 1, 2)), np.array([True, False]))


def test_node_out_of_range():
    *_, bo = _system(9)
    with pytest.raises(IndexError):
        sqrt_covariances(bo, Policy.zero(bo.N, bo.n_u, bo.n_x), bo.N + 1)
