"""Independent reference computations used only by the tests."""

import numpy as np
from scipy.linalg import expm

from ccorbit.dynamics import DiscreteSegment
from ccorbit.uncertainty import InitialUncertainty, LinearObservation


def random_linear_system(rng, n_x, n_u, n_y, N, measurement_mask=None):
    """Random stable-ish discrete system with Kalman-compatible noise."""
    segs = []
    for _ in range(N):
        A = np.eye(n_x) + 0.3 * rng.standard_normal((n_x, n_x))
        B = rng.standard_normal((n_x, n_u))
        c = 0.1 * rng.standard_normal(n_x)
        G = 0.2 * rng.standard_normal((n_x, n_x))
        G_exe = B @ (0.1 * rng.standard_normal((n_u, n_u)))
        segs.append(DiscreteSegment(A, B, c, G, G_exe, 1.0))
    obs = []
    for _ in range(N + 1):
        C = rng.standard_normal((n_y, n_x))
        D = 0.5 * np.eye(n_y) + 0.1 * rng.standard_normal((n_y, n_y))
        obs.append(LinearObservation(C, D, 0.1 * rng.standard_normal(n_y)))
    Mh = rng.standard_normal((n_x, n_x))
    Mt = rng.standard_normal((n_x, n_x))
    init = InitialUncertainty(rng.standard_normal(n_x), 0.5 * Mh @ Mh.T, 0.3 * Mt @ Mt.T + 0.01 * np.eye(n_x))
    return segs, obs, init


def brute_force_closed_loop(segs, obs, init, L, ubar, K):
    """Closed-loop moments by tracking every variable as an explicit map of the noise.

    Noise basis: [x_hat0^- dispersion, x_tilde0^-, (w_k, w_exe_k) per interval,
    v_k per node], all independent standard normal. Returns means and
    covariances of the true state x_k, the estimate xhat_k and the control u_k.
    """
    N = len(segs)
    n_x = init.mean.size
    n_w = segs[0].G.shape[1]
    n_e = segs[0].G_exe.shape[1]
    n_y = obs[0].D.shape[1]
    dim = 2 * n_x + N * (n_w + n_e) + (N + 1) * n_y
    idx = 2 * n_x

    def sqrt(P):
        lam, V = np.linalg.eigh(0.5 * (P + P.T))
        return V * np.sqrt(np.clip(lam, 0, None))

    # each variable: (mean vector, coefficient matrix on the noise basis)
    xh_m = init.mean.copy()
    xh_M = np.zeros((n_x, dim))
    xh_M[:, :n_x] = sqrt(init.P_hat0)
    xt_M = np.zeros((n_x, dim))
    xt_M[:, n_x:2 * n_x] = sqrt(init.P_tilde0)
    x_m, x_M = xh_m.copy(), xh_M + xt_M

    v_off = 2 * n_x + N * (n_w + n_e)
    out_x, out_xh, out_u = [], [], []
    z_m, z_M = None, None
    xbar_prev = None
    for k in range(N + 1):
        o = obs[k]
        V = np.zeros((n_y, dim))
        V[:, v_off + k * n_y: v_off + (k + 1) * n_y] = o.D
        # innovation: y - C xhat^- - c_obs
        inn_m = o.C @ (x_m - xh_m)
        inn_M = o.C @ (x_M - xh_M) + V
        xh_m = xh_m + L[k] @ inn_m
        xh_M = xh_M + L[k] @ inn_M
        if k == 0:
            z_m, z_M = np.zeros(n_x), xh_M.copy()
            xbar = init.mean.copy()
        else:
            s = segs[k - 1]
            z_m = s.A @ z_m
            z_M = s.A @ z_M + L[k] @ inn_M
            xbar = s.A @ xbar_prev + s.B @ ubar[k - 1] + s.c
        # z is the estimate deviation from the planned mean, driven only by noise
        out_x.append((x_m, x_M))
        out_xh.append((xh_m, xh_M))
        if k == N:
            break
        u_m = ubar[k] + K[k] @ (xh_m - xbar)
        u_M = K[k] @ z_M
        out_u.append((u_m, u_M))
        s = segs[k]
        W = np.zeros((n_x, dim))
        W[:, idx:idx + n_w] = s.G
        W[:, idx + n_w:idx + n_w + n_e] = s.G_exe
        idx += n_w + n_e
        x_m = s.A @ x_m + s.B @ u_m + s.c
        x_M = s.A @ x_M + s.B @ u_M + W
        xh_m = s.A @ xh_m + s.B @ u_m + s.c
        xh_M = s.A @ xh_M + s.B @ u_M
        xbar_prev = xbar
    cov = lambda M: M @ M.T
    return ([m for m, _ in out_x], [cov(M) for _, M in out_x],
            [m for m, _ in out_xh], [cov(M) for _, M in out_xh],
            [m for m, _ in out_u], [cov(M) for _, M in out_u])


def cwh_matrix(n):
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3, 0] = 3 * n * n
    A[3, 4] = 2 * n
    A[4, 3] = -2 * n
    A[5, 2] = -n * n
    return A


def cwh_expm_stm(n, dt):
    return expm(cwh_matrix(n) * dt)


def normal_quantile_newton(eps, tol=1e-15):
    """Solve Phi(x) = 1 - eps by Newton's method with mpmath's CDF."""
    import mpmath as mp
    mp.mp.dps = 40
    x = mp.mpf(0)
    target = 1 - mp.mpf(eps)
    for _ in range(100):
        step = (mp.ncdf(x) - target) / mp.npdf(x)
        x -= step
        if abs(step) < tol:
            break
    return float(x)


def chi2_quantile_bisection(eps, n):
    """sqrt of the chi2(n) (1 - eps) quantile by bisection on the regularized lower gamma."""
    import mpmath as mp
    mp.mp.dps = 40
    target = 1 - mp.mpf(eps)
    lo, hi = mp.mpf(0), mp.mpf(1)
    while mp.gammainc(mp.mpf(n) / 2, 0, hi / 2, regularized=True) < target:
        hi *= 2
    for _ in range(200):
        mid = (lo + hi) / 2
        if mp.gammainc(mp.mpf(n) / 2, 0, mid / 2, regularized=True) < target:
            lo = mid
        else:
            hi = mid
    return float(mp.sqrt((lo + hi) / 2))
