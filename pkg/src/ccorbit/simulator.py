"""Seeded Monte-Carlo certification of a closed-loop plan.

Linear mode replays the discrete design model exactly (truth, Kalman filter,
z-process, policy). Nonlinear mode propagates the truth with the full force
model plus Euler-Maruyama acceleration kicks, runs an extended Kalman filter
linearized along each sample's estimate, and feeds its innovations to the
planned z-process (``MCConfig.z_source = "innovation"``) or forms z from the
onboard estimate directly (``"estimate"``).

Each sample draws all its noise from its own stream seeded by
``(base_seed, sample_index)``, so the noise a sample sees does not depend on
batching (batched propagation shares adaptive steps, so trajectories agree
across batch sizes to integrator tolerance, and bitwise for a fixed one).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import chi2

from ._linalg import psd_factor, symmetrize
from .convexifier import ConstraintSet, RiskBudget
from .dynamics import B_INPUT, ControlType, DomainError, PropagationError, R_MOON, propagate, \
    propagate_batch_linearization
from .uncertainty import gates_matrix, linearize_observation

log = logging.getLogger(__name__)

THREE_SIGMA_MASS = 0.9973002039367398  # two-sided normal mass within 3 sigma


@dataclass(frozen=True)
class MCConfig:
    n_samples: int = 1000
    seed: int = 0
    mode: str = "linear"
    keep_trajectories: bool = False
    substeps: int = 10
    batch_size: int = 250
    rtol: float = 1e-10
    atol: float = 1e-12
    # nonlinear mode: how the policy's z is formed ("innovation" or "estimate")
    z_source: str = "innovation"

    def __post_init__(self):
        if self.z_source not in ("innovation", "estimate"):
            raise ValueError(f"unknown z source {self.z_source!r}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.mode not in ("linear", "nonlinear"):
            raise ValueError(f"unknown MC mode {self.mode!r}")
        if self.substeps < 1 or self.batch_size < 1:
            raise ValueError("substeps and batch_size must be positive")


def empirical_quantile(samples, p: float) -> float:
    """Smallest sample value v with empirical CDF(v) >= p (order statistic ceil(p n))."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empirical quantile of an empty sample")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    i = int(np.ceil(p * x.size - 1e-12))
    return float(x[max(i, 1) - 1])


def binomial_bound(eps: float, n: int) -> float:
    """eps plus three binomial standard errors at n samples."""
    return eps + 3.0 * np.sqrt(eps * (1.0 - eps) / n)


@dataclass
class MCReport:
    mode: str
    seed: int
    n_samples: int
    n_failed: int
    dv_total: np.ndarray                  # per valid sample, solver velocity units
    J_ub: float
    velocity_unit_km_per_s: float = 1.0
    quantiles: dict = field(default_factory=dict)
    violations: dict = field(default_factory=dict)
    terminal: dict = field(default_factory=dict)
    node_mean: Optional[np.ndarray] = None   # sample mean of the true state per node
    node_cov: Optional[np.ndarray] = None    # sample covariance of the true state per node
    states: Optional[np.ndarray] = None      # (n, N+1, 6) when trajectories are kept
    controls: Optional[np.ndarray] = None    # (n, N, 3)
    epochs: Optional[np.ndarray] = None
    failed: tuple = ()

    @property
    def dv99(self) -> float:
        return self.quantiles[0.99]

    def checks(self) -> dict:
        """Named pass/fail results of the certification tests."""
        out = {"dv99_le_J_ub": bool(self.dv99 <= self.J_ub)}
        for fam, v in self.violations.items():
            out[f"{fam}_rate"] = bool(v["pass"])
        for key in ("mean_ok", "cov_ok"):
            if key in self.terminal:
                out[f"terminal_{key[:-3]}"] = bool(self.terminal[key])
        return out

    def to_dict(self) -> dict:
        vu = self.velocity_unit_km_per_s * 1e3
        return {
            "mode": self.mode,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
            "failed_samples": list(self.failed),
            "J_ub_m_per_s": self.J_ub * vu,
            "dv_quantiles_m_per_s": {f"{p:g}": q * vu for p, q in sorted(self.quantiles.items())},
            "dv_mean_m_per_s": float(np.mean(self.dv_total)) * vu,
            "violations": self.violations,
            "terminal": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.terminal.items()},
            "checks": self.checks(),
        }


def _draw(seed: int, indices: np.ndarray, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng([seed, int(i)]).standard_normal(dim) for i in indices])


def _z_policy(plan, k: int, Z: np.ndarray) -> np.ndarray:
    return plan.ubar[k] + Z @ plan.K[k].T


# -- statistics -------------------------------------------------------------------


def _violation_entry(flags: np.ndarray, nodes, eps: float, n: int) -> dict:
    rates = flags.mean(axis=0) if flags.size else np.zeros(0)
    bound = binomial_bound(eps, n)
    return {"nodes": [int(k) for k in nodes], "rates": [float(r) for r in rates],
            "max_rate": float(rates.max()) if rates.size else 0.0, "budget": eps,
            "bound": float(bound), "pass": bool(np.all(rates <= bound))}


def constraint_violations(X: np.ndarray, U: np.ndarray, cs: ConstraintSet, budget: RiskBudget,
                          maneuver_mask: np.ndarray, stc_reference: Optional[np.ndarray] = None) -> dict:
    """Per-node empirical violation rates of the original chance constraints."""
    n, N1, _ = X.shape
    out = {}
    if cs.u_max is not None:
        nodes = np.flatnonzero(maneuver_mask)
        flags = np.linalg.norm(U[:, nodes], axis=2) > cs.u_max
        out["control_magnitude"] = _violation_entry(flags, nodes, budget.eps_u, n)
    if cs.du_max is not None and U.shape[1] > 1:
        dU = np.linalg.norm(np.diff(U, axis=1), axis=2)
        out["control_rate"] = _violation_entry(dU > cs.du_max, range(U.shape[1] - 1), budget.eps_u, n)
    if cs.tube is not None:
        nodes = np.arange(N1) if cs.tube.nodes is None else np.asarray(cs.tube.nodes)
        dev = (X[:, nodes] - cs.tube.reference[nodes]) @ np.asarray(cs.tube.H).T
        out["tube"] = _violation_entry(np.linalg.norm(dev, axis=2) > cs.tube.d_max, nodes, budget.eps_x, n)
    if cs.hyperplanes:
        nodes = np.arange(N1) if cs.hyperplane_nodes is None else np.asarray(cs.hyperplane_nodes)
        flags = np.zeros((n, len(nodes)), bool)
        for a, b in cs.hyperplanes:
            flags |= X[:, nodes] @ np.asarray(a) + b > 0
        out["hyperplane"] = _violation_entry(flags, nodes, budget.eps_x, n)
    if cs.cone is not None and stc_reference is not None:
        nodes = [k for k in range(N1) if cs.cone.weight(stc_reference[k]) > 0]
        c = cs.cone
        flags = np.zeros((n, len(nodes)), bool)
        for j, k in enumerate(nodes):
            r = X[:, k] @ c.H_r.T
            flags[:, j] = np.linalg.norm(r @ c.A_cone.T, axis=1) > r @ c.b_cone
        out["approach_cone"] = _violation_entry(flags, nodes, budget.eps_x, n)
    return out


def terminal_statistics(xN: np.ndarray, x_f: Optional[np.ndarray], P_f: Optional[np.ndarray]) -> dict:
    """Terminal mean (Mahalanobis, 3-sigma mass) and covariance (PSD-order) tests."""
    n, d = xN.shape
    mean = xN.mean(axis=0)
    cov = np.cov(xN, rowvar=False)
    out = {"sample_mean": mean, "sample_cov": cov}
    if x_f is not None:
        err = mean - x_f
        out["mean_error"] = err
        try:
            m2 = float(n * err @ np.linalg.solve(cov, err))
        except np.linalg.LinAlgError:
            m2 = float("inf")
        out["mean_mahalanobis2"] = m2
        out["mean_bound"] = float(chi2.ppf(THREE_SIGMA_MASS, d))
        out["mean_ok"] = bool(m2 <= out["mean_bound"])
    if P_f is not None:
        lam, V = np.linalg.eigh(symmetrize(P_f))
        W = (V / np.sqrt(lam)) @ V.T
        out["cov_ratio_max_eig"] = float(np.linalg.eigvalsh(symmetrize(W @ cov @ W))[-1])
        out["cov_bound"] = float(1.0 + 3.0 * np.sqrt(2.0 / (n - 1)))
        out["cov_ok"] = bool(out["cov_ratio_max_eig"] <= out["cov_bound"])
    return out


def _report(mode, cfg, X, U, plan, cs, budget, mask, failed, epochs, vel_unit) -> MCReport:
    n = X.shape[0]
    dv = np.linalg.norm(U, axis=2).sum(axis=1)
    rep = MCReport(mode=mode, seed=cfg.seed, n_samples=cfg.n_samples, n_failed=len(failed), dv_total=dv,
                   J_ub=float(plan.J_ub), velocity_unit_km_per_s=vel_unit, failed=tuple(failed),
                   epochs=epochs)
    rep.quantiles = {p: empirical_quantile(dv, p) for p in (0.5, 0.9, 0.99)}
    rep.violations = constraint_violations(X, U, cs, budget, mask, getattr(plan, "stc_reference", None))
    rep.terminal = terminal_statistics(X[:, -1], cs.x_f, cs.P_f)
    rep.node_mean = X.mean(axis=0)
    rep.node_cov = np.stack([np.cov(X[:, k], rowvar=False) for k in range(X.shape[1])])
    if cfg.keep_trajectories:
        rep.states, rep.controls = X, U
    return rep


# -- linear mode ------------------------------------------------------------------


def simulate_linear(plan, segments, obs, init, schedule, cfg: MCConfig):
    """Closed-loop samples of the discrete design model; returns (X_true, X_hat, U)."""
    N = len(segments)
    nx = init.mean.size
    nw = segments[0].G.shape[1]
    ne = segments[0].G_exe.shape[1]
    ny = obs[0].D.shape[1]
    dim = 2 * nx + N * (nw + ne) + (N + 1) * ny
    n = cfg.n_samples
    W = _draw(cfg.seed, np.arange(n), dim)
    Sh, St = psd_factor(init.P_hat0), psd_factor(init.P_tilde0)
    xh = init.mean + W[:, :nx] @ Sh.T
    x = xh + W[:, nx:2 * nx] @ St.T
    i_w = 2 * nx
    i_v = 2 * nx + N * (nw + ne)
    X = np.zeros((n, N + 1, nx))
    Xh = np.zeros((n, N + 1, nx))
    U = np.zeros((n, N, segments[0].B.shape[1]))
    Z = None
    for k in range(N + 1):
        o = obs[k]
        v = W[:, i_v + k * ny:i_v + (k + 1) * ny]
        innov = (x - xh) @ o.C.T + v @ o.D.T
        xh = xh + innov @ schedule.L[k].T
        if k == 0:
            Z = xh - init.mean
        else:
            Z = Z @ segments[k - 1].A.T + innov @ schedule.L[k].T
        X[:, k], Xh[:, k] = x, xh
        if k == N:
            break
        s = segments[k]
        u = _z_policy(plan, k, Z)
        U[:, k] = u
        w = W[:, i_w:i_w + nw]
        we = W[:, i_w + nw:i_w + nw + ne]
        i_w += nw + ne
        x = x @ s.A.T + u @ s.B.T + s.c + w @ s.G.T + we @ s.G_exe.T
        xh = xh @ s.A.T + u @ s.B.T + s.c
    return X, Xh, U


def run_linear_mc(plan, scenario, cfg: MCConfig) -> MCReport:
    """Monte Carlo of the linear design model for a scenario."""
    X, _, U = simulate_linear(plan, scenario.segments, scenario.obs, scenario.init, scenario.schedule, cfg)
    return _report("linear", cfg, X, U, plan, scenario.constraints, scenario.budget,
                   scenario.maneuver_mask, (), scenario.reference.epochs, scenario.units.velocity)


# -- nonlinear mode ---------------------------------------------------------------


def _impact_mask(model, X: np.ndarray) -> np.ndarray:
    """Samples inside the Moon (CR3BP) or non-finite."""
    bad = ~np.all(np.isfinite(X), axis=1)
    if model.kind.value == "CR3BP":
        r = np.linalg.norm(X[:, :3] - np.array([1.0 - model.mu, 0.0, 0.0]), axis=1)
        bad |= r < R_MOON / model.lstar
    return bad


def _propagate_rows(model, X, t0, t1, rtol, atol):
    try:
        return propagate(model, X, t0, t1, rtol=rtol, atol=atol)
    except (PropagationError, DomainError):
        # fall back to one sample at a time so a single bad sample cannot sink the batch
        out = np.full_like(X, np.nan)
        for i, x in enumerate(X):
            try:
                out[i] = propagate(model, x, t0, t1, rtol=rtol, atol=atol)
            except (PropagationError, DomainError):
                pass
        return out


def _ekf_time_update(model, Xh, P, U, gates, noise, t0, t1, rtol, atol, burn=True):
    Xp = Xh + U @ B_INPUT.T
    try:
        Xn, Phi, Q = propagate_batch_linearization(model, Xp, t0, t1, G=noise, tol=(rtol, atol))
    except (PropagationError, DomainError):
        Xn = np.full_like(Xp, np.nan)
        Phi = np.full((len(Xp), 6, 6), np.nan)
        Q = np.zeros((len(Xp), 6, 6))
        for i, x in enumerate(Xp):
            try:
                a, b, c = propagate_batch_linearization(model, x[None], t0, t1, G=noise, tol=(rtol, atol))
                Xn[i], Phi[i], Q[i] = a[0], b[0], c[0]
            except (PropagationError, DomainError):
                pass
    Pn = Phi @ P @ np.swapaxes(Phi, 1, 2) + Q
    if burn:
        Ge = np.stack([Phi[i] @ B_INPUT @ gates_matrix(U[i], gates) for i in range(len(U))])
        Pn = Pn + Ge @ np.swapaxes(Ge, 1, 2)
    return Xn, 0.5 * (Pn + np.swapaxes(Pn, 1, 2))


def _ekf_measurement(obs_model, Xh, P, Y):
    n, nx = Xh.shape
    lin = [linearize_observation(obs_model, x) for x in Xh]
    C = np.stack([l.C for l in lin])
    D = np.stack([l.D for l in lin])
    pred = np.stack([obs_model.f_obs(x) for x in Xh])
    innov = Y - pred
    S = C @ P @ np.swapaxes(C, 1, 2) + D @ np.swapaxes(D, 1, 2)
    Kg = np.swapaxes(np.linalg.solve(S, C @ P), 1, 2)
    IKC = np.eye(nx) - Kg @ C
    KD = Kg @ D
    Pp = IKC @ P @ np.swapaxes(IKC, 1, 2) + KD @ np.swapaxes(KD, 1, 2)
    Xh = Xh + np.einsum("nij,nj->ni", Kg, innov)
    return Xh, 0.5 * (Pp + np.swapaxes(Pp, 1, 2)), innov


def simulate_nonlinear(plan, scenario, cfg: MCConfig, indices: np.ndarray):
    """Nonlinear closed loop for the samples ``indices``; returns (X, U, failed_mask)."""
    sc = scenario
    model = sc.model
    if model.control_type is not ControlType.IMPULSIVE:
        raise NotImplementedError("nonlinear Monte Carlo supports impulsive maneuvers")
    N, ep = sc.N, sc.reference.epochs
    nx, ny, m = 6, sc.obs_model.n_y, cfg.substeps
    segs, L = sc.segments, sc.schedule.L
    dim = 2 * nx + N * (3 * m + 3) + (N + 1) * ny
    W = _draw(cfg.seed, indices, dim)
    n = len(indices)
    Sh, St = psd_factor(sc.init.P_hat0), psd_factor(sc.init.P_tilde0)
    xh = sc.init.mean + W[:, :nx] @ Sh.T
    x = xh + W[:, nx:2 * nx] @ St.T
    P = np.broadcast_to(sc.init.P_tilde0, (n, nx, nx)).copy()
    i_w = 2 * nx
    i_v = 2 * nx + N * (3 * m + 3)
    sig_a = sc.noise[3:, :]
    X = np.zeros((n, N + 1, nx))
    U = np.zeros((n, N, 3))
    failed = np.zeros(n, bool)
    Z = None
    for k in range(N + 1):
        D = sc.obs_model.G_obs(x[0])
        v = W[:, i_v + k * ny:i_v + (k + 1) * ny]
        Y = np.stack([sc.obs_model.f_obs(xi) for xi in x]) + v @ np.atleast_2d(D).T
        xh, P, innov = _ekf_measurement(sc.obs_model, xh, P, Y)
        if cfg.z_source == "innovation":
            Z = xh - sc.init.mean if k == 0 else Z @ segs[k - 1].A.T + innov @ L[k].T
        else:
            # open-loop estimate deviation: onboard estimate minus planned mean and past feedback
            Wfb = np.zeros((n, nx)) if k == 0 else (
                Wfb @ segs[k - 1].A.T + (U[:, k - 1] - plan.ubar[k - 1]) @ segs[k - 1].B.T)
            Z = xh - plan.xbar[k] - Wfb
        X[:, k] = x
        if k == N:
            break
        u = _z_policy(plan, k, Z) if sc.maneuver_mask[k] else np.zeros((n, 3))
        U[:, k] = u
        we = W[:, i_w:i_w + 3]
        i_w += 3
        du = u.copy()
        if sc.maneuver_mask[k]:
            du += np.stack([gates_matrix(u[i], sc.gates) @ we[i] for i in range(n)])
        x = x + du @ B_INPUT.T
        h = (ep[k + 1] - ep[k]) / m
        for j in range(m):
            t0 = ep[k] + j * h
            ok = ~failed
            x[ok] = _propagate_rows(model, x[ok], t0, t0 + h, cfg.rtol, cfg.atol)
            kick = W[:, i_w:i_w + 3] @ sig_a.T * np.sqrt(h)
            i_w += 3
            x[:, 3:] += kick
            failed |= _impact_mask(model, x)
            x[failed] = sc.reference.states[k + 1]  # parked; excluded from statistics
        xh, P = _ekf_time_update(model, xh, P, u, sc.gates, sc.noise, ep[k], ep[k + 1], cfg.rtol, cfg.atol,
                                 burn=bool(sc.maneuver_mask[k]))
        bad = ~np.all(np.isfinite(xh), axis=1)
        failed |= bad
        xh[bad] = sc.reference.states[k + 1]
        P[bad] = sc.schedule.P_minus[k + 1]
    return X, U, failed


def run_nonlinear_mc(plan, scenario, cfg: MCConfig) -> MCReport:
    """Nonlinear closed-loop Monte Carlo with an EKF; impacted samples are excluded and counted."""
    Xs, Us, Fs = [], [], []
    for start in range(0, cfg.n_samples, cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, cfg.n_samples))
        X, U, F = simulate_nonlinear(plan, scenario, cfg, idx)
        Xs.append(X)
        Us.append(U)
        Fs.append(F)
        log.info("nonlinear MC: %d/%d samples", idx[-1] + 1, cfg.n_samples)
    X, U, F = np.concatenate(Xs), np.concatenate(Us), np.concatenate(Fs)
    failed = tuple(int(i) for i in np.flatnonzero(F))
    ok = ~F
    return _report("nonlinear", cfg, X[ok], U[ok], plan, scenario.constraints, scenario.budget,
                   scenario.maneuver_mask, failed, scenario.reference.epochs, scenario.units.velocity)


def run_mc(plan, scenario, cfg: MCConfig) -> MCReport:
    return run_linear_mc(plan, scenario, cfg) if cfg.mode == "linear" else run_nonlinear_mc(plan, scenario, cfg)
