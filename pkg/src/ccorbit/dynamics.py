"""Equations of motion, state-transition matrices, and segment discretization.

All right-hand sides accept states with a trailing axis of length 6 so the
same code serves single propagations and batched Monte-Carlo ensembles.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.integrate import solve_ivp

from ._linalg import NumericalError, psd_factor, symmetrize
from .uncertainty import GatesParams, gates_matrix

# physical constants not supplied with the scenarios
MU_EARTH = 398600.4418  # km^3/s^2
MU_EARTH_MOON = 0.012150585
LSTAR_EARTH_MOON = 3.84748e5  # km
TSTAR_EARTH_MOON = 3.75700e5  # s
R_MOON = 1737.4  # km

N_X = 6
N_U = 3
B_INPUT = np.vstack([np.zeros((3, 3)), np.eye(3)])

_SINGULAR_RADIUS = 1e4 * np.finfo(float).eps


class DomainError(ValueError):
    """State at a gravitational singularity."""


class PropagationError(RuntimeError):
    pass


class ModelKind(str, enum.Enum):
    CWH = "CWH"
    CR3BP = "CR3BP"
    PERTURBED_2BP = "Perturbed2BP"


class ControlType(str, enum.Enum):
    IMPULSIVE = "impulsive"
    ZOH = "zoh_continuous"


Perturbation = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class DynamicsModel:
    """One of the three supported force models plus its constants.

    ``mu`` is the mass ratio for CR3BP and the body's gravitational
    parameter for the two-body model. ``perturbation(x, t)`` adds an
    acceleration through the velocity rows; its Jacobian is taken by central
    differences unless ``perturbation_jac`` is given.
    """

    kind: ModelKind
    n: float = 0.0
    mu: float = 0.0
    lstar: float = 1.0
    tstar: float = 1.0
    control_type: ControlType = ControlType.IMPULSIVE
    perturbation: Optional[Perturbation] = field(default=None, compare=False)
    perturbation_jac: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "control_type", ControlType(self.control_type))
        if kind is ModelKind.CWH and not self.n > 0:
            raise ValueError("CWH mean motion must be positive")
        if kind is ModelKind.CR3BP:
            if not 0 < self.mu < 1:
                raise ValueError("CR3BP mass ratio must lie in (0, 1)")
            if not (self.lstar > 0 and self.tstar > 0):
                raise ValueError("characteristic length and time must be positive")
        if kind is ModelKind.PERTURBED_2BP and not self.mu > 0:
            raise ValueError("gravitational parameter must be positive")

    @classmethod
    def cwh(cls, n: float, **kw) -> "DynamicsModel":
        return cls(ModelKind.CWH, n=n, **kw)

    @classmethod
    def cwh_from_radius(cls, r0: float, mu_body: float = MU_EARTH, **kw) -> "DynamicsModel":
        return cls.cwh(np.sqrt(mu_body / r0**3), **kw)

    @classmethod
    def cr3bp(cls, mu: float = MU_EARTH_MOON, lstar: float = LSTAR_EARTH_MOON,
              tstar: float = TSTAR_EARTH_MOON, **kw) -> "DynamicsModel":
        return cls(ModelKind.CR3BP, mu=mu, lstar=lstar, tstar=tstar, **kw)

    @classmethod
    def two_body(cls, mu: float = MU_EARTH, **kw) -> "DynamicsModel":
        return cls(ModelKind.PERTURBED_2BP, mu=mu, **kw)

    @property
    def vstar(self) -> float:
        return self.lstar / self.tstar

    def default_tolerances(self) -> tuple[float, float]:
        return (1e-12, 1e-12) if self.kind is ModelKind.CR3BP else (1e-10, 1e-10)

    # -- vector field ---------------------------------------------------------

    def f0(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r, v = x[..., :3], x[..., 3:]
        if self.kind is ModelKind.CWH:
            n = self.n
            acc = np.stack([3 * n * n * r[..., 0] + 2 * n * v[..., 1],
                            -2 * n * v[..., 0],
                            -n * n * r[..., 2]], axis=-1)
        elif self.kind is ModelKind.CR3BP:
            acc = _cr3bp_acc(x, self.mu)
        else:
            rn = np.linalg.norm(r, axis=-1, keepdims=True)
            if np.any(rn < _SINGULAR_RADIUS):
                raise DomainError("position at the central body singularity")
            acc = -self.mu * r / rn**3
        if self.perturbation is not None:
            acc = acc + _apply_perturbation(self.perturbation, x, t)
        return np.concatenate([v, acc], axis=-1)

    def jacobian(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """d f0 / d x, shape (..., 6, 6)."""
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (6, 6))
        J[..., 0, 3] = J[..., 1, 4] = J[..., 2, 5] = 1.0
        if self.kind is ModelKind.CWH:
            n = self.n
            J[..., 3, 0] = 3 * n * n
            J[..., 5, 2] = -n * n
            J[..., 3, 4] = 2 * n
            J[..., 4, 3] = -2 * n
        elif self.kind is ModelKind.CR3BP:
            J[..., 3:, :3] = _cr3bp_hessian(x, self.mu)
            J[..., 3, 4] = 2.0
            J[..., 4, 3] = -2.0
        else:
            r = x[..., :3]
            rn = np.linalg.norm(r, axis=-1)[..., None, None]
            if np.any(rn < _SINGULAR_RADIUS):
                raise DomainError("position at the central body singularity")
            J[..., 3:, :3] = (-self.mu / rn**3 * np.eye(3)
                              + 3 * self.mu * r[..., :, None] * r[..., None, :] / rn**5)
        if self.perturbation is not None:
            if self.perturbation_jac is not None:
                J[..., 3:, :] += self.perturbation_jac(x, t)
            else:
                J[..., 3:, :] += _fd_jacobian(lambda y: self.perturbation(y, t), x)
        return J

    def jacobi_constant(self, x: np.ndarray) -> np.ndarray:
        if self.kind is not ModelKind.CR3BP:
            raise ValueError("Jacobi constant is defined for CR3BP only")
        x = np.asarray(x, dtype=float)
        mu = self.mu
        r1, r2 = _primary_distances(x, mu)
        v2 = np.sum(x[..., 3:] ** 2, axis=-1)
        return x[..., 0] ** 2 + x[..., 1] ** 2 + 2 * (1 - mu) / r1 + 2 * mu / r2 - v2


def _apply_perturbation(fn, x, t):
    if x.ndim == 1:
        return np.asarray(fn(x, t), dtype=float)
    return np.stack([np.asarray(fn(xi, t), dtype=float) for xi in x.reshape(-1, 6)]).reshape(x.shape[:-1] + (3,))


def _fd_jacobian(fn, x, h_rel=1e-7):
    x = np.asarray(x, dtype=float)
    if x.ndim > 1:
        return np.stack([_fd_jacobian(fn, xi, h_rel) for xi in x.reshape(-1, 6)]).reshape(x.shape[:-1] + (3, 6))
    cols = []
    for i in range(6):
        h = h_rel * max(1.0, abs(x[i]))
        e = np.zeros(6)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.column_stack(cols)


def _primary_distances(x, mu):
    y, z = x[..., 1], x[..., 2]
    r1 = np.sqrt((x[..., 0] + mu) ** 2 + y * y + z * z)
    r2 = np.sqrt((x[..., 0] - 1 + mu) ** 2 + y * y + z * z)
    if np.any(r1 < _SINGULAR_RADIUS) or np.any(r2 < _SINGULAR_RADIUS):
        raise DomainError("position at a primary singularity")
    return r1, r2


def _cr3bp_acc(x, mu):
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    vx, vy = x[..., 3], x[..., 4]
    r1, r2 = _primary_distances(x, mu)
    a1 = (1 - mu) / r1**3
    a2 = mu / r2**3
    return np.stack([2 * vy + px - a1 * (px + mu) - a2 * (px - 1 + mu),
                     -2 * vx + py - a1 * py - a2 * py,
                     -a1 * pz - a2 * pz], axis=-1)


def _cr3bp_hessian(x, mu):
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    r1, r2 = _primary_distances(x, mu)
    d1 = np.stack([px + mu, py, pz], axis=-1)
    d2 = np.stack([px - 1 + mu, py, pz], axis=-1)
    k1 = (1 - mu) / r1**3
    k2 = mu / r2**3
    H = (3 * (1 - mu) / r1[..., None, None] ** 5 * d1[..., :, None] * d1[..., None, :]
         + 3 * mu / r2[..., None, None] ** 5 * d2[..., :, None] * d2[..., None, :])
    H = H - (k1 + k2)[..., None, None] * np.eye(3)
    H[..., 0, 0] += 1.0
    H[..., 1, 1] += 1.0
    return H


# -- single-arc operations -------------------------------------------------------


def eval_eom(model: DynamicsModel, x: np.ndarray, u: np.ndarray, t: float = 0.0) -> np.ndarray:
    """f0(x, t) + B u."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("state is not finite")
    return model.f0(x, t) + B_INPUT @ np.asarray(u, dtype=float)


def _solve(rhs, y0, t0, t1, rtol, atol, what="propagation"):
    try:
        sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", rtol=rtol, atol=atol)
    except DomainError:
        raise
    except (ValueError, ArithmeticError) as exc:
        raise PropagationError(f"{what} failed: {exc}") from exc
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise PropagationError(f"{what} failed: {sol.message}")
    return sol.y[:, -1]


def propagate(model: DynamicsModel, x0: np.ndarray, t0: float, t1: float,
              u: Optional[np.ndarray] = None, rtol=None, atol=None) -> np.ndarray:
    """Propagate a state (or a batch of states, shape (m, 6)) with constant control ``u``."""
    x0 = np.asarray(x0, dtype=float)
    if t1 == t0:
        return x0.copy()
    d_rtol, d_atol = model.default_tolerances()
    shape = x0.shape
    bu = np.zeros(6) if u is None else B_INPUT @ np.asarray(u, dtype=float)

    def rhs(t, y):
        return (model.f0(y.reshape(shape), t) + bu).ravel()

    return _solve(rhs, x0.ravel(), t0, t1, rtol or d_rtol, atol or d_atol).reshape(shape)


def propagate_with_stm(model: DynamicsModel, x0: np.ndarray, t0: float, t1: float,
                       tol: Optional[tuple[float, float]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Uncontrolled state and state-transition matrix from t0 to t1."""
    x0 = np.asarray(x0, dtype=float)
    if t1 == t0:
        return x0.copy(), np.eye(6)
    rtol, atol = tol or model.default_tolerances()

    def rhs(t, y):
        x = y[:6]
        Phi = y[6:].reshape(6, 6)
        return np.concatenate([model.f0(x, t), (model.jacobian(x, t) @ Phi).ravel()])

    y = _solve(rhs, np.concatenate([x0, np.eye(6).ravel()]), t0, t1, rtol, atol)
    return y[:6], y[6:].reshape(6, 6)


def propagate_batch_linearization(model: DynamicsModel, X0: np.ndarray, t0: float, t1: float,
                                  G: Optional[np.ndarray] = None, tol=None):
    """Batch (m, 6) propagation returning states, STMs (m, 6, 6) and integrated noise Grams.

    ``G`` is a constant (6, q) intensity; the Gram is zero without it.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    m = X0.shape[0]
    Phi0 = np.broadcast_to(np.eye(6), (m, 6, 6))
    if t1 == t0:
        return X0.copy(), Phi0.copy(), np.zeros((m, 6, 6))
    rtol, atol = tol or model.default_tolerances()
    GG = np.zeros((6, 6)) if G is None else G @ G.T
    nx, nphi = 6 * m, 36 * m

    def rhs(t, y):
        X = y[:nx].reshape(m, 6)
        Phi = y[nx:nx + nphi].reshape(m, 6, 6)
        Q = y[nx + nphi:].reshape(m, 6, 6)
        A = model.jacobian(X, t)
        AQ = A @ Q
        return np.concatenate([model.f0(X, t).ravel(), (A @ Phi).ravel(),
                               (AQ + np.swapaxes(AQ, 1, 2) + GG).ravel()])

    y0 = np.concatenate([X0.ravel(), Phi0.ravel(), np.zeros(nphi)])
    y = _solve(rhs, y0, t0, t1, rtol, atol)
    return (y[:nx].reshape(m, 6), y[nx:nx + nphi].reshape(m, 6, 6),
            y[nx + nphi:].reshape(m, 6, 6))


# -- linearization along a reference ---------------------------------------------


@dataclass(frozen=True)
class LinearizedArc:
    x1: np.ndarray
    Phi: np.ndarray
    B_int: Optional[np.ndarray]
    c: np.ndarray
    Q: np.ndarray


def integrate_linearization(f: Callable, jac: Callable, x0: np.ndarray, t0: float, t1: float,
                            B_zoh: Optional[np.ndarray] = None,
                            G: Union[None, np.ndarray, Callable] = None,
                            rtol: float = 1e-10, atol: float = 1e-10) -> LinearizedArc:
    """Linearize ``xdot = f(x, t)`` along its own solution from ``x0``.

    The variational equation is augmented with forward-form convolution
    states, so a single integration returns
    ``Phi(t1, t0)``, ``Phi(t1,t0) int Phi^-1 B dt`` (when ``B_zoh`` is given),
    ``Phi(t1,t0) int Phi^-1 c dt`` with ``c = f - A x`` and the integrated
    noise Gram ``Phi(t1,t0) [int Phi^-1 G G^T Phi^-T dt] Phi(t1,t0)^T``.
    Works for any state dimension.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    nb = 0 if B_zoh is None else B_zoh.shape[1]
    Gfun = G if callable(G) else (lambda x, t, _G=G: _G)

    def rhs(t, y):
        x = y[:n]
        i = n
        Phi = y[i:i + n * n].reshape(n, n); i += n * n
        Bt = y[i:i + n * nb].reshape(n, nb); i += n * nb
        ct = y[i:i + n]; i += n
        Q = y[i:].reshape(n, n)
        fx = np.atleast_1d(f(x, t))
        A = np.atleast_2d(jac(x, t))
        AQ = A @ Q
        Gt = Gfun(x, t)
        GG = np.zeros((n, n)) if Gt is None else np.atleast_2d(Gt) @ np.atleast_2d(Gt).T
        parts = [fx, (A @ Phi).ravel()]
        if nb:
            parts.append((A @ Bt + B_zoh).ravel())
        parts += [A @ ct + fx - A @ x, (AQ + AQ.T + GG).ravel()]
        return np.concatenate(parts)

    y0 = np.concatenate([x0, np.eye(n).ravel(), np.zeros(n * nb + n + n * n)])
    if t1 == t0:
        y = y0
    else:
        y = _solve(rhs, y0, t0, t1, rtol, atol, what="segment linearization")
    i = n
    Phi = y[i:i + n * n].reshape(n, n); i += n * n
    B_int = y[i:i + n * nb].reshape(n, nb) if nb else None; i += n * nb
    c = y[i:i + n]; i += n
    Q = y[i:].reshape(n, n)
    return LinearizedArc(x1=y[:n], Phi=Phi, B_int=B_int, c=c, Q=Q)


@dataclass(frozen=True)
class ReferenceTrajectory:
    epochs: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        ep = np.asarray(self.epochs, dtype=float)
        st = np.atleast_2d(np.asarray(self.states, dtype=float))
        N = ep.size - 1
        ctrl = np.zeros((N, N_U)) if self.controls is None else np.asarray(self.controls, dtype=float)
        if N < 1 or np.any(np.diff(ep) <= 0):
            raise ValueError("epochs must be strictly increasing with at least two nodes")
        if st.shape != (N + 1, N_X) or ctrl.shape != (N, N_U):
            raise ValueError("reference shapes must be (N+1, 6) states and (N, 3) controls")
        object.__setattr__(self, "epochs", ep)
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "controls", ctrl)

    @property
    def N(self) -> int:
        return self.epochs.size - 1

    @classmethod
    def propagate(cls, model: DynamicsModel, x0: np.ndarray, epochs: np.ndarray,
                  controls: Optional[np.ndarray] = None, tol=None) -> "ReferenceTrajectory":
        """Nodes obtained by continuous propagation from ``x0`` under ``controls``."""
        epochs = np.asarray(epochs, dtype=float)
        N = epochs.size - 1
        controls = np.zeros((N, N_U)) if controls is None else np.asarray(controls, dtype=float)
        rtol, atol = tol or model.default_tolerances()
        states = [np.asarray(x0, dtype=float)]
        for k in range(N):
            x = states[-1]
            if model.control_type is ControlType.IMPULSIVE:
                x = x + B_INPUT @ controls[k]
                states.append(propagate(model, x, epochs[k], epochs[k + 1], rtol=rtol, atol=atol))
            else:
                states.append(propagate(model, x, epochs[k], epochs[k + 1], u=controls[k],
                                        rtol=rtol, atol=atol))
        return cls(epochs, np.array(states), controls)


@dataclass(frozen=True)
class DiscreteSegment:
    """x_{k+1} = A x_k + B u_k + c + G_exe w_exe + G w over one interval."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    G: np.ndarray
    G_exe: np.ndarray
    dt: float = 0.0

    def without_execution_noise(self) -> "DiscreteSegment":
        return replace(self, G_exe=np.zeros_like(self.G_exe))


def discretize_segment(model: DynamicsModel, ref: ReferenceTrajectory, k: int,
                       noise: Union[None, np.ndarray, Callable] = None,
                       gates: Optional[GatesParams] = None, maneuver: bool = True,
                       tol: Optional[tuple[float, float]] = None) -> DiscreteSegment:
    """Discrete linear system over [t_k, t_{k+1}] about the reference.

    ``noise`` is the process-noise intensity G(x, t) (array or callable).
    Execution noise is ``B_k G_exe(u*_k)``; it is zero when ``gates`` is None
    or when node ``k`` carries no maneuver.
    """
    if not 0 <= k < ref.N:
        raise IndexError(f"segment index {k} outside [0, {ref.N - 1}]")
    t0, t1 = ref.epochs[k], ref.epochs[k + 1]
    xk = ref.states[k]
    uk = ref.controls[k]
    rtol, atol = tol or model.default_tolerances()
    impulsive = model.control_type is ControlType.IMPULSIVE
    if impulsive:
        arc = integrate_linearization(model.f0, model.jacobian, xk + B_INPUT @ uk, t0, t1,
                                      G=noise, rtol=rtol, atol=atol)
        B = arc.Phi @ B_INPUT
    else:
        bu = B_INPUT @ uk
        arc = integrate_linearization(lambda x, t: model.f0(x, t) + bu, model.jacobian, xk, t0, t1,
                                      B_zoh=B_INPUT, G=noise, rtol=rtol, atol=atol)
        B = arc.B_int
    Q = arc.Q
    asym = np.linalg.norm(Q - Q.T)
    if asym > 1e-12 * max(np.linalg.norm(Q), np.finfo(float).tiny):
        raise NumericalError("integrated process-noise covariance lost symmetry")
    try:
        G = psd_factor(symmetrize(Q))
    except NumericalError as exc:
        raise NumericalError(f"segment {k}: {exc}") from exc
    if gates is not None and maneuver:
        G_exe = B @ gates_matrix(uk, gates)
    else:
        G_exe = np.zeros((N_X, N_U))
    return DiscreteSegment(A=arc.Phi, B=B, c=arc.c, G=G, G_exe=G_exe, dt=float(t1 - t0))


def discretize(model: DynamicsModel, ref: ReferenceTrajectory, noise=None, gates=None,
               maneuver_mask=None, tol=None) -> list[DiscreteSegment]:
    mask = np.ones(ref.N, dtype=bool) if maneuver_mask is None else np.asarray(maneuver_mask, bool)
    return [discretize_segment(model, ref, k, noise=noise, gates=gates, maneuver=bool(mask[k]), tol=tol)
            for k in range(ref.N)]
