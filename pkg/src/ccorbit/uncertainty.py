"""Stochastic model pieces: execution error, process noise, observations, initial spread."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor

from ._linalg import NumericalError, symmetrize

_Z_AXIS = np.array([0.0, 0.0, 1.0])
_X_AXIS = np.array([1.0, 0.0, 0.0])
_PARALLEL_TOL = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class GatesParams:
    """Gates execution-error magnitudes, 1-sigma.

    ``sigma1``/``sigma3`` are fixed magnitude/pointing errors in velocity
    units, ``sigma2`` is a dimensionless fraction of ``|u|`` and ``sigma4``
    is a pointing angle in radians.
    """

    sigma1: float = 0.0
    sigma2: float = 0.0
    sigma3: float = 0.0
    sigma4: float = 0.0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma3", "sigma4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def scaled(self, velocity_scale: float) -> "GatesParams":
        """Same model with the velocity-valued terms divided by ``velocity_scale``."""
        return GatesParams(self.sigma1 / velocity_scale, self.sigma2,
                           self.sigma3 / velocity_scale, self.sigma4)


def gates_frame(u: np.ndarray) -> np.ndarray:
    """Columns [S, E, Z] of the burn frame; identity for a zero burn."""
    u = np.asarray(u, dtype=float)
    mag = np.linalg.norm(u)
    if mag == 0.0:
        return np.eye(3)
    z = u / mag
    e = np.cross(_Z_AXIS, z)
    if np.linalg.norm(e) < _PARALLEL_TOL:
        # burn along +-z: the z-axis cross product is degenerate
        e = np.cross(_X_AXIS, z)
    e /= np.linalg.norm(e)
    s = np.cross(e, z)
    return np.column_stack([s, e, z])


def gates_matrix(u: np.ndarray, p: GatesParams) -> np.ndarray:
    """Execution-error factor ``T(u) diag(sp, sp, sm)`` so that du = G w, w ~ N(0, I3)."""
    mag2 = float(np.dot(u, u))
    sp = np.sqrt(p.sigma3**2 + p.sigma4**2 * mag2)
    sm = np.sqrt(p.sigma1**2 + p.sigma2**2 * mag2)
    return gates_frame(u) * np.array([sp, sp, sm])


def gates_envelope(rms_mag: float, p: GatesParams) -> np.ndarray:
    """Isotropic factor bounding the mean Gates covariance of burns with E|u|^2 = rms_mag^2.

    Each Gates covariance is at most (max(s1, s3)^2 + max(s2, s4)^2 |u|^2) I,
    and the bound is linear in |u|^2, so it also bounds the average.
    """
    var = max(p.sigma1, p.sigma3) ** 2 + max(p.sigma2, p.sigma4) ** 2 * float(rms_mag) ** 2
    return np.sqrt(var) * np.eye(3)


def gates_matrix_batch(U: np.ndarray, p: GatesParams) -> np.ndarray:
    """Vectorized :func:`gates_matrix` over rows of ``U`` (m, 3) -> (m, 3, 3)."""
    return np.stack([gates_matrix(u, p) for u in np.atleast_2d(U)])


def acceleration_noise(sigma_a: float, n_x: int = 6) -> np.ndarray:
    """State-independent Brownian-acceleration intensity ``[0; sigma_a I3]``."""
    G = np.zeros((n_x, 3))
    G[3:6, :] = sigma_a * np.eye(3)
    return G


@dataclass(frozen=True)
class ObservationModel:
    f_obs: Callable[[np.ndarray], np.ndarray]
    G_obs: Callable[[np.ndarray], np.ndarray]
    n_y: int
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class LinearObservation:
    C: np.ndarray
    D: np.ndarray
    c_obs: np.ndarray


@dataclass(frozen=True)
class InitialUncertainty:
    """Initial estimate mean and the two independent covariances.

    ``P_hat0`` is the dispersion of the pre-measurement estimate about the
    mean, ``P_tilde0`` the covariance of its estimation error.
    """

    mean: np.ndarray
    P_hat0: np.ndarray
    P_tilde0: np.ndarray

    def __post_init__(self):
        for name in ("P_hat0", "P_tilde0"):
            P = getattr(self, name)
            if not np.allclose(P, P.T, rtol=0, atol=1e-14 * max(1.0, np.abs(P).max())):
                raise ValueError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(symmetrize(P))[0] < -1e-12 * max(1.0, np.trace(P)):
                raise ValueError(f"{name} is not PSD")


def full_state_observation(sigma_r: float, sigma_v: float) -> ObservationModel:
    """y = x + blkdiag(sigma_r I3, sigma_v I3) w."""
    D = np.diag([sigma_r] * 3 + [sigma_v] * 3)
    return ObservationModel(
        f_obs=lambda x: np.asarray(x, dtype=float).copy(),
        G_obs=lambda x: D,
        n_y=6,
        jacobian=lambda x: np.eye(6),
    )


def range_bearing_observation(sigma_range: float, sigma_angle: float) -> ObservationModel:
    """Range, azimuth and elevation of the position relative to the origin."""

    def f(x):
        r = np.asarray(x[:3], dtype=float)
        rho = np.linalg.norm(r)
        return np.array([rho, np.arctan2(r[1], r[0]), np.arcsin(r[2] / rho)])

    def jac(x):
        rx, ry, rz = x[:3]
        rho2 = rx * rx + ry * ry + rz * rz
        rho = np.sqrt(rho2)
        rxy2 = rx * rx + ry * ry
        rxy = np.sqrt(rxy2)
        J = np.zeros((3, 6))
        J[0, :3] = np.array([rx, ry, rz]) / rho
        J[1, :3] = np.array([-ry, rx, 0.0]) / rxy2
        J[2, :3] = np.array([-rx * rz, -ry * rz, rxy2]) / (rho2 * rxy)
        return J

    D = np.diag([sigma_range, sigma_angle, sigma_angle])
    return ObservationModel(f_obs=f, G_obs=lambda x: D, n_y=3, jacobian=jac)


def _central_difference(f, x, h_rel=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = h_rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.column_stack(cols)


def linearize_observation(m: ObservationModel, x_ref: np.ndarray) -> LinearObservation:
    """Affine measurement model about ``x_ref``; falls back to central differences without a Jacobian."""
    x_ref = np.asarray(x_ref, dtype=float)
    C = m.jacobian(x_ref) if m.jacobian is not None else _central_difference(m.f_obs, x_ref)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not np.all(np.isfinite(C)):
        raise ModelError("observation Jacobian is not finite at the reference state")
    D = np.atleast_2d(np.asarray(m.G_obs(x_ref), dtype=float))
    c_obs = np.asarray(m.f_obs(x_ref), dtype=float) - C @ x_ref
    return LinearObservation(C=C, D=D, c_obs=c_obs)


def innovation_covariance(C: np.ndarray, D: np.ndarray, P_minus: np.ndarray) -> np.ndarray:
    """Covariance of the linearized innovation, ``C P C^T + D D^T``."""
    S = symmetrize(C @ P_minus @ C.T + D @ D.T)
    try:
        cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    return S
