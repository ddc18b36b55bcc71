"""A-priori Kalman filter schedule along the reference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._linalg import NumericalError, min_eig_ratio, symmetrize
from .dynamics import DiscreteSegment
from .uncertainty import InitialUncertainty, LinearObservation, innovation_covariance

PSD_TOL = 1e-10


@dataclass(frozen=True)
class FilterSchedule:
    """Per-node gains and covariances, arrays indexed by node k = 0..N."""

    L: np.ndarray          # (N+1, n_x, n_y)
    P_minus: np.ndarray    # (N+1, n_x, n_x) prior estimation-error covariance
    P_plus: np.ndarray     # (N+1, n_x, n_x) posterior estimation-error covariance
    P_y: np.ndarray        # (N+1, n_y, n_y) innovation covariance
    measurement_mask: np.ndarray

    @property
    def N(self) -> int:
        return self.L.shape[0] - 1


def kalman_gain(P_minus: np.ndarray, C: np.ndarray, D: np.ndarray) -> np.ndarray:
    """L = P C^T (C P C^T + D D^T)^-1 via a Cholesky solve."""
    S = symmetrize(C @ P_minus @ C.T + D @ D.T)
    try:
        fac = cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc
    return cho_solve(fac, C @ P_minus).T


def joseph_update(P_minus: np.ndarray, L: np.ndarray, C: np.ndarray, D: np.ndarray) -> np.ndarray:
    IKC = np.eye(P_minus.shape[0]) - L @ C
    LD = L @ D
    return symmetrize(IKC @ P_minus @ IKC.T + LD @ LD.T)


def build_filter_schedule(segments: Sequence[DiscreteSegment], obs: Sequence[LinearObservation],
                          init: InitialUncertainty,
                          measurement_mask: Optional[Sequence[bool]] = None) -> FilterSchedule:
    """Run the covariance recursion of a linear Kalman filter.

    Measurements are processed at nodes where ``measurement_mask`` is true
    (Joseph-form update); elsewhere the gain is zero and the posterior
    equals the prior. The innovation covariance is reported at every node.
    """
    N = len(segments)
    if len(obs) != N + 1:
        raise ValueError(f"need {N + 1} observation linearizations, got {len(obs)}")
    mask = np.ones(N + 1, dtype=bool) if measurement_mask is None else np.asarray(measurement_mask, bool)
    if mask.shape != (N + 1,):
        raise ValueError("measurement_mask must have one entry per node")
    n_x = init.P_tilde0.shape[0]
    n_y = obs[0].C.shape[0]
    L = np.zeros((N + 1, n_x, n_y))
    Pm = np.zeros((N + 1, n_x, n_x))
    Pp = np.zeros((N + 1, n_x, n_x))
    Py = np.zeros((N + 1, n_y, n_y))
    P = symmetrize(np.asarray(init.P_tilde0, dtype=float))
    for k in range(N + 1):
        if k > 0:
            s = segments[k - 1]
            P = symmetrize(s.A @ Pp[k - 1] @ s.A.T + s.G_exe @ s.G_exe.T + s.G @ s.G.T)
        Pm[k] = P
        o = obs[k]
        Py[k] = innovation_covariance(o.C, o.D, P)
        if mask[k]:
            L[k] = kalman_gain(P, o.C, o.D)
            Pp[k] = joseph_update(P, L[k], o.C, o.D)
        else:
            Pp[k] = P
        if np.trace(Pp[k]) > 0 and min_eig_ratio(Pp[k]) < -PSD_TOL:
            raise NumericalError(f"estimation covariance lost PSD at node {k}")
    return FilterSchedule(L=L, P_minus=Pm, P_plus=Pp, P_y=Py, measurement_mask=mask)
