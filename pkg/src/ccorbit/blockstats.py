"""Stacked block operators and the affine state/control statistics they induce.

Node k runs over 0..N, controls over 0..N-1. With nominal controls Ubar and
block-diagonal feedback gains K acting on the estimator-driven process Z,

    Xbar        = A xbar0 + B Ubar + C
    Phat_k^1/2  = E_xk (I + B K) S^1/2,       S^1/2 = [A Phat0^1/2, L P_Y^1/2]
    P_k^1/2     = [Phat_k^1/2, Ptilde_k^1/2]
    P_uk^1/2    = E_uk K S^1/2

Extractors are index slices; nothing here materializes E_xk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._linalg import psd_factor
from .dynamics import DiscreteSegment
from .navigation import FilterSchedule


@dataclass(frozen=True)
class BlockOperators:
    A: np.ndarray        # ((N+1) nx, nx)
    B: np.ndarray        # ((N+1) nx, N nu)
    C: np.ndarray        # ((N+1) nx,)
    L: np.ndarray        # ((N+1) nx, (N+1) ny)
    L_Z: np.ndarray      # same shape, first block column zero
    P_Y_sqrt: np.ndarray  # block diagonal innovation factor
    S_sqrt: np.ndarray   # ((N+1) nx, nx + (N+1) ny)
    Phi: np.ndarray      # (N+1, N+1, nx, nx) transition Phi[k, j] for j <= k
    P_tilde_sqrt: np.ndarray  # (N+1, nx, nx) posterior estimation-error factors
    n_x: int
    n_u: int
    n_y: int
    N: int

    def sx(self, k: int) -> slice:
        return slice(k * self.n_x, (k + 1) * self.n_x)

    def su(self, k: int) -> slice:
        return slice(k * self.n_u, (k + 1) * self.n_u)

    def sy(self, k: int) -> slice:
        return slice(k * self.n_y, (k + 1) * self.n_y)

    def x_block(self, X: np.ndarray, k: int) -> np.ndarray:
        """E_xk applied to a stacked state vector (or row block of a matrix)."""
        return X[self.sx(k)]

    def u_block(self, U: np.ndarray, k: int) -> np.ndarray:
        return U[self.su(k)]

    def B_block(self, k: int, j: int) -> np.ndarray:
        """Response of x_k to u_j (zero for j >= k)."""
        return self.B[self.sx(k), self.su(j)]

    def S_rows(self, k: int) -> np.ndarray:
        """Block row k of S^1/2: the factor of the open-loop estimate dispersion at node k."""
        return self.S_sqrt[self.sx(k)]


@dataclass(frozen=True)
class Policy:
    """Nominal controls ``ubar`` (N, nu) and per-node gains ``K`` (N, nu, nx)."""

    ubar: np.ndarray
    K: np.ndarray
    maneuver_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.maneuver_mask, dtype=bool)
        object.__setattr__(self, "maneuver_mask", mask)
        if np.any(self.ubar[~mask] != 0) or np.any(self.K[~mask] != 0):
            raise ValueError("policy has nonzero control at a node without maneuver")

    @classmethod
    def zero(cls, N: int, n_u: int = 3, n_x: int = 6, maneuver_mask=None) -> "Policy":
        mask = np.ones(N, dtype=bool) if maneuver_mask is None else maneuver_mask
        return cls(np.zeros((N, n_u)), np.zeros((N, n_u, n_x)), mask)

    @property
    def U(self) -> np.ndarray:
        return self.ubar.ravel()

    def K_block(self) -> np.ndarray:
        """Stacked gain matrix, (N nu) x ((N+1) nx), last block column zero."""
        N, n_u, n_x = self.K.shape
        Kb = np.zeros((N * n_u, (N + 1) * n_x))
        for k in range(N):
            Kb[k * n_u:(k + 1) * n_u, k * n_x:(k + 1) * n_x] = self.K[k]
        return Kb


def transition_table(segments: Sequence[DiscreteSegment]) -> np.ndarray:
    """Phi[k, j] = A_{k-1} ... A_j, identity on the diagonal, zero above it."""
    N = len(segments)
    n = segments[0].A.shape[0]
    Phi = np.zeros((N + 1, N + 1, n, n))
    for j in range(N + 1):
        Phi[j, j] = np.eye(n)
        for k in range(j + 1, N + 1):
            Phi[k, j] = segments[k - 1].A @ Phi[k - 1, j]
    return Phi


def assemble_block_operators(segments: Sequence[DiscreteSegment], schedule: FilterSchedule,
                             P_hat0: np.ndarray) -> BlockOperators:
    """Build the stacked operators of the filtered closed-loop dynamics."""
    N = len(segments)
    if schedule.N != N:
        raise ValueError(f"schedule has {schedule.N} intervals, segments {N}")
    n_x = segments[0].A.shape[0]
    n_u = segments[0].B.shape[1]
    n_y = schedule.L.shape[2]
    if schedule.L.shape[1] != n_x or P_hat0.shape != (n_x, n_x):
        raise ValueError("dimension mismatch between segments, schedule and initial covariance")
    Phi = transition_table(segments)
    A = np.zeros(((N + 1) * n_x, n_x))
    B = np.zeros(((N + 1) * n_x, N * n_u))
    C = np.zeros((N + 1) * n_x)
    L = np.zeros(((N + 1) * n_x, (N + 1) * n_y))
    for k in range(N + 1):
        rk = slice(k * n_x, (k + 1) * n_x)
        A[rk] = Phi[k, 0]
        for j in range(k):
            B[rk, j * n_u:(j + 1) * n_u] = Phi[k, j + 1] @ segments[j].B
            C[rk] += Phi[k, j + 1] @ segments[j].c
        for j in range(k + 1):
            L[rk, j * n_y:(j + 1) * n_y] = Phi[k, j] @ schedule.L[j]
    L_Z = L.copy()
    L_Z[:, :n_y] = 0.0
    P_Y_sqrt = np.zeros(((N + 1) * n_y, (N + 1) * n_y))
    for k in range(N + 1):
        P_Y_sqrt[k * n_y:(k + 1) * n_y, k * n_y:(k + 1) * n_y] = psd_factor(schedule.P_y[k])
    S_sqrt = np.hstack([A @ psd_factor(P_hat0), L @ P_Y_sqrt])
    P_tilde_sqrt = np.stack([psd_factor(P) for P in schedule.P_plus])
    return BlockOperators(A=A, B=B, C=C, L=L, L_Z=L_Z, P_Y_sqrt=P_Y_sqrt, S_sqrt=S_sqrt, Phi=Phi,
                          P_tilde_sqrt=P_tilde_sqrt, n_x=n_x, n_u=n_u, n_y=n_y, N=N)


def state_mean(blocks: BlockOperators, xbar0: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Stacked mean of the state estimate, A xbar0 + B U + C."""
    return blocks.A @ xbar0 + blocks.B @ np.ravel(U) + blocks.C


def sqrt_covariances(blocks: BlockOperators, K: np.ndarray, k: int):
    """Wide covariance factors at node k for the stacked gain matrix ``K``.

    Returns ``(Phat_k^1/2, P_k^1/2, P_uk^1/2)``; the control factor is None
    at the terminal node. ``K`` may also be a :class:`Policy`.
    """
    if isinstance(K, Policy):
        K = K.K_block()
    if not 0 <= k <= blocks.N:
        raise IndexError(f"node {k} outside [0, {blocks.N}]")
    KS = K @ blocks.S_sqrt
    Phat = blocks.S_rows(k) + blocks.B[blocks.sx(k)] @ KS
    P = np.hstack([Phat, blocks.P_tilde_sqrt[k]])
    Pu = KS[blocks.su(k)] if k < blocks.N else None
    return Phat, P, Pu


def compressed_rows(blocks: BlockOperators, nodes: Sequence[int]) -> list[np.ndarray]:
    """Square Gram factor of the stacked S^1/2 block rows of ``nodes``, split per node.

    For any coefficients M_i, sum_i M_i F_i has the same Gram matrix as
    sum_i M_i S_rows(nodes[i]); this keeps downstream LMIs narrow.
    """
    W = np.vstack([blocks.S_rows(j) for j in nodes])
    F = psd_factor(W @ W.T, drop_zero=True)
    n = blocks.n_x
    return [F[i * n:(i + 1) * n] for i in range(len(nodes))]


def open_loop_dispersion(blocks: BlockOperators) -> np.ndarray:
    """S = S^1/2 S^1/2^T, the estimate covariance under zero feedback."""
    return blocks.S_sqrt @ blocks.S_sqrt.T


def dispersion_covariance(blocks: BlockOperators, K: np.ndarray) -> np.ndarray:
    """Full stacked Cov(Xhat) = (I + B K) S (I + B K)^T."""
    if isinstance(K, Policy):
        K = K.K_block()
    M = np.eye(blocks.B.shape[0]) + blocks.B @ K
    return M @ open_loop_dispersion(blocks) @ M.T
