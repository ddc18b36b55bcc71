"""Small dense linear-algebra helpers shared across modules."""

from __future__ import annotations

import numpy as np


class NumericalError(ArithmeticError):
    """A matrix that must be PSD/PD (or finite) is not."""


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def psd_factor(P: np.ndarray, clip: float = 1e-12, drop_zero: bool = False) -> np.ndarray:
    """Return F with F @ F.T == P for a symmetric PSD matrix P.

    Eigenvalues in [-clip * scale, 0) are zeroed; anything more negative
    raises. With ``drop_zero`` the columns belonging to (numerically) zero
    eigenvalues are removed, giving a thinner factor with the same Gram.
    """
    P = symmetrize(np.asarray(P, dtype=float))
    if P.size == 0:
        return np.zeros_like(P)
    if not np.all(np.isfinite(P)):
        raise NumericalError("non-finite entries in covariance")
    lam, V = np.linalg.eigh(P)
    scale = max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    if lam[0] < -clip * scale:
        raise NumericalError(f"matrix is not PSD (min eigenvalue {lam[0]:.3e}, scale {scale:.3e})")
    lam = np.where(lam > 0.0, lam, 0.0)
    if drop_zero:
        keep = lam > 1e-14 * scale
        if not np.any(keep):
            return np.zeros((P.shape[0], 1))
        lam, V = lam[keep], V[:, keep]
    return V * np.sqrt(lam)


def gram(F: np.ndarray) -> np.ndarray:
    return F @ F.T


def min_eig_ratio(P: np.ndarray) -> float:
    """Smallest eigenvalue of P relative to its trace (PSD health check)."""
    P = symmetrize(P)
    tr = float(np.trace(P))
    lam = float(np.linalg.eigvalsh(P)[0])
    return lam / tr if tr > 0 else lam


def blkdiag(*blocks: np.ndarray) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out
