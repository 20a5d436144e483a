"""Small dense linear-algebra helpers shared by the model modules."""
from __future__ import annotations

import logging

import numpy as np
from scipy import linalg

from .errors import NumericalError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; one retry with a 1e-10*trace ridge, then fail."""
    a = sym(np.asarray(a, dtype=float))
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass
    ridge = 1e-10 * abs(np.trace(a))
    log.debug("retrying Cholesky of %s with ridge %g", what, ridge)
    try:
        return linalg.cholesky(a + ridge * np.eye(len(a)), lower=True)
    except (linalg.LinAlgError, ValueError):
        raise NumericalError(f"{what} is not positive definite") from None


def logdet_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def inv_logdet(a: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of a symmetric positive-definite matrix."""
    c = cholesky(a, what)
    if c.shape[0] == 0:
        return c.copy(), 0.0
    ci = linalg.solve_triangular(c, np.eye(len(c)), lower=True)
    return ci.T @ ci, logdet_chol(c)


def inv_pd(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    return inv_logdet(a, what)[0]


def solve_pd(a: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    c = cholesky(a, what)
    return linalg.cho_solve((c, True), b)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs
