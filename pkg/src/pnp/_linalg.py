"""Shared dense linear algebra helpers (jittered Cholesky)."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, cholesky

from pnp.core import ConditioningError

# escalation policy: start at the configured jitter, multiply by 10,
# give up after 3 escalations
_MAX_ESCALATIONS = 3


def jittered_cholesky(K: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter*I with jitter escalation.

    Returns (L, jitter_used).  Raises ConditioningError if the matrix is
    still not positive definite after three tenfold escalations.
    """
    eye = np.eye(K.shape[0])
    j = float(jitter)
    for _ in range(_MAX_ESCALATIONS + 1):
        try:
            L = cholesky(K + j * eye, lower=True)
            return L, j
        except np.linalg.LinAlgError:
            j *= 10.0
        except ValueError as exc:  # non-finite entries
            raise ConditioningError(f"matrix not factorizable: {exc}") from exc
    raise ConditioningError(
        f"Cholesky failed after jitter escalation to {j / 10.0:g}"
    )


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b for a lower factor L."""
    return cho_solve((L, True), b)


def log_det_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))
