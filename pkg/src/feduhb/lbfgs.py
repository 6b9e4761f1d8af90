"""Limited-memory BFGS operators built from stored curvature pairs.

``two_loop`` applies the inverse-Hessian approximation ``H``; ``hessian_vector``
applies the Hessian approximation ``B`` through the compact representation of
Byrd, Nocedal and Schnabel. Both start from the same scaled identity, so
``B @ (H @ v) == v`` up to rounding, which the tests use as a cross-check.
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]


def filter_pairs(pairs: Sequence[Pair]) -> Tuple[List[Pair], int]:
    """Drop pairs with non-positive curvature ``s^T y``; returns (kept, n_skipped)."""
    kept, skipped = [], 0
    for s, y in pairs:
        if float(s @ y) > 0.0:
            kept.append((s, y))
        else:
            skipped += 1
    if skipped:
        logger.debug("skipped %d curvature pairs with s^T y <= 0", skipped)
    return kept, skipped


def _initial_scale(pairs: Sequence[Pair]) -> float:
    """``gamma = s^T y / y^T y`` of the newest pair (1 with no pairs)."""
    if not pairs:
        return 1.0
    s, y = pairs[-1]
    return float(s @ y) / float(y @ y)


def two_loop(pairs: Sequence[Pair], v) -> np.ndarray:
    """Inverse-Hessian approximation times ``v``; pairs ordered oldest first."""
    q = np.array(v, dtype=np.float64)
    if not pairs:
        return q
    rho = [1.0 / float(s @ y) for s, y in pairs]
    alpha = [0.0] * len(pairs)
    for i in range(len(pairs) - 1, -1, -1):
        s, y = pairs[i]
        alpha[i] = rho[i] * float(s @ q)
        q -= alpha[i] * y
    r = _initial_scale(pairs) * q
    for i, (s, y) in enumerate(pairs):
        b = rho[i] * float(y @ r)
        r += (alpha[i] - b) * s
    return r


def hessian_vector(pairs: Sequence[Pair], v) -> np.ndarray:
    """Hessian approximation times ``v`` via the compact L-BFGS form.

    ``B = sigma I - [sigma S, Y] M^{-1} [sigma S^T; Y^T]`` with
    ``M = [[sigma S^T S, Lo], [Lo^T, -D]]``, ``Lo`` the strictly lower part of
    ``S^T Y`` and ``D`` its diagonal.
    """
    v = np.asarray(v, dtype=np.float64)
    if not pairs:
        return v.copy()
    S = np.column_stack([s for s, _ in pairs])
    Y = np.column_stack([y for _, y in pairs])
    sigma = 1.0 / _initial_scale(pairs)
    SY = S.T @ Y
    Lo = np.tril(SY, k=-1)
    D = np.diag(np.diag(SY))
    M = np.block([[sigma * (S.T @ S), Lo], [Lo.T, -D]])
    rhs = np.concatenate([sigma * (S.T @ v), Y.T @ v])
    coef = np.linalg.solve(M, rhs)
    m = len(pairs)
    return sigma * v - (sigma * (S @ coef[:m]) + Y @ coef[m:])
