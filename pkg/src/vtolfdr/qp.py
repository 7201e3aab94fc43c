"""Small dense convex QP with linear inequality constraints.

    minimize   0.5 x'Hx + g'x
    subject to A x <= b

``H`` must be symmetric positive definite. Problems here have a handful of
variables and a few dozen constraints, so everything is dense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


@dataclass
class QPResult:
    x: np.ndarray
    working_set: list[int]
    multipliers: np.ndarray  # length m, zero off the working set
    iterations: int
    converged: bool
    kkt_residual: float


def _null_space(M: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    if M.shape[0] == 0:
        return np.eye(M.shape[1])
    _, s, vt = np.linalg.svd(M)
    rank = int(np.sum(s > rtol * max(s[0], 1.0))) if s.size else 0
    return vt[rank:].T


def kkt_residual(H, g, A, b, x, multipliers) -> float:
    """Largest violation among stationarity, primal/dual feasibility and complementarity."""
    slack = b - A @ x
    stat = H @ x + g + A.T @ multipliers
    parts = [
        np.max(np.abs(stat)) if stat.size else 0.0,
        max(0.0, -float(np.min(slack))) if slack.size else 0.0,
        max(0.0, -float(np.min(multipliers))) if multipliers.size else 0.0,
        float(np.max(np.abs(multipliers * slack))) if slack.size else 0.0,
    ]
    return float(max(parts))


def least_violation_point(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Point minimizing the largest constraint violation ``max_i (a_i x - b_i)``.

    A negative optimum means a strictly interior point exists. Solved as an LP.
    """
    m, k = A.shape
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((m, 1))])
    bounds = [(None, None)] * k + [(-1e6, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    x = res.x[:k]
    return x, float(np.max(A @ x - b)) if m else 0.0


def solve_qp(
    H: np.ndarray,
    g: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    x0: np.ndarray,
    tol: float = 1e-9,
    max_iter: int | None = None,
) -> QPResult:
    """Primal active-set method started from a feasible ``x0``.

    Small infeasibilities in ``x0`` (below the caller's feasibility tolerance)
    are tolerated: step lengths are clamped at zero for such rows.
    """
    k = H.shape[0]
    m = A.shape[0]
    if max_iter is None:
        max_iter = 100 * max(k, 1)
    x = np.array(x0, dtype=float)
    W: list[int] = []
    mult = np.zeros(m)
    scale = 1.0 + float(np.max(np.abs(g))) if g.size else 1.0

    for it in range(1, max_iter + 1):
        grad = H @ x + g
        Z = _null_space(A[W])
        if Z.shape[1]:
            p = -Z @ np.linalg.solve(Z.T @ H @ Z, Z.T @ grad)
        else:
            p = np.zeros(k)

        if np.max(np.abs(p), initial=0.0) <= 1e-13 * scale:
            mult = np.zeros(m)
            if W:
                mu, *_ = np.linalg.lstsq(A[W].T, -grad, rcond=None)
                mult[W] = mu
                j = int(np.argmin(mu))
                if mu[j] < -tol:
                    W.pop(j)
                    continue
            return QPResult(x, W, mult, it, True, kkt_residual(H, g, A, b, x, mult))

        Ap = A @ p
        slack = b - A @ x
        alpha, block = 1.0, -1
        for i in range(m):
            if i in W or Ap[i] <= 1e-14 * (1.0 + abs(slack[i])):
                continue
            ratio = max(slack[i], 0.0) / Ap[i]
            if ratio < alpha:
                alpha, block = ratio, i
        x = x + alpha * p
        if block >= 0:
            W.append(block)

    mult = np.zeros(m)
    if W:
        mu, *_ = np.linalg.lstsq(A[W].T, -(H @ x + g), rcond=None)
        mult[W] = mu
    return QPResult(x, W, mult, max_iter, False, kkt_residual(H, g, A, b, x, mult))
