"""Reference solvers used by the tests; deliberately naive and independent of the package."""

import itertools

import numpy as np


def box_qp_enumerate(B, dw, R, lo, hi, tol=1e-9):
    """Exact min d'Rd s.t. B d = B B+ dw, lo <= d <= hi, by trying every active set.

    Each actuator is free, at its lower bound or at its upper bound (3^n
    combinations). For a fixed pattern the equality-constrained problem is
    solved from its KKT system; the cheapest feasible candidate wins.
    Returns ``(cost, d)`` or ``(inf, None)`` when the problem is infeasible.
    """
    B = np.asarray(B, float)
    R = np.asarray(R, float)
    n = B.shape[1]
    target = B @ (np.linalg.pinv(B) @ np.asarray(dw, float))
    best, arg = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        d = np.zeros(n)
        free = [i for i, p in enumerate(pattern) if p == 0]
        for i, p in enumerate(pattern):
            if p == 1:
                d[i] = lo[i]
            elif p == 2:
                d[i] = hi[i]
        rhs = target - B @ d
        if free:
            Bf = B[:, free]
            m = len(free)
            K = np.zeros((m + B.shape[0], m + B.shape[0]))
            K[:m, :m] = 2.0 * np.diag(R[free])
            K[:m, m:] = Bf.T
            K[m:, :m] = Bf
            sol, *_ = np.linalg.lstsq(K, np.concatenate([np.zeros(m), rhs]), rcond=None)
            d[free] = sol[:m]
        if np.linalg.norm(B @ d - target) > 1e-9 * (1.0 + np.linalg.norm(target)):
            continue
        if np.any(d < lo - tol) or np.any(d > hi + tol):
            continue
        cost = float(d @ (R * d))
        if cost < best:
            best, arg = cost, d
    return best, arg


def grid_qp(B, dw, R, lo, hi, points=201):
    """Coarse cross-check for two-dimensional null spaces: scan a grid of the
    null-space coefficients, keep feasible points, return the best cost."""
    B = np.asarray(B, float)
    u_ln = np.linalg.pinv(B) @ np.asarray(dw, float)
    _, s, vt = np.linalg.svd(B)
    r = int(np.sum(s > 1e-9 * s[0]))
    N = vt[r:].T
    assert N.shape[1] == 2
    span = float(np.max(np.abs(np.concatenate([lo, hi]))) + np.linalg.norm(u_ln)) * 1.5
    g = np.linspace(-span, span, points)
    L1, L2 = np.meshgrid(g, g, indexing="ij")
    lam = np.stack([L1.ravel(), L2.ravel()])
    D = u_ln[:, None] + N @ lam
    ok = np.all((D >= lo[:, None]) & (D <= hi[:, None]), axis=0)
    if not ok.any():
        return np.inf
    cost = np.sum(R[:, None] * D[:, ok] ** 2, axis=0)
    return float(cost.min())


def random_rank2_instance(rng, n):
    """Feasible box QP with an n-column, rank-2 B; returns (B, dw, R, layout pieces)."""
    B = rng.standard_normal((6, 2)) @ rng.standard_normal((2, n))
    trim = rng.uniform(-0.5, 0.5, n)
    u_feas = trim + rng.uniform(-1.0, 1.0, n)
    u_min = np.minimum(trim, u_feas) - rng.uniform(0.0, 0.8, n)
    u_max = np.maximum(trim, u_feas) + rng.uniform(0.0, 0.8, n)
    dw = B @ (u_feas - trim)
    R = rng.uniform(0.5, 4.0, n)
    return B, dw, R, trim, u_min, u_max
