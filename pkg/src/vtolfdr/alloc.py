"""Null-space control allocation with actuator limits and failures.

A desired wrench deviation ``dw`` is met by the least-norm actuator
deviation ``B+ dw`` plus a null-space correction ``N @ lam`` that produces
no wrench. ``lam`` minimizes the weighted deviation from trim

    J = (u - u_trim)' R (u - u_trim)

subject to ``u_min <= u <= u_max``. Failed actuators are pinned at their
forced value and removed from the problem; whatever wrench they still
produce is subtracted from the request first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .qp import least_violation_point, solve_qp

RANK_RTOL = 1e-9
FEAS_TOL = 1e-9
WRENCH_ROWS = ("fx", "fy", "fz", "tx", "ty", "tz")

# Default diagonal weights per actuator kind: tilts are penalized harder
# because abrupt tilt changes load the structure.
DEFAULT_WEIGHTS = {"motor": 1.0, "tilt": 4.0, "surface": 1.0}


class AllocationError(RuntimeError):
    pass


class UnrecoverableFailureError(AllocationError):
    """Every actuator has failed; nothing is left to allocate."""


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float).reshape(3))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.torque))):
            raise ValueError("wrench components must be finite")

    @classmethod
    def from_vector(cls, v) -> "Wrench":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def __array__(self, dtype=None, copy=None):
        return self.vector if dtype is None else self.vector.astype(dtype)


def as_wrench_vector(w) -> np.ndarray:
    if isinstance(w, Wrench):
        return w.vector
    return np.asarray(w, dtype=float)


@dataclass(frozen=True)
class ActuatorLayout:
    names: tuple[str, ...]
    u_min: np.ndarray
    u_max: np.ndarray
    u_trim: np.ndarray
    rate_limit: np.ndarray  # max change per second; inf disables
    kinds: tuple[str, ...] = ()
    zero_effect: np.ndarray | None = None  # value a cut-off actuator falls to

    def __post_init__(self):
        n = len(self.names)
        if len(set(self.names)) != n:
            raise ValueError("actuator names must be unique")
        for attr in ("u_min", "u_max", "u_trim", "rate_limit"):
            v = np.asarray(getattr(self, attr), dtype=float).reshape(-1)
            if v.shape != (n,):
                raise ValueError(f"{attr} has length {v.size}, expected {n}")
            object.__setattr__(self, attr, v)
        kinds = tuple(self.kinds) if self.kinds else ("motor",) * n
        if len(kinds) != n:
            raise ValueError("kinds must match names")
        object.__setattr__(self, "kinds", kinds)
        ze = np.zeros(n) if self.zero_effect is None else np.asarray(self.zero_effect, dtype=float).reshape(n)
        object.__setattr__(self, "zero_effect", ze)
        if np.any(self.u_min > self.u_trim) or np.any(self.u_trim > self.u_max):
            raise ValueError("trim must satisfy u_min <= u_trim <= u_max")
        if np.any(self.rate_limit <= 0):
            raise ValueError("rate limits must be positive")

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def default_weights(self) -> np.ndarray:
        return np.array([DEFAULT_WEIGHTS.get(k, 1.0) for k in self.kinds])

    def subset(self, idx: Sequence[int]) -> "ActuatorLayout":
        idx = list(idx)
        return ActuatorLayout(
            tuple(self.names[i] for i in idx),
            self.u_min[idx], self.u_max[idx], self.u_trim[idx], self.rate_limit[idx],
            tuple(self.kinds[i] for i in idx), self.zero_effect[idx],
        )

    def with_trim(self, u_trim) -> "ActuatorLayout":
        return replace(self, u_trim=np.asarray(u_trim, dtype=float))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names), "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
            "u_trim": self.u_trim.tolist(), "rate_limit": [float(r) if np.isfinite(r) else None for r in self.rate_limit],
            "kinds": list(self.kinds), "zero_effect": self.zero_effect.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActuatorLayout":
        n = len(d["names"])
        rl = d.get("rate_limit")
        rl = np.full(n, np.inf) if rl is None else np.array([np.inf if r is None else r for r in rl], dtype=float)
        return cls(
            tuple(d["names"]), np.asarray(d["u_min"], float), np.asarray(d["u_max"], float),
            np.asarray(d.get("u_trim", np.zeros(n)), float), rl, tuple(d.get("kinds", ())),
            None if d.get("zero_effect") is None else np.asarray(d["zero_effect"], float),
        )


@dataclass(frozen=True)
class EffectivenessMatrix:
    B: np.ndarray
    linearization_point: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != 6:
            raise ValueError(f"effectiveness matrix must be 6 x n, got {B.shape}")
        if not np.all(np.isfinite(B)):
            raise ValueError("effectiveness matrix has non-finite entries")
        object.__setattr__(self, "B", B)


@dataclass(frozen=True)
class ActuatorFailure:
    """``mode`` is ``"cutoff"`` or ``"locked"``; a lock without ``value`` holds the current position."""

    index: int
    mode: str
    value: float | None = None

    def __post_init__(self):
        if self.mode not in ("cutoff", "locked"):
            raise ValueError(f"unknown failure mode {self.mode!r}")


@dataclass(frozen=True)
class FailureSet:
    entries: tuple[ActuatorFailure, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        idx = [e.index for e in self.entries]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate actuator index in failure set")

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    def forced_values(self, layout: ActuatorLayout, u_current=None) -> dict[int, float]:
        out = {}
        for e in self.entries:
            if not 0 <= e.index < layout.n:
                raise IndexError(f"failure index {e.index} outside 0..{layout.n - 1}")
            if e.mode == "cutoff":
                v = float(layout.zero_effect[e.index])
            elif e.value is not None:
                v = float(e.value)
            elif u_current is not None:
                v = float(u_current[e.index])
            else:
                raise ValueError(f"lock of actuator {e.index} needs a value or the current setpoint")
            if not layout.u_min[e.index] - 1e-12 <= v <= layout.u_max[e.index] + 1e-12:
                raise ValueError(f"forced value {v} of actuator {e.index} outside its physical range")
            out[e.index] = v
        return out


@dataclass
class AllocationResult:
    u_sp: np.ndarray
    lam: np.ndarray
    achieved: Wrench
    wrench_residual: float
    iterations: int
    saturated: tuple[str, ...]
    fallback: bool = False
    cost: float = 0.0
    kkt_residual: float = 0.0
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "u_sp": self.u_sp.tolist(), "lambda": self.lam.tolist(),
            "achieved": self.achieved.vector.tolist(), "wrench_residual": self.wrench_residual,
            "iterations": self.iterations, "saturated": list(self.saturated), "fallback": self.fallback,
            "cost": self.cost, "kkt_residual": self.kkt_residual, "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def linearize_effectiveness(
    wrench_model: Callable[[np.ndarray], object], u_trim, steps=1e-4
) -> EffectivenessMatrix:
    """Central-difference Jacobian of ``wrench_model`` at ``u_trim``."""
    u0 = np.asarray(u_trim, dtype=float)
    h = np.broadcast_to(np.asarray(steps, dtype=float), u0.shape)
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    cols = []
    for j in range(u0.size):
        e = np.zeros_like(u0)
        e[j] = h[j]
        wp = as_wrench_vector(wrench_model(u0 + e))
        wm = as_wrench_vector(wrench_model(u0 - e))
        if not (np.all(np.isfinite(wp)) and np.all(np.isfinite(wm))):
            raise ValueError(f"wrench model is not finite around actuator {j}")
        cols.append((wp - wm) / (2.0 * h[j]))
    B = np.column_stack(cols) if cols else np.zeros((6, 0))
    return EffectivenessMatrix(B, u0.copy())


def _svd(B: np.ndarray):
    B = np.asarray(B, dtype=float)
    U, s, Vt = np.linalg.svd(B, full_matrices=True)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    return U, s, Vt, rank


def least_norm(B, dw) -> np.ndarray:
    """Pseudo-inverse solution; singular values below ``1e-9 * s_max`` are dropped."""
    B = np.asarray(B, dtype=float)
    dw = as_wrench_vector(dw).reshape(-1)
    if B.shape[1] == 0:
        return np.zeros(0)
    U, s, Vt, r = _svd(B)
    return Vt[:r].T @ ((U[:, :r].T @ dw) / s[:r])


def null_basis(B) -> np.ndarray:
    """Orthonormal basis of the null space of ``B`` (n x (n - rank))."""
    B = np.asarray(B, dtype=float)
    if B.shape[1] == 0:
        return np.zeros((0, 0))
    _, _, Vt, r = _svd(B)
    return Vt[r:].T.copy()


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


def _weights(R, layout: ActuatorLayout) -> np.ndarray:
    if R is None:
        return layout.default_weights()
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        if R.shape != (layout.n, layout.n):
            raise ValueError(f"weight matrix has shape {R.shape}, expected {(layout.n, layout.n)}")
        if np.any(R - np.diag(np.diag(R))):
            raise ValueError("weight matrix must be diagonal")
        R = np.diag(R)
    if R.shape != (layout.n,):
        raise ValueError(f"weights have shape {R.shape}, expected {(layout.n,)}")
    if np.any(R <= 0) or not np.all(np.isfinite(R)):
        raise ValueError("weights must be positive and finite")
    return R


def solve_allocation(
    B,
    dw,
    layout: ActuatorLayout,
    R=None,
    u_prev=None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> AllocationResult:
    """Allocate ``dw`` over ``layout`` (no failures).

    ``u_prev`` warm-starts the null-space search from its projection onto the
    current solution set. ``bounds`` overrides the layout box (used for rate
    limiting). If no feasible ``lam`` exists, the least-violating setpoint is
    clipped into the box and ``fallback`` is set.
    """
    B = np.asarray(B, dtype=float)
    dw = as_wrench_vector(dw).reshape(-1)
    if B.ndim != 2 or B.shape[1] != layout.n:
        raise ValueError(f"B has {B.shape[1] if B.ndim == 2 else '?'} columns, layout has {layout.n} actuators")
    if dw.shape != (B.shape[0],):
        raise ValueError(f"wrench request has shape {dw.shape}, expected {(B.shape[0],)}")
    w = _weights(R, layout)
    lo_abs, hi_abs = (layout.u_min, layout.u_max) if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    trim = layout.u_trim
    lo, hi = lo_abs - trim, hi_abs - trim

    u_ln = least_norm(B, dw)
    N = null_basis(B)
    k = N.shape[1]
    A = np.vstack([N, -N])
    b = np.concatenate([hi - u_ln, u_ln - lo])
    empty_box = bool(np.any(lo_abs > hi_abs))

    def violation(lam):
        return float(np.max(A @ lam - b)) if A.size else float(np.max(np.concatenate([u_ln - hi, lo - u_ln]), initial=0.0))

    iterations, kkt, converged, fallback = 0, 0.0, True, False
    if k == 0:
        lam = np.zeros(0)
        fallback = empty_box or violation(lam) > FEAS_TOL
    else:
        H = 2.0 * (N.T * w) @ N
        H = 0.5 * (H + H.T)
        g = 2.0 * N.T @ (w * u_ln)
        lam_unc = np.linalg.solve(H, -g)
        start = None
        if not empty_box:
            candidates = [lam_unc]
            if u_prev is not None:
                candidates.append(N.T @ (np.asarray(u_prev, float) - trim))
            candidates.append(np.zeros(k))
            for c in candidates:
                if violation(c) <= 0.0:
                    start = c
                    break
            if start is None:
                c = _alternating_projection(N, u_ln, lo, hi, candidates[-1 if u_prev is None else 1])
                if violation(c) <= 0.0:
                    start = c
        if start is None:
            start, worst = least_violation_point(A, b)
            fallback = empty_box or worst > FEAS_TOL
        if fallback:
            lam = start
        else:
            res = solve_qp(H, g, A, b, start, tol=FEAS_TOL, max_iter=100 * k)
            lam, iterations, kkt, converged = res.x, res.iterations, res.kkt_residual, res.converged

    du = u_ln + (N @ lam if k else 0.0)
    u_sp = np.clip(trim + du, lo_abs, hi_abs) if not empty_box else np.clip(trim + du, layout.u_min, layout.u_max)
    achieved = B @ (u_sp - trim)
    resid = float(np.linalg.norm(achieved - dw))
    sat = tuple(
        layout.names[i] for i in range(layout.n)
        if abs(u_sp[i] - lo_abs[i]) <= 1e-12 or abs(u_sp[i] - hi_abs[i]) <= 1e-12
    )
    d = u_sp - trim
    return AllocationResult(
        u_sp=u_sp, lam=lam, achieved=Wrench.from_vector(_pad6(achieved)), wrench_residual=resid,
        iterations=iterations, saturated=sat, fallback=fallback, cost=float(d @ (w * d)),
        kkt_residual=kkt, converged=converged,
    )


def _alternating_projection(N, u_ln, lo, hi, lam, sweeps: int = 30) -> np.ndarray:
    """Cheap search for a point of the null-space slice inside the box.

    Alternates between clipping into a slightly shrunken box and projecting
    back onto the affine solution set; the caller checks the result.
    """
    margin = 1e-9 * (1.0 + np.abs(lo) + np.abs(hi))
    lo_s, hi_s = lo + np.minimum(margin, 0.5 * (hi - lo)), hi - np.minimum(margin, 0.5 * (hi - lo))
    for _ in range(sweeps):
        du = u_ln + N @ lam
        clipped = np.clip(du, lo_s, hi_s)
        if np.array_equal(clipped, du):
            break
        lam = N.T @ (clipped - u_ln)
    return lam


def _pad6(v: np.ndarray) -> np.ndarray:
    if v.size == 6:
        return v
    out = np.zeros(6)
    out[: v.size] = v
    return out


@dataclass
class Reconfiguration:
    """Reduced problem after removing failed actuators."""

    B_red: np.ndarray
    dw_adj: np.ndarray
    layout_red: ActuatorLayout
    healthy: list[int]
    forced: dict[int, float]
    n: int = field(default=0)

    def reinflate(self, u_red) -> np.ndarray:
        u = np.empty(self.n)
        u[self.healthy] = u_red
        for i, v in self.forced.items():
            u[i] = v
        return u

    def reduce(self, u) -> np.ndarray:
        return np.asarray(u, dtype=float)[self.healthy]


def reconfigure_for_failure(B, dw, layout: ActuatorLayout, failures: FailureSet | None, u_current=None) -> Reconfiguration:
    """Delete failed columns and subtract the wrench the failed actuators still produce."""
    B = np.asarray(B, dtype=float)
    dw = as_wrench_vector(dw).reshape(-1)
    failures = failures or FailureSet()
    forced = failures.forced_values(layout, u_current)
    healthy = [i for i in range(layout.n) if i not in forced]
    if not healthy:
        raise UnrecoverableFailureError("all actuators have failed")
    dw_adj = dw.copy()
    for i, v in forced.items():
        dw_adj = dw_adj - B[:, i] * (v - layout.u_trim[i])
    return Reconfiguration(B[:, healthy], dw_adj, layout.subset(healthy), healthy, forced, layout.n)


def rate_limited_bounds(layout: ActuatorLayout, u_prev, dt: float) -> tuple[np.ndarray, np.ndarray]:
    u_prev = np.asarray(u_prev, dtype=float)
    step = layout.rate_limit * dt
    return np.maximum(layout.u_min, u_prev - step), np.minimum(layout.u_max, u_prev + step)


def allocate(
    B,
    dw,
    layout: ActuatorLayout,
    R=None,
    failures: FailureSet | None = None,
    u_prev=None,
    dt: float | None = None,
    row_mask: Iterable[bool] | None = None,
) -> AllocationResult:
    """Failure-aware allocation: reconfigure, solve the reduced problem, reinflate.

    With ``u_prev`` and ``dt`` the box is shrunk to what each actuator can
    reach within ``dt`` at its rate limit. ``row_mask`` selects which wrench
    rows are enforced.
    """
    B = np.asarray(B, dtype=float)
    dw = as_wrench_vector(dw).reshape(-1)
    if B.shape != (dw.size, layout.n):
        raise ValueError(f"B has shape {B.shape}, expected {(dw.size, layout.n)}")
    w_full = _weights(R, layout)
    rows = np.ones(dw.size, dtype=bool) if row_mask is None else np.asarray(list(row_mask), dtype=bool)
    if rows.shape != dw.shape:
        raise ValueError("row_mask must have one entry per wrench row")

    rc = reconfigure_for_failure(B, dw, layout, failures, u_prev)
    bounds = None
    if u_prev is not None and dt is not None:
        lo, hi = rate_limited_bounds(layout, u_prev, dt)
        bounds = (lo[rc.healthy], hi[rc.healthy])
    res = solve_allocation(
        rc.B_red[rows], rc.dw_adj[rows], rc.layout_red, w_full[rc.healthy],
        None if u_prev is None else rc.reduce(u_prev), bounds,
    )
    u_sp = rc.reinflate(res.u_sp)
    d = u_sp - layout.u_trim
    achieved = B @ d
    sat = tuple(layout.names[i] for i in rc.healthy if layout.names[i] in res.saturated)
    return AllocationResult(
        u_sp=u_sp, lam=res.lam, achieved=Wrench.from_vector(_pad6(achieved)),
        wrench_residual=float(np.linalg.norm((achieved - dw)[rows])), iterations=res.iterations,
        saturated=sat, fallback=res.fallback, cost=float(d @ (w_full * d)),
        kkt_residual=res.kkt_residual, converged=res.converged,
    )
