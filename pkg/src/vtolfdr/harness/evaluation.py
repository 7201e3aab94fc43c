"""Recovery metrics computed from telemetry logs."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

SETPOINT_PREFIX = "u_sp_"


def command_columns(log: Mapping[str, np.ndarray]) -> list[str]:
    return [c for c in log if c.startswith(SETPOINT_PREFIX)]


def convergence_time(
    log: Mapping[str, np.ndarray],
    injection_time: float,
    band: float = 0.05,
    floor: float = 0.1,
    columns: Sequence[str] | None = None,
    window: float = 1.0,
) -> float | None:
    """Seconds from ``injection_time`` until every command stays inside its band.

    Each command's band is ``band * max(|m|, floor)`` around ``m``, its mean
    over the final ``window`` seconds. ``floor`` keeps the band from
    collapsing for commands that settle near zero. Returns ``None`` when the
    log does not reach ``window`` seconds past the injection.
    """
    if band <= 0:
        raise ValueError("band must be positive")
    t = np.asarray(log["time"], dtype=float)
    cols = command_columns(log) if columns is None else list(columns)
    if not cols:
        raise KeyError("log has no command columns")
    if t.size == 0 or t[0] > injection_time or t[-1] - injection_time < window:
        return None
    after = t >= injection_time
    tail = t >= t[-1] - window
    last_bad = -1
    for c in cols:
        u = np.asarray(log[c], dtype=float)
        m = float(np.mean(u[tail]))
        tol = band * max(abs(m), floor)
        bad = np.flatnonzero(after & (np.abs(u - m) > tol))
        if bad.size:
            last_bad = max(last_bad, int(bad[-1]))
    if last_bad < 0:
        return 0.0
    if last_bad + 1 >= t.size:
        return None
    return float(t[last_bad + 1] - injection_time)
