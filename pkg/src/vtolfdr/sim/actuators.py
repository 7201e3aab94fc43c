"""Actuator lag and failure overrides."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

FAILURE_MODES = ("cutoff", "locked")


@dataclass(frozen=True)
class Injection:
    """Failure of one actuator from ``time`` onward. ``value`` is required for locks."""

    time: float
    actuator: str
    mode: str
    value: float | None = None

    def __post_init__(self):
        if self.mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.mode!r}")
        if self.mode == "locked" and self.value is None:
            raise ValueError(f"locked failure of {self.actuator} needs a value")
        if not math.isfinite(self.time) or self.time < 0:
            raise ValueError("injection time must be a finite, non-negative number")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Injection":
        value = d.get("value")
        if value is None and "value_deg" in d:
            value = math.radians(float(d["value_deg"]))
        return cls(float(d["time"]), str(d["actuator"]), str(d["mode"]), None if value is None else float(value))

    def to_dict(self) -> dict:
        out = {"time": self.time, "actuator": self.actuator, "mode": self.mode}
        if self.value is not None:
            out["value"] = self.value
        return out


@dataclass
class ActuatorState:
    names: tuple[str, ...]
    commanded: np.ndarray
    actual: np.ndarray
    time_constants: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    zero_effect: np.ndarray
    overrides: dict[int, float] = field(default_factory=dict)

    @classmethod
    def create(cls, layout, time_constants, u0=None) -> "ActuatorState":
        u0 = layout.u_trim.copy() if u0 is None else np.asarray(u0, dtype=float).copy()
        tc = np.asarray(time_constants, dtype=float)
        if tc.shape != (layout.n,) or np.any(tc < 0):
            raise ValueError("need one non-negative time constant per actuator")
        return cls(tuple(layout.names), u0.copy(), np.clip(u0, layout.u_min, layout.u_max),
                   tc, layout.u_min.copy(), layout.u_max.copy(), layout.zero_effect.copy())

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown actuator {name!r}") from None

    def command(self, u_sp) -> None:
        self.commanded = np.asarray(u_sp, dtype=float).copy()

    def advance(self, dt: float) -> None:
        """First-order response towards the command over ``dt``, then overrides."""
        with np.errstate(divide="ignore"):
            alpha = np.where(self.time_constants > 0, -np.expm1(-dt / np.where(self.time_constants > 0, self.time_constants, 1.0)), 1.0)
        target = np.clip(self.commanded, self.u_min, self.u_max)
        self.actual = np.clip(self.actual + alpha * (target - self.actual), self.u_min, self.u_max)
        self._apply_overrides()

    def _apply_overrides(self) -> None:
        for i, v in self.overrides.items():
            self.actual[i] = v


def inject_failures(actuators: ActuatorState, injections: Iterable[Injection], time: float) -> ActuatorState:
    """Activate every injection due at ``time`` and force the affected outputs."""
    for inj in injections:
        if time + 1e-12 < inj.time:
            continue
        i = actuators.index(inj.actuator)
        if i in actuators.overrides:
            continue
        v = actuators.zero_effect[i] if inj.mode == "cutoff" else float(inj.value)
        if not actuators.u_min[i] - 1e-12 <= v <= actuators.u_max[i] + 1e-12:
            raise ValueError(f"{inj.actuator}: forced value {v} outside its range")
        actuators.overrides[i] = v
    actuators._apply_overrides()
    return actuators
