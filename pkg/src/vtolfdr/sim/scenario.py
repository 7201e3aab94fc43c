"""Scenario files and the closed-loop simulation run."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..alloc import (
    AllocationError,
    AllocationResult,
    ActuatorFailure,
    FailureSet,
    allocate,
)
from ..detector import DetectionEvent, DetectorBank, DetectorConfig, sort_events
from ..telemetry import Table
from .actuators import ActuatorState, Injection, inject_failures
from .control import CascadedController, ControllerGains, Setpoint, reference_attitude
from .dynamics import RigidBodyState, SimulationAbort, attitude_error_angle, quat_from_euler, step_dynamics
from .vehicle import (
    ACTUATOR_NAMES,
    VehicleParams,
    actuator_jacobian,
    actuator_wrench_vector,
    aero_force_body,
    cruise_trim,
    hover_trim,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AWARENESS = ("informed", "unaware", "detected")
LINEARIZATIONS = ("operating_point", "trim")
SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
WRENCH_COLS = ("fx", "fy", "fz", "tx", "ty", "tz")
# wrench rows enforced per mode; horizontal hover force comes from attitude, lateral cruise force from bank
DEFAULT_ROW_MASKS = {"hover": (False, False, True, True, True, True), "cruise": (True, False, True, True, True, True)}


class ScenarioError(ValueError):
    """A scenario document is malformed."""


@dataclass(frozen=True)
class Phase:
    start: float
    mode: str
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "Phase":
        yaw = math.radians(float(d["yaw_deg"])) if "yaw_deg" in d else float(d.get("yaw", 0.0))
        return cls(float(d.get("start", 0.0)), str(d["mode"]), tuple(map(float, d["position"])),
                   tuple(map(float, d.get("velocity", (0.0, 0.0, 0.0)))), yaw)

    def to_dict(self) -> dict:
        return {"start": self.start, "mode": self.mode, "position": list(self.position),
                "velocity": list(self.velocity), "yaw": self.yaw}

    def setpoint(self, t: float) -> Setpoint:
        dt = t - self.start
        pos = tuple(p + v * dt for p, v in zip(self.position, self.velocity))
        return Setpoint(self.mode, pos, self.velocity, self.yaw)


@dataclass
class Scenario:
    name: str
    plan: list[Phase]
    duration: float
    dt: float = 0.002
    control_dt: float = 0.01
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    gains: ControllerGains = field(default_factory=ControllerGains)
    failures: list[Injection] = field(default_factory=list)
    awareness: str = "informed"
    weights: dict[str, float] = field(default_factory=dict)
    row_masks: dict[str, tuple[bool, ...]] = field(default_factory=lambda: dict(DEFAULT_ROW_MASKS))
    detector: DetectorConfig | None = None
    noise_std: float = 0.0
    seed: int = 0
    initial: RigidBodyState | None = None
    output: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.plan:
            raise ScenarioError("plan needs at least one phase")
        starts = [p.start for p in self.plan]
        if starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScenarioError("phase starts must begin at 0 and increase")
        if not (self.dt > 0 and self.control_dt > 0):
            raise ScenarioError("dt and control_dt must be positive")
        ratio = self.control_dt / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("control_dt must be a whole multiple of dt")
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        if self.awareness not in AWARENESS:
            raise ScenarioError(f"awareness must be one of {AWARENESS}")
        for inj in self.failures:
            if inj.actuator not in ACTUATOR_NAMES:
                raise ScenarioError(f"unknown actuator {inj.actuator!r}")
            if inj.time > self.duration:
                raise ScenarioError(f"injection at {inj.time} s is after the end of the run")
        for mode, mask in self.row_masks.items():
            if len(mask) != 6 or not any(mask):
                raise ScenarioError(f"row mask for {mode} needs 6 entries, at least one enabled")
        if self.noise_std < 0:
            raise ScenarioError("noise_std must be non-negative")
        if self.initial is None:
            self.initial = default_initial_state(self.vehicle, self.plan[0])

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.dt))

    def phase_at(self, t: float) -> Phase:
        current = self.plan[0]
        for p in self.plan:
            if p.start <= t + 1e-12:
                current = p
        return current

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        try:
            version = d.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ScenarioError(f"unsupported schema_version {version}")
            vehicle = VehicleParams.from_dict(d.get("vehicle"))
            plan = [Phase.from_dict(p) for p in d["plan"]]
            alloc = dict(d.get("allocator", {}))
            det = dict(d.get("detector", {}))
            enabled = bool(det.pop("enabled", False))
            noise = float(det.pop("noise_std", 0.0))
            initial = None
            if "initial" in d:
                ini = d["initial"]
                euler = [math.radians(a) for a in ini.get("euler_deg", (0.0, 0.0, 0.0))]
                initial = RigidBodyState(ini.get("position", plan[0].position), ini.get("velocity", plan[0].velocity),
                                         quat_from_euler(*euler), ini.get("angular_velocity", (0.0, 0.0, 0.0)))
            return cls(
                name=str(d["name"]),
                plan=plan,
                duration=float(d["duration"]),
                dt=float(d.get("dt", 0.002)),
                control_dt=float(d.get("control_dt", 0.01)),
                vehicle=vehicle,
                gains=ControllerGains.from_dict(d.get("controller")),
                failures=[Injection.from_dict(f) for f in d.get("failures", [])],
                awareness=str(alloc.get("awareness", "informed")),
                weights={str(k): float(v) for k, v in alloc.get("weights", {}).items()},
                row_masks={**DEFAULT_ROW_MASKS, **{str(k): tuple(bool(x) for x in v) for k, v in alloc.get("row_masks", {}).items()}},
                detector=DetectorConfig.from_dict(det) if enabled else None,
                noise_std=noise,
                seed=int(d.get("seed", 0)),
                initial=initial,
                output=dict(d.get("output", {})),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid scenario: {exc!r}") from exc

    def to_dict(self) -> dict:
        det: dict[str, Any] = {"enabled": self.detector is not None, "noise_std": self.noise_std}
        if self.detector is not None:
            det.update(self.detector.to_dict())
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "duration": self.duration,
            "dt": self.dt,
            "control_dt": self.control_dt,
            "seed": self.seed,
            "vehicle": self.vehicle.to_dict(),
            "controller": self.gains.to_dict(),
            "plan": [p.to_dict() for p in self.plan],
            "failures": [f.to_dict() for f in self.failures],
            "allocator": {"awareness": self.awareness, "weights": dict(self.weights),
                          "row_masks": {k: list(v) for k, v in self.row_masks.items()}},
            "detector": det,
            "output": dict(self.output),
        }

    def with_changes(self, **changes) -> "Scenario":
        d = self.to_dict()
        sc = Scenario.from_dict(d)
        sc.initial = self.initial.copy()
        for k, v in changes.items():
            setattr(sc, k, v)
        sc.__post_init__()
        return sc


def default_initial_state(params: VehicleParams, phase: Phase) -> RigidBodyState:
    q = quat_from_euler(0.0, 0.0, phase.yaw)
    return RigidBodyState(phase.position, phase.velocity, q, np.zeros(3), 0.0)


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario file; a bare name is looked up among the bundled scenarios."""
    p = Path(path)
    if not p.exists():
        bundled = SCENARIO_DIR / (p.name if p.suffix == ".json" else p.name + ".json")
        if bundled.exists():
            p = bundled
    try:
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc
    return Scenario.from_dict(data)


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


class FlightAllocator:
    """Allocates the controller's wrench over the airframe each control step.

    The cost is centered on the mode trim (with known failures pinned at
    their forced values). The effectiveness matrix is re-linearized at the
    low-passed previous commands (``linearization="operating_point"``) or kept at the
    trim (``"trim"``). If the rate-limited box cannot deliver the request,
    the wrench increment over what the previous command already produces
    is scaled back until it can.
    """

    def __init__(self, params: VehicleParams, weights: Mapping[str, float] | None = None,
                 row_masks: Mapping[str, tuple[bool, ...]] | None = None,
                 linearization: str = "operating_point", scale_steps: int = 7, relin_gain: float = 0.7):
        if linearization not in LINEARIZATIONS:
            raise ValueError(f"linearization must be one of {LINEARIZATIONS}")
        self.params = params
        self.row_masks = dict(DEFAULT_ROW_MASKS if row_masks is None else row_masks)
        self.linearization = linearization
        self.scale_steps = scale_steps
        # Re-linearizing at the raw previous command can settle into a two-step
        # cycle, so the operating point follows the commands through a low-pass.
        self.relin_gain = relin_gain
        self._u_op: np.ndarray | None = None
        self.base_layout = params.layout()
        w = self.base_layout.default_weights()
        for key, value in (weights or {}).items():
            for i, (name, kind) in enumerate(zip(self.base_layout.names, self.base_layout.kinds)):
                if key in (name, kind):
                    w[i] = value
        self.weights = w
        v = params.cruise_speed()
        self.trims = {"hover": (hover_trim(params), np.zeros(3)), "cruise": (cruise_trim(params, v), np.array([v, 0.0, 0.0]))}

    def trim_layout(self, mode: str, forced: Mapping[int, float]):
        u0 = self.trims[mode][0].copy()
        for i, val in forced.items():
            u0[i] = val
        return self.base_layout.with_trim(u0)

    def allocate(self, mode: str, w_des, u_prev, dt: float, known: FailureSet,
                 v_body=None) -> tuple[AllocationResult, np.ndarray]:
        """Returns the allocation and the wrench the allocator believes it commands."""
        forced = known.forced_values(self.base_layout, u_prev)
        layout = self.trim_layout(mode, forced)
        trim = layout.u_trim
        if v_body is None:
            v_body = self.trims[mode][1]
        u_hold = np.asarray(u_prev, dtype=float).copy()
        for i, val in forced.items():
            u_hold[i] = val
        if self.linearization == "operating_point":
            if self._u_op is None:
                self._u_op = u_hold.copy()
            else:
                self._u_op += self.relin_gain * (u_hold - self._u_op)
            u_lin = self._u_op.copy()
            for i, val in forced.items():
                u_lin[i] = val
        else:
            u_lin = trim
        B = actuator_jacobian(self.params, u_lin, v_body)
        w_lin = actuator_wrench_vector(self.params, u_lin, v_body)
        dw = np.asarray(w_des, dtype=float) - w_lin + B @ (u_lin - trim)
        mask = self.row_masks.get(mode)
        res = allocate(B, dw, layout, self.weights, known, u_hold, dt, mask)
        if res.fallback and self.scale_steps:
            dw_hold = B @ (u_hold - trim)
            lo, hi, best = 0.0, 1.0, None
            for _ in range(self.scale_steps):
                mid = 0.5 * (lo + hi) if best is not None or lo > 0 else 0.0
                trial = allocate(B, dw_hold + mid * (dw - dw_hold), layout, self.weights, known, u_hold, dt, mask)
                if trial.fallback:
                    if mid == 0.0:
                        break
                    hi = mid
                else:
                    best, lo = trial, mid
            if best is not None:
                res = best
        believed = w_lin + B @ (res.u_sp - u_lin)
        return res, believed


@dataclass
class SimResult:
    log: Table
    summary: dict
    events: list[DetectionEvent]

    @property
    def crashed(self) -> bool:
        return bool(self.summary["crash"])


def _failure_set(injections: list[Injection], names) -> FailureSet:
    return FailureSet([ActuatorFailure(list(names).index(i.actuator), i.mode, i.value) for i in injections])


def run_scenario(scenario: Scenario) -> SimResult:
    sc = scenario
    params = sc.vehicle
    ctrl = CascadedController(params, sc.gains)
    alloc = FlightAllocator(params, sc.weights, sc.row_masks)
    first_mode = sc.plan[0].mode
    actuators = ActuatorState.create(alloc.base_layout.with_trim(alloc.trims[first_mode][0]), params.actuator_time_constants())
    state = sc.initial.copy()
    state.time = 0.0
    rng = np.random.default_rng(sc.seed)
    bank = DetectorBank(sc.detector) if sc.detector is not None else None
    det_inputs = det_outputs = None
    if bank is not None:
        det_inputs = [s.input_signal for s in bank.specs]
        det_outputs = [s.output_signal for s in bank.specs]
    names = ACTUATOR_NAMES
    rows: dict[str, list] = {}

    def put(key, value):
        rows.setdefault(key, []).append(value)

    u_cmd = actuators.commanded.copy()
    events: list[DetectionEvent] = []
    detected_at: float | None = None
    crash, crash_time, crash_reason, aborted = False, None, None, None
    n_steps = int(math.floor(sc.duration / sc.control_dt + 1e-9))
    h = sc.dt
    fallback_steps = 0

    for k in range(n_steps + 1):
        t = k * sc.control_dt
        phase = sc.phase_at(t)
        sp = phase.setpoint(t)
        due = [i for i in sc.failures if i.time <= t + 1e-12]
        if sc.awareness == "informed":
            known_inj = due
        elif sc.awareness == "detected" and detected_at is not None:
            known_inj = [i for i in due if i.time <= detected_at + 1e-12]
        else:
            known_inj = []
        w_des = ctrl.step(state, sp, sc.control_dt if k else 0.0).vector
        try:
            res, believed = alloc.allocate(sp.mode, w_des, u_cmd, sc.control_dt, _failure_set(known_inj, names),
                                           state.body_velocity())
        except AllocationError as exc:
            aborted = f"allocation failed at t={t:.3f} s: {exc}"
            log.error(aborted)
            break
        u_cmd = res.u_sp
        fallback_steps += int(res.fallback)
        v_body = state.body_velocity()
        w_act = actuator_wrench_vector(params, actuators.actual, v_body)
        roll, pitch, yaw = state.euler()
        q_ref = reference_attitude(sp)

        put("time", t)
        for c, v in zip(("x", "y", "z"), state.position):
            put(c, v)
        for c, v in zip(("vx", "vy", "vz"), state.velocity):
            put(c, v)
        for c, v in zip(("qw", "qx", "qy", "qz"), state.attitude):
            put(c, v)
        for c, v in zip(("p", "q", "r"), state.angular_velocity):
            put(c, v)
        put("roll", roll)
        put("pitch", pitch)
        put("yaw", yaw)
        put("att_err", attitude_error_angle(state.attitude, q_ref))
        put("pos_err", float(np.linalg.norm(state.position - np.asarray(sp.position))))
        for c, v in zip(("sp_x", "sp_y", "sp_z"), sp.position):
            put(c, v)
        for n_, v in zip(names, u_cmd):
            put(f"u_sp_{n_}", v)
        for n_, v in zip(names, actuators.actual):
            put(f"u_{n_}", v)
        for c, v in zip(WRENCH_COLS, w_des):
            put(f"w_des_{c}", v)
        for c, v in zip(WRENCH_COLS, w_act):
            put(f"w_act_{c}", v)
        for c, v in zip(("fx", "fy", "fz"), believed[:3]):
            put(f"w_alloc_{c}", v)
        for c, v in zip(("x", "y", "z"), believed[3:]):
            put(f"tau_alloc_{c}", v)
        meas = state.angular_velocity + (sc.noise_std * rng.standard_normal(3) if sc.noise_std else 0.0)
        for c, v in zip(("meas_p", "meas_q", "meas_r"), meas):
            put(c, v)
        put("alloc_residual", res.wrench_residual)
        put("alloc_fallback", 1.0 if res.fallback else 0.0)

        if bank is not None:
            avail = {**{f"tau_alloc_{c}": believed[3 + j] for j, c in enumerate("xyz")},
                     **{m: meas[j] for j, m in enumerate(("meas_p", "meas_q", "meas_r"))}}
            try:
                u_vec = np.array([avail[c] if c in avail else rows[c][-1] for c in det_inputs])
                y_vec = np.array([avail[c] if c in avail else rows[c][-1] for c in det_outputs])
            except KeyError as exc:
                raise ScenarioError(f"detector channel refers to unknown signal {exc}") from None
            new = bank.step(u_vec, y_vec, t)
            for j, name in enumerate(bank.names):
                put(f"z_{name}", bank.last_z[j])
            if new:
                events.extend(new)
                if detected_at is None and any(ev.time >= min((i.time for i in sc.failures), default=math.inf) for ev in new):
                    detected_at = t

        if abs(roll) > math.pi / 2 or abs(pitch) > math.pi / 2 or state.position[2] < 0:
            crash, crash_time = True, t
            crash_reason = "ground contact" if state.position[2] < 0 else "attitude beyond 90 deg"
            break
        if k == n_steps:
            break

        actuators.command(u_cmd)
        try:
            # a diverging state overflows first; step_dynamics turns that into an abort
            with np.errstate(over="ignore", invalid="ignore"):
                for s in range(sc.substeps):
                    ts = t + s * h
                    inject_failures(actuators, sc.failures, ts)
                    v_body = state.body_velocity()
                    wv = actuator_wrench_vector(params, actuators.actual, v_body)
                    wv[:3] += aero_force_body(params, v_body)
                    state = step_dynamics(params, state, wv, h)
                    actuators.advance(h)
                    inject_failures(actuators, sc.failures, ts + h)
        except SimulationAbort as exc:
            aborted = str(exc)
            log.error("scenario %s aborted: %s", sc.name, exc)
            break

    table = {key: np.asarray(vals, dtype=float) for key, vals in rows.items()}
    events = sort_events(events)
    summary = summarize(sc, table, events, crash, crash_time, crash_reason, aborted, fallback_steps)
    return SimResult(table, summary, events)


def summarize(sc: Scenario, table: Table, events, crash, crash_time, crash_reason, aborted, fallback_steps) -> dict:
    t_inj = min((i.time for i in sc.failures), default=None)
    att = table.get("att_err", np.zeros(0))
    resid = table.get("alloc_residual", np.zeros(0))
    rollv = table.get("roll", np.zeros(0))
    pitchv = table.get("pitch", np.zeros(0))
    pos = table.get("pos_err", np.zeros(0))
    deg = math.degrees
    return {
        "name": sc.name,
        "awareness": sc.awareness,
        "crash": bool(crash or aborted),
        "crash_time": crash_time,
        "crash_reason": crash_reason,
        "aborted": aborted,
        "duration": float(table["time"][-1]) if len(table.get("time", ())) else 0.0,
        "injection_time": t_inj,
        "max_attitude_error_deg": deg(float(np.max(att))) if att.size else None,
        "max_abs_roll_deg": deg(float(np.max(np.abs(rollv)))) if rollv.size else None,
        "max_abs_pitch_deg": deg(float(np.max(np.abs(pitchv)))) if pitchv.size else None,
        "final_position_error": float(pos[-1]) if pos.size else None,
        "alloc_residual_max": float(np.max(resid)) if resid.size else None,
        "alloc_residual_mean": float(np.mean(resid)) if resid.size else None,
        "alloc_fallback_steps": int(fallback_steps),
        "events": [
            {"time": e.time, "channel": e.channel, "z_score": e.z_score, "residual": e.residual} for e in events
        ],
    }
