"""Tiltrotor airframe: geometry, actuator layout and the actuator wrench model.

Frames are body FLU (x forward, y left, z up) and world ENU, so gravity is
``(0, 0, -g)`` and rotor thrust at zero tilt points along body +z.

Actuator order: ``motor1..4, tilt1..4, aileron_l, aileron_r, elevator``.
Rotors are numbered front-right, rear-left, front-left, rear-right. Each
tilt servo swings its rotor from vertical (0) towards the nose (pi/2) about
an axis canted by ``cant`` from body y, which gives the diagonal rotor
pairs a small lateral force component.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..alloc import ActuatorLayout, Wrench

ACTUATOR_NAMES = (
    "motor1", "motor2", "motor3", "motor4",
    "tilt1", "tilt2", "tilt3", "tilt4",
    "aileron_l", "aileron_r", "elevator",
)
ACTUATOR_KINDS = ("motor",) * 4 + ("tilt",) * 4 + ("surface",) * 3
MOTORS = slice(0, 4)
TILTS = slice(4, 8)
SURFACES = slice(8, 11)
N_ACTUATORS = len(ACTUATOR_NAMES)

_Z = np.array([0.0, 0.0, 1.0])


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of two (n, 3) arrays."""
    out = np.empty_like(b)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _default_positions(arm: float = 0.35, height: float = 0.1) -> np.ndarray:
    a = arm / np.sqrt(2.0)
    return np.array([[a, -a, height], [-a, a, height], [a, a, height], [-a, -a, height]])


@dataclass
class VehicleParams:
    mass: float = 4.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.2, 0.25, 0.3]))
    gravity: float = 9.81
    rotor_positions: np.ndarray = field(default_factory=_default_positions)
    cant_deg: np.ndarray = field(default_factory=lambda: np.array([-10.0, -10.0, 10.0, 10.0]))
    k_f: float = 4.0 * 9.81 / (4.0 * 0.55**2)  # hover at 55% command
    k_m: float = 0.5
    spin: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, 1.0, 1.0]))
    # roll/pitch/yaw moment per radian per pascal of dynamic pressure, one row per surface;
    # positive elevator is trailing edge up (nose-up moment)
    surface_moments: np.ndarray = field(
        default_factory=lambda: np.array([[0.02, 0.0, 0.0], [-0.02, 0.0, 0.0], [0.0, -0.03, 0.0]])
    )
    air_density: float = 1.225
    wing_area: float = 0.6
    lift_coefficient: float = 0.33
    drag_coefficient: float = 0.08
    motor_range: tuple[float, float] = (0.0, 1.0)
    tilt_range_deg: tuple[float, float] = (-30.0, 110.0)
    surface_range_deg: tuple[float, float] = (-25.0, 25.0)
    rate_limits: tuple[float, float, float] = (5.0, 1.5, 3.0)  # motor /s, tilt rad/s, surface rad/s
    time_constants: tuple[float, float, float] = (0.05, 0.2, 0.05)

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.inertia.shape == (3,):
            self.inertia = np.diag(self.inertia)
        self.rotor_positions = np.asarray(self.rotor_positions, dtype=float).reshape(4, 3)
        self.cant_deg = np.asarray(self.cant_deg, dtype=float).reshape(4)
        self.spin = np.asarray(self.spin, dtype=float).reshape(4)
        self.surface_moments = np.asarray(self.surface_moments, dtype=float).reshape(3, 3)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.k_f <= 0:
            raise ValueError("k_f must be positive")
        if not np.allclose(self.inertia, self.inertia.T) or np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ValueError("inertia must be symmetric positive definite")
        c = np.radians(self.cant_deg)
        self.tilt_axes = np.column_stack([-np.sin(c), np.cos(c), np.zeros(4)])
        self._axis_cross_z = np.cross(self.tilt_axes, _Z)
        self._axis_dot_z = self.tilt_axes @ _Z
        self.inertia_inv = np.linalg.inv(self.inertia)

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "VehicleParams":
        d = dict(d or {})
        for key in ("motor_range", "tilt_range_deg", "surface_range_deg", "rate_limits", "time_constants"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    def cruise_speed(self) -> float:
        """Airspeed at which wing lift carries the full weight."""
        return float(np.sqrt(2.0 * self.mass * self.gravity / (self.air_density * self.wing_area * self.lift_coefficient)))

    def layout(self, u_trim=None) -> ActuatorLayout:
        lo = np.array([self.motor_range[0]] * 4 + [np.radians(self.tilt_range_deg[0])] * 4 + [np.radians(self.surface_range_deg[0])] * 3)
        hi = np.array([self.motor_range[1]] * 4 + [np.radians(self.tilt_range_deg[1])] * 4 + [np.radians(self.surface_range_deg[1])] * 3)
        rl = np.array([self.rate_limits[0]] * 4 + [self.rate_limits[1]] * 4 + [self.rate_limits[2]] * 3)
        trim = hover_trim(self) if u_trim is None else np.asarray(u_trim, dtype=float)
        return ActuatorLayout(ACTUATOR_NAMES, lo, hi, trim, rl, ACTUATOR_KINDS, np.zeros(N_ACTUATORS))

    def actuator_time_constants(self) -> np.ndarray:
        m, t, s = self.time_constants
        return np.array([m] * 4 + [t] * 4 + [s] * 3)


def rotor_directions(params: VehicleParams, tilt: np.ndarray) -> np.ndarray:
    """Unit thrust axis of each rotor in the body frame (4 x 3)."""
    c = np.cos(tilt)[:, None]
    s = np.sin(tilt)[:, None]
    return _Z * c + params._axis_cross_z * s + params.tilt_axes * (params._axis_dot_z[:, None] * (1.0 - c))


def dynamic_pressure(params: VehicleParams, v_body) -> float:
    v = np.asarray(v_body, dtype=float)
    return 0.5 * params.air_density * float(v @ v)


def actuator_wrench_vector(params: VehicleParams, u, v_body=None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    motors = u[MOTORS]
    d = rotor_directions(params, u[TILTS])
    u2 = motors * motors
    F = (params.k_f * u2)[:, None] * d
    tau = _cross(params.rotor_positions, F) + (params.spin * params.k_m * u2)[:, None] * d
    force = F.sum(axis=0)
    torque = tau.sum(axis=0)
    if v_body is not None:
        q = dynamic_pressure(params, v_body)
        if q:
            torque = torque + q * (u[SURFACES] @ params.surface_moments)
    return np.concatenate([force, torque])


def wrench_from_actuators(params: VehicleParams, state, u) -> Wrench:
    """Body wrench from rotors and control surfaces; gravity and wing forces excluded.

    ``state`` supplies the airspeed for surface moments (``None``: still air).
    """
    v_body = None if state is None else state.body_velocity()
    return Wrench.from_vector(actuator_wrench_vector(params, u, v_body))


def aero_force_body(params: VehicleParams, v_body) -> np.ndarray:
    """Constant-coefficient wing: lift along body z, drag against the airspeed."""
    v = np.asarray(v_body, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed < 1e-9:
        return np.zeros(3)
    q = 0.5 * params.air_density * speed * speed
    lift = q * params.wing_area * params.lift_coefficient
    drag = q * params.wing_area * params.drag_coefficient
    return np.array([0.0, 0.0, lift]) - drag * v / speed


def hover_trim(params: VehicleParams) -> np.ndarray:
    u = np.zeros(N_ACTUATORS)
    u[MOTORS] = np.sqrt(params.mass * params.gravity / (4.0 * params.k_f))
    return u


def cruise_trim(params: VehicleParams, speed: float | None = None) -> np.ndarray:
    """Rotors fully forward, thrust balancing drag at ``speed``; any lift deficit is ignored."""
    speed = params.cruise_speed() if speed is None else speed
    drag = 0.5 * params.air_density * speed**2 * params.wing_area * params.drag_coefficient
    forward = np.cos(np.radians(params.cant_deg))
    u = np.zeros(N_ACTUATORS)
    u[MOTORS] = np.sqrt(drag / (params.k_f * forward.sum()))
    u[TILTS] = np.pi / 2
    return u


def actuator_jacobian(params: VehicleParams, u, v_body=None) -> np.ndarray:
    """Analytic d(wrench)/du, 6 x 11, for the model in :func:`actuator_wrench_vector`."""
    u = np.asarray(u, dtype=float)
    m = u[MOTORS]
    tilt = u[TILTS]
    d = rotor_directions(params, tilt)
    c = np.cos(tilt)[:, None]
    s = np.sin(tilt)[:, None]
    dd = -_Z * s + params._axis_cross_z * c + params.tilt_axes * (params._axis_dot_z[:, None] * s)
    J = np.zeros((6, N_ACTUATORS))
    dF_m = (2.0 * params.k_f * m)[:, None] * d
    dF_t = (params.k_f * m * m)[:, None] * dd
    r = params.rotor_positions
    J[:3, MOTORS] = dF_m.T
    J[3:, MOTORS] = (_cross(r, dF_m) + (params.spin * 2.0 * params.k_m * m)[:, None] * d).T
    J[:3, TILTS] = dF_t.T
    J[3:, TILTS] = (_cross(r, dF_t) + (params.spin * params.k_m * m * m)[:, None] * dd).T
    if v_body is not None:
        J[3:, SURFACES] = dynamic_pressure(params, v_body) * params.surface_moments.T
    return J
