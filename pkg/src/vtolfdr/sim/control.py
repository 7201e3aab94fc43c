"""Cascaded position/attitude controller producing a desired body wrench.

Hover: the position loop asks for a world force, body z is aligned with it
(up to ``max_tilt``) and the full force is passed on in body axes, so tilt
servos may carry part of the horizontal demand.

Cruise: attitude is held wings-level except for a bank to steer sideways;
the known wing force is subtracted so the rotors only supply the remainder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..alloc import Wrench
from .dynamics import RigidBodyState, quat_conjugate, quat_from_matrix, quat_log, quat_multiply
from .vehicle import VehicleParams, aero_force_body

MODES = ("hover", "cruise")


def _vec(v, n=3) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    return np.full(n, float(a[0])) if a.size == 1 else a.reshape(n)


@dataclass
class ControllerGains:
    pos_kp: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 2.0]))
    pos_kd: np.ndarray = field(default_factory=lambda: np.array([1.6, 1.6, 2.5]))
    pos_ki: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.4]))
    att_kp: np.ndarray = field(default_factory=lambda: np.array([36.0, 36.0, 16.0]))
    att_kd: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 8.0]))
    att_ki: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 2.0]))
    # cruise pitch may end up on the slow tilt servos, so the attitude loop is softer there
    cruise_att_kp: np.ndarray = field(default_factory=lambda: np.array([16.0, 9.0, 9.0]))
    cruise_att_kd: np.ndarray = field(default_factory=lambda: np.array([7.0, 5.0, 5.0]))
    cruise_att_ki: np.ndarray = field(default_factory=lambda: np.array([2.0, 1.0, 1.0]))
    max_tilt_deg: float = 30.0
    max_bank_deg: float = 20.0
    max_horizontal_acc: float = 3.0
    pos_integral_limit: float = 5.0
    pos_integral_zone: float = 0.2  # integrate an axis only while its error is inside this (m)
    att_integral_limit: float = 0.5
    force_limit: np.ndarray = field(default_factory=lambda: np.array([15.0, 15.0, 70.0]))
    torque_limit: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 2.0]))

    def __post_init__(self):
        for name in ("pos_kp", "pos_kd", "pos_ki", "att_kp", "att_kd", "att_ki",
                     "cruise_att_kp", "cruise_att_kd", "cruise_att_ki", "force_limit", "torque_limit"):
            setattr(self, name, _vec(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ControllerGains":
        return cls(**dict(d or {}))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Setpoint:
    mode: str
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown flight mode {self.mode!r}")


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _euler_matrix(roll: float, yaw: float) -> np.ndarray:
    c, s = math.cos(roll), math.sin(roll)
    return _yaw_matrix(yaw) @ np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def reference_attitude(setpoint: Setpoint) -> np.ndarray:
    """Level attitude at the commanded heading."""
    return quat_from_matrix(_yaw_matrix(setpoint.yaw))


def _hover_attitude(force_world: np.ndarray, yaw: float, max_tilt: float) -> np.ndarray:
    f = force_world
    horiz = math.hypot(f[0], f[1])
    vert = max(f[2], 1e-6)
    limit = math.tan(max_tilt)
    if horiz > limit * vert:
        scale = limit * vert / horiz
        f = np.array([f[0] * scale, f[1] * scale, vert])
    b3 = f / np.linalg.norm(f)
    b1c = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    b2 = np.cross(b3, b1c)
    b2 /= np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


class CascadedController:
    """PD loops with small integrators on position and attitude error."""

    def __init__(self, params: VehicleParams, gains: ControllerGains | None = None):
        self.params = params
        self.gains = gains or ControllerGains()
        self.reset()

    def reset(self) -> None:
        self.pos_integral = np.zeros(3)
        self.att_integral = np.zeros(3)

    def step(self, state: RigidBodyState, setpoint: Setpoint, dt: float = 0.0) -> Wrench:
        p, gn = self.params, self.gains
        e_p = state.position - np.asarray(setpoint.position, dtype=float)
        e_v = state.velocity - np.asarray(setpoint.velocity, dtype=float)
        if dt > 0:
            lim = gn.pos_integral_limit
            inside = np.abs(e_p) < gn.pos_integral_zone
            self.pos_integral = np.clip(self.pos_integral + np.where(inside, e_p, 0.0) * dt, -lim, lim)
        acc = -gn.pos_kp * e_p - gn.pos_kd * e_v - gn.pos_ki * self.pos_integral
        h = math.hypot(acc[0], acc[1])
        if h > gn.max_horizontal_acc:
            acc[:2] *= gn.max_horizontal_acc / h
        force_world = p.mass * (acc - p.gravity_vector)
        R = state.rotation()

        if setpoint.mode == "hover":
            R_des = _hover_attitude(force_world, setpoint.yaw, math.radians(gn.max_tilt_deg))
            force_body = R.T @ force_world
        else:
            lateral = _yaw_matrix(setpoint.yaw).T @ acc
            bank = -math.atan2(lateral[1], p.gravity)
            bank = max(-math.radians(gn.max_bank_deg), min(math.radians(gn.max_bank_deg), bank))
            R_des = _euler_matrix(bank, setpoint.yaw)
            force_body = R.T @ force_world - aero_force_body(p, R.T @ state.velocity)

        q_err = quat_multiply(quat_conjugate(quat_from_matrix(R_des)), state.attitude)
        e_att = quat_log(q_err)
        if dt > 0:
            lim = gn.att_integral_limit
            self.att_integral = np.clip(self.att_integral + e_att * dt, -lim, lim)
        om = state.angular_velocity
        J = p.inertia
        if setpoint.mode == "hover":
            kp, kd, ki = gn.att_kp, gn.att_kd, gn.att_ki
        else:
            kp, kd, ki = gn.cruise_att_kp, gn.cruise_att_kd, gn.cruise_att_ki
        alpha = -kp * e_att - kd * om - ki * self.att_integral
        torque = J @ alpha + np.cross(om, J @ om)

        fl, tl = gn.force_limit, gn.torque_limit
        force_body = np.clip(force_body, -fl, fl)
        force_body[2] = max(force_body[2], 0.0) if setpoint.mode == "hover" else force_body[2]
        return Wrench(force_body, np.clip(torque, -tl, tl))


def controller_step(state: RigidBodyState, setpoint: Setpoint, gains: ControllerGains | None = None,
                    params: VehicleParams | None = None) -> Wrench:
    """Memoryless evaluation (integrators at zero)."""
    return CascadedController(params or VehicleParams(), gains).step(state, setpoint, 0.0)

