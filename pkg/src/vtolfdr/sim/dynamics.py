"""Newton-Euler rigid body with a world<-body unit quaternion ``(w, x, y, z)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..alloc import as_wrench_vector

MAX_DT = 0.05


class SimulationAbort(RuntimeError):
    """The integrator produced a non-finite state."""


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def euler_from_quat(q) -> tuple[float, float, float]:
    """Z-Y-X (yaw, pitch, roll) angles in radians, returned as (roll, pitch, yaw)."""
    w, x, y, z = q
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def quat_log(q) -> np.ndarray:
    """Rotation vector of ``q`` (shortest way round)."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    return (2.0 * math.atan2(s, q[0]) / s) * v


def attitude_error_angle(q, q_ref) -> float:
    return float(np.linalg.norm(quat_log(quat_multiply(quat_conjugate(q_ref), q))))


@dataclass
class RigidBodyState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.attitude = np.asarray(self.attitude, dtype=float).reshape(4)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float).reshape(3)
        n = float(np.linalg.norm(self.attitude))
        if not n > 0:
            raise ValueError("attitude quaternion must be nonzero")
        if abs(n - 1.0) > 1e-9:
            self.attitude = self.attitude / n

    @classmethod
    def from_vector(cls, x, time: float) -> "RigidBodyState":
        return cls(x[0:3], x[3:6], x[6:10], x[10:13], time)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.attitude, self.angular_velocity])

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.attitude)

    def body_velocity(self) -> np.ndarray:
        return self.rotation().T @ self.velocity

    def euler(self) -> tuple[float, float, float]:
        return euler_from_quat(self.attitude)

    def copy(self) -> "RigidBodyState":
        return replace(self)


def _derivative(x, f, tau, m, g, J, Ji):
    # plain floats: these arrays are far too small for numpy to pay off
    px, py, pz, vx, vy, vz, w, qx, qy, qz, p, q, r = x
    fx, fy, fz = f
    r00 = 1 - 2 * (qy * qy + qz * qz)
    r01 = 2 * (qx * qy - w * qz)
    r02 = 2 * (qx * qz + w * qy)
    r10 = 2 * (qx * qy + w * qz)
    r11 = 1 - 2 * (qx * qx + qz * qz)
    r12 = 2 * (qy * qz - w * qx)
    r20 = 2 * (qx * qz - w * qy)
    r21 = 2 * (qy * qz + w * qx)
    r22 = 1 - 2 * (qx * qx + qy * qy)
    hx = J[0][0] * p + J[0][1] * q + J[0][2] * r
    hy = J[1][0] * p + J[1][1] * q + J[1][2] * r
    hz = J[2][0] * p + J[2][1] * q + J[2][2] * r
    mx = tau[0] - (q * hz - r * hy)
    my = tau[1] - (r * hx - p * hz)
    mz = tau[2] - (p * hy - q * hx)
    return (
        vx, vy, vz,
        (r00 * fx + r01 * fy + r02 * fz) / m + g[0],
        (r10 * fx + r11 * fy + r12 * fz) / m + g[1],
        (r20 * fx + r21 * fy + r22 * fz) / m + g[2],
        0.5 * (-qx * p - qy * q - qz * r),
        0.5 * (w * p + qy * r - qz * q),
        0.5 * (w * q - qx * r + qz * p),
        0.5 * (w * r + qx * q - qy * p),
        Ji[0][0] * mx + Ji[0][1] * my + Ji[0][2] * mz,
        Ji[1][0] * mx + Ji[1][1] * my + Ji[1][2] * mz,
        Ji[2][0] * mx + Ji[2][1] * my + Ji[2][2] * mz,
    )


def _axpy(x, k, a):
    return [xi + a * ki for xi, ki in zip(x, k)]


def step_dynamics(params, state: RigidBodyState, wrench, dt: float, gravity: bool = True) -> RigidBodyState:
    """One RK4 step with the body wrench held constant over ``dt``."""
    if not (0.0 < dt <= MAX_DT):
        raise ValueError(f"dt must be in (0, {MAX_DT}], got {dt}")
    wv = as_wrench_vector(wrench).tolist()
    f, tau = wv[:3], wv[3:]
    g = (0.0, 0.0, -params.gravity) if gravity else (0.0, 0.0, 0.0)
    J, Ji, m = params.inertia.tolist(), params.inertia_inv.tolist(), params.mass
    x = state.vector().tolist()
    k1 = _derivative(x, f, tau, m, g, J, Ji)
    k2 = _derivative(_axpy(x, k1, 0.5 * dt), f, tau, m, g, J, Ji)
    k3 = _derivative(_axpy(x, k2, 0.5 * dt), f, tau, m, g, J, Ji)
    k4 = _derivative(_axpy(x, k3, dt), f, tau, m, g, J, Ji)
    h6 = dt / 6.0
    xn = np.array([xi + h6 * (a + 2.0 * b + 2.0 * c + d) for xi, a, b, c, d in zip(x, k1, k2, k3, k4)])
    qn = float(np.linalg.norm(xn[6:10]))
    if not (np.all(np.isfinite(xn)) and math.isfinite(qn) and qn > 0.0):
        raise SimulationAbort(f"non-finite state at t={state.time + dt:.6f} s: {xn.tolist()}")
    xn[6:10] /= qn
    return RigidBodyState.from_vector(xn, state.time + dt)
