import json
import math

import numpy as np
import pytest

from vtolfdr.alloc import FailureSet, least_norm, linearize_effectiveness
from vtolfdr.harness.evaluation import convergence_time
from vtolfdr.sim import (
    ActuatorState,
    Injection,
    RigidBodyState,
    Scenario,
    ScenarioError,
    Setpoint,
    SimulationAbort,
    VehicleParams,
    controller_step,
    inject_failures,
    load_scenario,
    run_scenario,
    step_dynamics,
    wrench_from_actuators,
)
from vtolfdr.sim.dynamics import quat_from_euler
from vtolfdr.sim.scenario import FlightAllocator, bundled_scenarios
from vtolfdr.sim.vehicle import actuator_wrench_vector, hover_trim

P = VehicleParams()


# --- airframe ------------------------------------------------------------------


def test_vehicle_validation():
    with pytest.raises(ValueError):
        VehicleParams(mass=0.0)
    with pytest.raises(ValueError):
        VehicleParams(k_f=-1.0)
    with pytest.raises(ValueError):
        VehicleParams(inertia=np.array([[1.0, 0.5, 0], [0.0, 1, 0], [0, 0, 1]]))


def test_vehicle_dict_round_trip():
    back = VehicleParams.from_dict(json.loads(json.dumps(P.to_dict())))
    np.testing.assert_array_equal(back.inertia, P.inertia)
    assert back.k_f == P.k_f and back.tilt_range_deg == P.tilt_range_deg


def test_zero_input_zero_wrench():
    w = wrench_from_actuators(P, None, np.zeros(11))
    assert not np.any(w.vector)


def test_equal_motors_at_zero_tilt():
    u = np.zeros(11)
    u[:4] = 0.6
    w = wrench_from_actuators(P, None, u).vector
    np.testing.assert_allclose(w[:2], 0.0, atol=1e-12)
    assert w[2] == pytest.approx(4 * P.k_f * 0.36)
    np.testing.assert_allclose(w[3:], 0.0, atol=1e-12)


def test_full_forward_tilt_pushes_along_x():
    u = np.zeros(11)
    u[:4] = 0.5
    u[4:8] = math.pi / 2
    w = wrench_from_actuators(P, None, u).vector
    assert w[0] > 0
    assert abs(w[2]) < 1e-12
    assert abs(w[1]) < 1e-12  # the canted pairs cancel sideways


def test_hover_trim_balances_weight():
    w = actuator_wrench_vector(P, hover_trim(P))
    assert w[2] == pytest.approx(P.mass * P.gravity, rel=1e-12)
    assert hover_trim(P)[0] == pytest.approx(0.55)


def test_surfaces_scale_with_dynamic_pressure():
    u = np.zeros(11)
    u[10] = 0.1
    slow = actuator_wrench_vector(P, u, [10.0, 0, 0])
    fast = actuator_wrench_vector(P, u, [20.0, 0, 0])
    np.testing.assert_allclose(fast, 4 * slow)
    assert slow[4] < 0  # trailing edge up gives a nose-up pitch, which is -y in this frame


def test_symmetric_least_norm_for_pure_lift():
    u0 = hover_trim(P)
    B = linearize_effectiveness(lambda u: actuator_wrench_vector(P, u), u0, 1e-5).B
    du = least_norm(B, [0, 0, 1.0, 0, 0, 0])
    assert du[0] > 0
    np.testing.assert_allclose(du[:4], du[0], atol=1e-6)


# --- rigid body ----------------------------------------------------------------


def test_zero_wrench_no_gravity_is_static():
    s = RigidBodyState([1.0, 2.0, 3.0])
    n = step_dynamics(P, s, np.zeros(6), 0.01, gravity=False)
    np.testing.assert_array_equal(n.vector(), s.vector())
    assert n.time == pytest.approx(0.01)


def test_hover_equilibrium():
    s = RigidBodyState([0.0, 0.0, 10.0])
    w = np.array([0, 0, P.mass * P.gravity, 0, 0, 0])
    for _ in range(500):
        n = step_dynamics(P, s, w, 0.002)
        assert np.max(np.abs(n.position - s.position)) <= 1e-9
        s = n


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_constant_torque_spins_up_linearly(axis):
    tau = np.zeros(6)
    tau[3 + axis] = 0.3
    s = RigidBodyState()
    for _ in range(1000):
        s = step_dynamics(P, s, tau, 0.001, gravity=False)
    expected = 0.3 * 1.0 / P.inertia[axis, axis]
    assert s.angular_velocity[axis] == pytest.approx(expected, abs=1e-6)
    assert np.max(np.abs(np.delete(s.angular_velocity, axis))) <= 1e-6


def test_torque_free_energy_is_conserved():
    p = VehicleParams(inertia=np.diag([0.3, 0.3, 0.3]))
    s = RigidBodyState(angular_velocity=[1.0, -2.0, 0.5], velocity=[0.3, 0.1, -0.2])

    def energy(x):
        return 0.5 * p.mass * x.velocity @ x.velocity + 0.5 * x.angular_velocity @ p.inertia @ x.angular_velocity

    e0 = energy(s)
    for _ in range(10_000):
        s = step_dynamics(p, s, np.zeros(6), 0.001, gravity=False)
        assert abs(np.linalg.norm(s.attitude) - 1.0) <= 1e-9
    assert abs(energy(s) - e0) <= 1e-6 * e0


def test_quaternion_stays_normalized_while_tumbling():
    s = RigidBodyState(angular_velocity=[3.0, -1.0, 2.0])
    for _ in range(2000):
        s = step_dynamics(P, s, np.array([0, 0, 0, 0.1, 0.2, -0.05]), 0.002)
        assert abs(np.linalg.norm(s.attitude) - 1.0) <= 1e-9


def test_step_rejects_bad_dt_and_diverging_state():
    s = RigidBodyState()
    for dt in (0.0, -0.01, 0.051):
        with pytest.raises(ValueError):
            step_dynamics(P, s, np.zeros(6), dt)
    wild = RigidBodyState(angular_velocity=[1e200, 1e200, 1e200])
    with pytest.raises(SimulationAbort), np.errstate(over="ignore", invalid="ignore"):
        step_dynamics(P, wild, np.zeros(6), 0.01)


# --- controller ----------------------------------------------------------------


def test_controller_at_setpoint_only_cancels_gravity():
    s = RigidBodyState([0.0, 0.0, 30.0])
    w = controller_step(s, Setpoint("hover", (0.0, 0.0, 30.0)), params=P).vector
    np.testing.assert_allclose(w, [0, 0, P.mass * P.gravity, 0, 0, 0], atol=1e-12)


def test_controller_leans_towards_position_error():
    s = RigidBodyState([0.0, 0.0, 30.0])
    w = controller_step(s, Setpoint("hover", (1.0, 0.0, 30.0)), params=P).vector
    assert w[0] > 0  # force towards +x
    assert w[4] > 0  # and a pitch torque that rotates thrust towards +x
    w = controller_step(s, Setpoint("hover", (0.0, 1.0, 30.0)), params=P).vector
    assert w[1] > 0 and w[3] < 0


def test_setpoint_mode_is_checked():
    with pytest.raises(ValueError):
        Setpoint("glide", (0, 0, 0))


# --- actuators -----------------------------------------------------------------


def actuators():
    return ActuatorState.create(P.layout(), P.actuator_time_constants())


def test_commands_pass_through_before_injection():
    a = actuators()
    inj = [Injection(10.0, "motor1", "cutoff")]
    a.command(np.full(11, 0.3))
    for k in range(200):
        inject_failures(a, inj, k * 0.002)
        a.advance(0.002)
    assert not a.overrides
    np.testing.assert_allclose(a.actual[:4], 0.3, atol=1e-3)


def test_first_order_lag():
    a = actuators()
    a.command(np.r_[np.ones(4), np.zeros(7)])
    start = a.actual[0]
    a.advance(0.05)
    assert a.actual[0] == pytest.approx(1.0 - (1.0 - start) * math.exp(-1.0))


def test_motor_cutoff_holds_zero():
    a = actuators()
    inj = [Injection(10.0, "motor1", "cutoff")]
    a.command(np.full(11, 0.8))
    for k in range(100):
        t = 10.0 + k * 0.002
        inject_failures(a, inj, t)
        assert a.actual[0] == 0.0
        a.advance(0.002)
        assert a.actual[0] == 0.0


def test_tilt_lock_at_sixty_degrees():
    a = actuators()
    inj = [Injection(1.0, "tilt1", "locked", math.radians(60.0))]
    inject_failures(a, inj, 1.0)
    for k in range(500):
        a.command(np.full(11, 0.1 * math.sin(k)))
        a.advance(0.002)
        assert a.actual[4] == math.radians(60.0)


def test_injection_validation():
    with pytest.raises(ValueError):
        Injection(1.0, "tilt1", "locked")
    with pytest.raises(ValueError):
        Injection(-1.0, "motor1", "cutoff")
    assert Injection.from_dict({"time": 1, "actuator": "tilt1", "mode": "locked", "value_deg": 60}).value == pytest.approx(
        math.pi / 3
    )
    a = actuators()
    with pytest.raises(ValueError):
        inject_failures(a, [Injection(0.0, "tilt1", "locked", 3.0)], 0.0)
    with pytest.raises(KeyError):
        inject_failures(a, [Injection(0.0, "rotor9", "cutoff")], 0.0)


def test_actual_stays_in_range():
    a = actuators()
    a.command(np.full(11, 50.0))
    a.advance(1.0)
    assert np.all(a.actual <= a.u_max)


# --- scenarios -----------------------------------------------------------------


def test_bundled_scenarios_load_and_round_trip():
    names = bundled_scenarios()
    assert {"hover_healthy", "hover_motor_cut", "cruise_elevator_lock_6"} <= set(names)
    for n in names:
        sc = load_scenario(n)
        back = Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
        assert back.to_dict() == sc.to_dict()


@pytest.mark.parametrize("patch", [
    {"duration": -1},
    {"dt": 0.003},
    {"plan": []},
    {"schema_version": 2},
    {"allocator": {"awareness": "psychic"}},
    {"failures": [{"time": 99, "actuator": "motor1", "mode": "cutoff"}]},
    {"failures": [{"time": 1, "actuator": "rotor9", "mode": "cutoff"}]},
])
def test_invalid_scenarios_are_rejected(patch):
    d = load_scenario("hover_healthy").to_dict()
    d.update(patch)
    with pytest.raises(ScenarioError):
        Scenario.from_dict(d)


def short(name, seconds=1.0, **kw):
    return load_scenario(name).with_changes(duration=seconds, **kw)


def test_runs_are_deterministic():
    sc = short("detect_hover_motor_cut", 10.5)
    a, b = run_scenario(sc), run_scenario(sc)
    assert a.log.keys() == b.log.keys()
    for k in a.log:
        assert np.array_equal(a.log[k], b.log[k], equal_nan=True), k
    assert a.summary == b.summary


def test_log_columns_and_quaternion_norm():
    res = run_scenario(short("hover_healthy"))
    for col in ("time", "x", "qw", "p", "u_sp_motor1", "u_motor1", "w_des_fz", "w_act_fz", "tau_alloc_x", "meas_p"):
        assert col in res.log
    q = np.column_stack([res.log[c] for c in ("qw", "qx", "qy", "qz")])
    assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) <= 1e-9
    assert len(res.log["time"]) == 101


def test_hover_healthy_holds_position():
    res = run_scenario(load_scenario("hover_healthy"))
    assert not res.crashed
    assert res.summary["final_position_error"] < 0.1
    assert res.summary["alloc_fallback_steps"] == 0


def test_altitude_step_settles():
    sc = load_scenario("hover_altitude_step")
    res = run_scenario(sc)
    t, z = res.log["time"], res.log["z"]
    step_at, z0, z1 = 5.0, 30.0, 31.0
    outside = np.flatnonzero((t >= step_at) & (np.abs(z - z1) > 0.05 * abs(z1 - z0)))
    settle = t[outside[-1]] - step_at if outside.size else 0.0
    assert settle <= 8.0
    assert not res.crashed


def test_crash_flag_on_ground_contact():
    sc = short("hover_healthy", 3.0, initial=RigidBodyState([0, 0, 0.05], [0, 0, -3.0]))
    res = run_scenario(sc)
    assert res.crashed and res.summary["crash_reason"] == "ground contact"
    assert res.log["time"][-1] < 3.0


def test_crash_flag_on_attitude():
    sc = short("hover_healthy", 3.0, initial=RigidBodyState([0, 0, 30.0], attitude=quat_from_euler(1.7, 0, 0)))
    res = run_scenario(sc)
    assert res.crashed and res.summary["crash_time"] == 0.0


def test_unaware_allocator_ignores_the_failure():
    base = short("hover_motor_cut", 10.3)
    informed = run_scenario(base)
    unaware = run_scenario(base.with_changes(awareness="unaware"))
    i = np.searchsorted(informed.log["time"], 10.2)
    assert informed.log["u_sp_motor1"][i] == 0.0  # pinned at its forced value
    assert unaware.log["u_sp_motor1"][i] > 0.3  # still commanded
    assert unaware.log["u_motor1"][i] == 0.0


def test_operating_point_settles_without_chatter():
    # elevator stuck in cruise: successive commands must settle rather than alternate
    res = run_scenario(load_scenario("cruise_elevator_lock_6").with_changes(duration=16.0))
    assert not res.crashed
    late = res.log["time"] > 14.0
    cmds = np.column_stack([res.log[f"u_sp_motor{i}"][late] for i in range(1, 5)])
    assert np.max(np.abs(np.diff(cmds, axis=0))) < 1e-3
    assert convergence_time(res.log, 10.0) is not None


def test_flight_allocator_trim_linearization():
    fa = FlightAllocator(P, linearization="trim")
    res, believed = fa.allocate("hover", [0, 0, P.mass * P.gravity, 0, 0, 0], hover_trim(P), 0.01, FailureSet())
    np.testing.assert_allclose(res.u_sp, hover_trim(P), atol=1e-12)
    with pytest.raises(ValueError):
        FlightAllocator(P, linearization="secant")
