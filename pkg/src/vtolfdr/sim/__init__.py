"""Tiltrotor VTOL simulator: airframe, rigid body, actuators, controller, scenarios."""

from .actuators import ActuatorState, Injection, inject_failures
from .control import CascadedController, ControllerGains, Setpoint, controller_step
from .dynamics import RigidBodyState, SimulationAbort, step_dynamics
from .scenario import Phase, Scenario, ScenarioError, SimResult, load_scenario, run_scenario
from .vehicle import VehicleParams, wrench_from_actuators

__all__ = [
    "ActuatorState", "Injection", "inject_failures", "CascadedController", "ControllerGains", "Setpoint",
    "controller_step", "RigidBodyState", "SimulationAbort", "step_dynamics", "Phase", "Scenario",
    "ScenarioError", "SimResult", "load_scenario", "run_scenario", "VehicleParams", "wrench_from_actuators",
]
