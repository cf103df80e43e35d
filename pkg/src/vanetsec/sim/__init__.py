"""Discrete-event VANET simulator and its scenario format."""

from .crossings import CrossingStats, simulate_crossings
from .engine import SimResult, Simulator, run
from .scenario import SCENARIO_SCHEMA, Scenario, apply_overrides, build_scenario, load_scenario, validate
from .world import Frame, Jammer, Radio, Route, StaticRoute

__all__ = [
    "CrossingStats", "simulate_crossings", "SimResult", "Simulator", "run", "SCENARIO_SCHEMA", "Scenario",
    "apply_overrides", "build_scenario", "load_scenario", "validate", "Frame", "Jammer", "Radio", "Route",
    "StaticRoute",
]
