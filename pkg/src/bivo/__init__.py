"""Occlusion-aware motion planning with a learned view-sharing sensor and an occluded-trajectory generator."""

from __future__ import annotations

from .planner import ALL_MODES, CostWeights, PlannerConfig, PlannerMode, PlannerModels, PlanningContext, plan
from .world import AgentState, ControlLimits, LaneGraph, Scene, Trajectory

__all__ = ["ALL_MODES", "AgentState", "ControlLimits", "CostWeights", "LaneGraph", "PlannerConfig", "PlannerMode",
           "PlannerModels", "PlanningContext", "Scene", "Trajectory", "plan"]
__version__ = "0.1.0"
