"""Federated world simulation: synthetic zones, objectives and training loops."""

from sgfusion.sim.objectives import OBJECTIVES, Objective, ZoneProblem
from sgfusion.sim.training import (
    ALGORITHMS,
    AlgorithmSpec,
    FusionArtifacts,
    RoundTrace,
    RunResult,
    ZoneModel,
    bind_zones,
    estimate_gradient_bound,
    evaluate,
    local_gradient,
    run,
    traces_from_csv,
    traces_to_csv,
)
from sgfusion.sim.world import UserDataset, WorldSpec, Zone, generate_world, grid_neighbors

__all__ = [
    "ALGORITHMS",
    "OBJECTIVES",
    "AlgorithmSpec",
    "FusionArtifacts",
    "Objective",
    "RoundTrace",
    "RunResult",
    "UserDataset",
    "WorldSpec",
    "Zone",
    "ZoneModel",
    "ZoneProblem",
    "bind_zones",
    "estimate_gradient_bound",
    "evaluate",
    "generate_world",
    "grid_neighbors",
    "local_gradient",
    "run",
    "traces_from_csv",
    "traces_to_csv",
]
