"""Multi-robot exploration with uncertainty-aware frontier selection.

A desk-scale simulator and library: robots explore an unknown planar world
of disc landmarks, estimate their trajectories and the map with a shared
factor graph, summarize map uncertainty on a grid, and pick frontier
targets with pluggable planners (distance-based, belief-space, and the
expectation-style propagation planners).
"""

from .config import (
    NoiseConfig,
    PlannerConfig,
    SimConfig,
    TrialConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    preset,
    save_config,
)
from .factor_graph import (
    BetweenFactor,
    FactorGraph,
    GaugeError,
    GraphEstimate,
    LandmarkKey,
    NotOptimizedError,
    PoseKey,
    PriorPointFactor,
    PriorPoseFactor,
    RangeBearingFactor,
)
from .frontiers import Frontier, FrontierKind, FrontierParams, compute_frontiers
from .geometry import NoiseSpec, Point2, Pose2, RangeBearing
from .harness import BatchSummary, run_batch
from .planners import (
    BeliefSpacePlanner,
    CoordinatedPlanner,
    Decision,
    DecisionContext,
    EmPlanner,
    PlannerWeights,
    make_planner,
)
from .propagation import (
    PropagationDivergence,
    PropagationResult,
    VirtualPlan,
    make_virtual_plan,
    propagate_uncertainty,
)
from .simulation import SharedState, Simulation, TrialRecord, run_trial
from .virtual_map import GridSpec, MapParams, VirtualMap, covariance_intersection, rebuild
from .world import Environment, WorldParams

__all__ = [
    "BatchSummary",
    "BeliefSpacePlanner",
    "BetweenFactor",
    "CoordinatedPlanner",
    "Decision",
    "DecisionContext",
    "EmPlanner",
    "Environment",
    "FactorGraph",
    "Frontier",
    "FrontierKind",
    "FrontierParams",
    "GaugeError",
    "GraphEstimate",
    "GridSpec",
    "LandmarkKey",
    "MapParams",
    "NoiseConfig",
    "NoiseSpec",
    "NotOptimizedError",
    "PlannerConfig",
    "PlannerWeights",
    "Point2",
    "Pose2",
    "PoseKey",
    "PriorPointFactor",
    "PriorPoseFactor",
    "PropagationDivergence",
    "PropagationResult",
    "RangeBearing",
    "RangeBearingFactor",
    "SharedState",
    "SimConfig",
    "Simulation",
    "TrialConfig",
    "TrialRecord",
    "VirtualMap",
    "VirtualPlan",
    "WorldParams",
    "compute_frontiers",
    "config_from_dict",
    "config_to_dict",
    "covariance_intersection",
    "load_config",
    "make_planner",
    "make_virtual_plan",
    "preset",
    "propagate_uncertainty",
    "rebuild",
    "run_batch",
    "run_trial",
    "save_config",
]
