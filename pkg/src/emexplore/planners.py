"""Target selection policies.

Three families share the same candidate set and virtual-observation
machinery and differ only in how they score a candidate:

* the expectation-style planner predicts the posterior after the whole
  team executes its plans, rebuilds the robot's local virtual map from the
  predicted marginals, and scores map uncertainty over the region both the
  local and the team map consider observed, plus target-spread and travel
  terms;
* the coordinated baseline scores travel distance and target spread only;
* the belief-space baseline propagates a small conditioned graph over the
  future poses alone and scores the traces of their matrix-square-root
  marginals plus travel distance.

All three minimize their utility; ties break by travel cost and then by
the deterministic candidate ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .factor_graph import FactorGraph, PoseKey
from .frontiers import Frontier
from .geometry import NoiseSpec, Point2, Pose2
from .propagation import (
    PropagationDivergence,
    VirtualPlan,
    link_virtual_chains,
    make_virtual_plan,
    propagate_uncertainty,
    virtual_observe,
)
from .virtual_map import GridSpec, MapParams, VirtualMap, rebuild


@dataclass(frozen=True, slots=True)
class PlannerWeights:
    """Utility weights; ``lambda1_scaled`` makes the target-spread weight
    shrink as exploration progresses (weight becomes lambda1 * (1 - r))."""

    lambda0: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 10.0
    lambda1_scaled: bool = False

    def __post_init__(self) -> None:
        if self.lambda0 < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("weights must be non-negative")

    def resolve_lambda1(self, explored_ratio: float) -> float:
        if self.lambda1_scaled:
            return self.lambda1 * max(0.0, 1.0 - explored_ratio)
        return self.lambda1


@dataclass(frozen=True, slots=True)
class CandidateEvaluation:
    """Scores of one candidate.  ``u_m`` carries the active planner's
    uncertainty term (map uncertainty, future-pose uncertainty, or zero for
    the coordinated baseline)."""

    frontier: Frontier
    u_m: float
    u_t: float
    u_d: float
    utility: float


@dataclass(slots=True)
class Decision:
    target: Frontier | None
    evaluations: list[CandidateEvaluation] = field(default_factory=list)


@dataclass(slots=True)
class DecisionContext:
    """Everything a planner may look at when choosing a target.  The graph
    must be optimized; planners never mutate it."""

    robot_id: int
    current_key: PoseKey
    current_pose: Pose2
    graph: FactorGraph
    grid: GridSpec
    map_params: MapParams
    inter_map: VirtualMap
    blocked: np.ndarray
    frontiers: list[Frontier]
    noise: NoiseSpec
    speed: float
    dt: float
    waypoint_spacing: float
    target_history: list[tuple[int, float, float]]
    neighbor_goals: dict[int, tuple[PoseKey, Frontier]]
    explored_ratio: float
    distance_metric: str = "path"
    u_t_max_distance: float = 30.0


def compute_u_t(
    candidate: Point2,
    target_history: list[tuple[int, float, float]],
    robot_id: int,
    d_max: float = 30.0,
) -> float:
    """Target-spread utility: sum of h(d) = 1 - d/d_max (zero beyond d_max)
    over every historical target of every other robot.  Larger means the
    candidate crowds teammates' past choices."""
    total = 0.0
    for rid, tx, ty in target_history:
        if rid == robot_id:
            continue
        d = math.hypot(candidate.x - tx, candidate.y - ty)
        if d < d_max:
            total += 1.0 - d / d_max
    return total


def compute_u_m(inter_map: VirtualMap, local_map: VirtualMap) -> float:
    """Map uncertainty of the local map over the overlap region: cells both
    maps consider observed (q above threshold), scored by the local map's
    covariance traces."""
    if inter_map.grid != local_map.grid:
        raise ValueError("maps must share grid geometry")
    mask = inter_map.explored_mask() & local_map.explored_mask()
    return local_map.sum_uncertainty(mask)


def matrix_sqrt(cov: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix by eigendecomposition
    with eigenvalues clamped at zero."""
    c = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    if w.min() < -1e-9 * max(1.0, abs(w.max())):
        raise ValueError("matrix is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sqrt_trace(cov: np.ndarray) -> float:
    """trace of the principal matrix square root (sum of root eigenvalues)."""
    c = np.asarray(cov, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (c + c.T))
    if w.min() < -1e-9 * max(1.0, abs(w.max())):
        raise ValueError("matrix is not positive semidefinite")
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def select_best(evaluations: list[CandidateEvaluation]) -> Frontier | None:
    """Utility argmin; ties by smaller travel cost, then input order."""
    best = None
    best_key = None
    for i, ev in enumerate(evaluations):
        key = (ev.utility, ev.u_d, i)
        if best_key is None or key < best_key:
            best_key = key
            best = ev.frontier
    return best


def _candidate_distance(ctx: DecisionContext, frontier: Frontier, plan: VirtualPlan) -> float:
    if ctx.distance_metric == "euclidean":
        return frontier.distance
    return plan.path_length


def _neighbor_plans(ctx: DecisionContext) -> list[VirtualPlan]:
    """Predicted plans of the other robots toward their current targets;
    robots without an active target contribute nothing here and act as
    parked single-pose chains only if they appear as a plan start."""
    plans: list[VirtualPlan] = []
    for rid in sorted(ctx.neighbor_goals):
        if rid == ctx.robot_id:
            continue
        key, goal = ctx.neighbor_goals[rid]
        val = ctx.graph.value(key)
        plan = make_virtual_plan(
            ctx.grid,
            ctx.blocked,
            np.array([val.x, val.y]),
            key,
            goal,
            ctx.waypoint_spacing,
        )
        if plan is not None:
            plans.append(plan)
    return plans


class EmPlanner:
    """Uncertainty-aware selection by predicted map quality."""

    def __init__(self, weights: PlannerWeights, name: str = "em2"):
        self.weights = weights
        self.name = name

    def decide(self, ctx: DecisionContext) -> Decision:
        neighbor_plans = _neighbor_plans(ctx)
        lam1 = self.weights.resolve_lambda1(ctx.explored_ratio)
        # one factorization of the current information matrix serves every
        # candidate; each evaluation pays only for its own virtual chain.
        # Neighbor chain anchors join the presolve so no candidate's
        # footprint falls outside it.
        base_keys = [
            k
            for k in ctx.graph.pose_keys(ctx.robot_id)
            if not ctx.graph.is_fixed(k)
        ] + [k for k in ctx.graph.landmark_keys() if not ctx.graph.is_fixed(k)]
        for other in sorted(ctx.neighbor_goals):
            key = ctx.neighbor_goals[other][0]
            if other != ctx.robot_id and not ctx.graph.is_fixed(key):
                base_keys.append(key)
        context = ctx.graph.marginal_context(base_keys)
        incidence_cache: dict = {}  # real poses recur across candidates
        evals: list[CandidateEvaluation] = []
        xy = np.array([ctx.current_pose.x, ctx.current_pose.y])
        for f in ctx.frontiers:
            plan = make_virtual_plan(ctx.grid, ctx.blocked, xy, ctx.current_key, f, ctx.waypoint_spacing)
            if plan is None:
                continue
            u_d = _candidate_distance(ctx, f, plan)
            try:
                prop = propagate_uncertainty(
                    ctx.graph,
                    [plan] + neighbor_plans,
                    ctx.noise,
                    ctx.speed,
                    ctx.dt,
                    marginal_robot_ids={ctx.robot_id},
                    context=context,
                )
            except PropagationDivergence:
                continue
            local = rebuild(
                ctx.grid,
                ctx.map_params,
                prop.estimate,
                prop.marginals,
                robot_filter={ctx.robot_id},
                incidence_cache=incidence_cache,
            )
            u_m = compute_u_m(ctx.inter_map, local)
            u_t = compute_u_t(f.position, ctx.target_history, ctx.robot_id, ctx.u_t_max_distance)
            utility = self.weights.lambda0 * u_m + lam1 * u_t + self.weights.lambda2 * u_d
            evals.append(CandidateEvaluation(f, u_m, u_t, u_d, utility))
        return Decision(select_best(evals), evals)


class CoordinatedPlanner:
    """Distance and target-spread only; no belief propagation."""

    name = "ce"

    def __init__(self, lambda_distance: float = 1.0, lambda_target: float = 10.0):
        self.lambda_distance = lambda_distance
        self.lambda_target = lambda_target

    def decide(self, ctx: DecisionContext) -> Decision:
        evals: list[CandidateEvaluation] = []
        xy = np.array([ctx.current_pose.x, ctx.current_pose.y])
        for f in ctx.frontiers:
            plan = make_virtual_plan(ctx.grid, ctx.blocked, xy, ctx.current_key, f, ctx.waypoint_spacing)
            if plan is None:
                continue
            u_d = _candidate_distance(ctx, f, plan)
            u_t = compute_u_t(f.position, ctx.target_history, ctx.robot_id, ctx.u_t_max_distance)
            utility = self.lambda_distance * u_d + self.lambda_target * u_t
            evals.append(CandidateEvaluation(f, 0.0, u_t, u_d, utility))
        return Decision(select_best(evals), evals)


class BeliefSpacePlanner:
    """Future-pose uncertainty plus distance.

    Propagation runs over the future poses only: a throwaway graph holds
    the current poses and nearby landmarks as fixed (conditioned) variables
    and optimizes nothing but the virtual chains.  The score sums the trace
    of the matrix square root of each future pose marginal, which never sees
    the benefit of revisiting old landmarks for the historical estimate.
    """

    name = "bsp"

    def __init__(self, lambda_distance: float = 5.0, lambda_uncertainty: float = 1.0):
        self.lambda_distance = lambda_distance
        self.lambda_uncertainty = lambda_uncertainty

    def decide(self, ctx: DecisionContext) -> Decision:
        neighbor_plans = _neighbor_plans(ctx)
        lm_keys = ctx.graph.landmark_keys()
        lm_xy = (
            np.array([[ctx.graph.value(k).x, ctx.graph.value(k).y] for k in lm_keys])
            if lm_keys
            else np.zeros((0, 2))
        )
        evals: list[CandidateEvaluation] = []
        xy = np.array([ctx.current_pose.x, ctx.current_pose.y])
        for f in ctx.frontiers:
            plan = make_virtual_plan(ctx.grid, ctx.blocked, xy, ctx.current_key, f, ctx.waypoint_spacing)
            if plan is None:
                continue
            u_d = _candidate_distance(ctx, f, plan)
            plans = [plan] + neighbor_plans
            g = FactorGraph()
            for p in plans:
                val = ctx.graph.value(p.start_key)
                g.add_variable(p.start_key, Pose2(val.x, val.y, val.theta), fixed=True)
            if lm_keys:
                wps = np.vstack([p.waypoints for p in plans])
                d = np.linalg.norm(lm_xy[:, None, :] - wps[None, :, :], axis=2)
                near = np.min(d, axis=1) <= ctx.noise.max_sensing_range
                for j in np.nonzero(near)[0]:
                    k = lm_keys[int(j)]
                    v = ctx.graph.value(k)
                    g.add_variable(k, Point2(v.x, v.y), fixed=True)
            chains = [virtual_observe(g, p, ctx.noise, ctx.speed, ctx.dt) for p in plans]
            for i in range(len(chains)):
                for j in range(i + 1, len(chains)):
                    link_virtual_chains(g, chains[i], chains[j], ctx.noise)
            future = [k for chain in chains for k in chain[1:]]
            try:
                g.optimize()
            except Exception:
                continue
            if future:
                marg = g.marginal_covariances(future)
                u_b = sum(sqrt_trace(marg.cov(k)) for k in future)
            else:
                u_b = 0.0
            utility = self.lambda_distance * u_d + self.lambda_uncertainty * u_b
            evals.append(CandidateEvaluation(f, u_b, 0.0, u_d, utility))
        return Decision(select_best(evals), evals)


def make_planner(name: str):
    """Planner registry: em2, em3, ce, bsp."""
    if name == "em2":
        return EmPlanner(PlannerWeights(1.0, 0.0, 10.0), name="em2")
    if name == "em3":
        return EmPlanner(PlannerWeights(1.0, 20.0, 10.0, lambda1_scaled=True), name="em3")
    if name == "ce":
        return CoordinatedPlanner(1.0, 10.0)
    if name == "bsp":
        return BeliefSpacePlanner(5.0, 1.0)
    raise ValueError(f"unknown planner {name!r}; expected em2, em3, ce, or bsp")
