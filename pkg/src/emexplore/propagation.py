"""Predictive belief propagation along candidate paths.

To score a candidate target the planner extends a clone of the SLAM graph
with a chain of virtual future poses along the planned path, plus the
landmark and robot-to-robot observations those poses would collect.  The
virtual measurements are synthesized from the current estimates, so they
carry zero residual: the extended graph is already at its optimum and
re-optimizing it converges immediately.  What changes is the information
matrix, and with it the marginals, which is exactly what the expected map
quality score needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .factor_graph import (
    BetweenFactor,
    FactorGraph,
    GraphEstimate,
    MarginalContext,
    MarginalSet,
    PoseKey,
    RangeBearingFactor,
)
from .frontiers import Frontier
from .geometry import NoiseSpec, Pose2, observe_landmark, se2_between
from .grid_paths import astar, cells_to_world, polyline_length, resample_polyline
from .virtual_map import GridSpec

# Virtual pose time indices start here so they sort after every real
# keyframe and can never collide with one.
VIRTUAL_TIME_BASE = 1_000_000


class PropagationDivergence(RuntimeError):
    """The extended graph failed to re-optimize; the candidate that caused
    it should be treated as infeasible."""


@dataclass(frozen=True, slots=True)
class VirtualPlan:
    """A candidate path discretized into waypoints.

    ``waypoints[0]`` is the robot's current position (matching
    ``start_key``); later rows are spaced along the planned path with the
    exact target last.  ``headings[i]`` is the direction of travel into
    waypoint ``i``.  ``path_length`` is the world length of the planned
    path before resampling.
    """

    robot_id: int
    start_key: PoseKey
    target: Frontier
    waypoints: np.ndarray
    headings: np.ndarray
    path_length: float


def make_virtual_plan(
    grid: GridSpec,
    blocked: np.ndarray,
    start_xy: np.ndarray,
    start_key: PoseKey,
    target: Frontier,
    spacing: float,
) -> VirtualPlan | None:
    """Plan a path from the robot to a frontier and resample it into
    waypoints.  Returns None when no path exists."""
    start_cell = grid.cell_of(float(start_xy[0]), float(start_xy[1]))
    start_cell = (
        min(max(start_cell[0], 0), grid.n_rows - 1),
        min(max(start_cell[1], 0), grid.n_cols - 1),
    )
    cells = astar(grid, blocked, start_cell, target.cell())
    if cells is None:
        return None
    pts = cells_to_world(grid, cells)
    pts[0] = start_xy[:2]
    length = polyline_length(pts)
    wps = resample_polyline(pts, spacing)
    k = wps.shape[0]
    headings = np.empty(k)
    if k == 1:
        headings[0] = target.heading
    else:
        seg = np.diff(wps, axis=0)
        headings[1:] = np.arctan2(seg[:, 1], seg[:, 0])
        headings[0] = headings[1]
    return VirtualPlan(
        robot_id=start_key.robot_id,
        start_key=start_key,
        target=target,
        waypoints=wps,
        headings=headings,
        path_length=length,
    )


def virtual_observe(
    graph: FactorGraph,
    plan: VirtualPlan,
    noise: NoiseSpec,
    speed: float = 1.0,
    dt: float = 1.0,
) -> list[PoseKey]:
    """Extend ``graph`` with the virtual pose chain of ``plan``.

    Adds one pose variable per waypoint after the first, chained by virtual
    odometry whose covariance is the per-step covariance scaled by the
    number of motion steps the segment takes.  Each new pose observes every
    landmark currently within sensing range of it (per the graph's own
    landmark estimates), once per unique waypoint position.  All synthesized
    measurements have zero residual at the current estimates.

    Returns the chain of keys, starting with ``plan.start_key``.
    """
    lm_keys = graph.landmark_keys()
    if lm_keys:
        lm_xy = np.array([[graph.value(k).x, graph.value(k).y] for k in lm_keys])
    else:
        lm_xy = np.zeros((0, 2))
    step_cov = noise.odometry_step_cov()
    rb_cov = noise.range_bearing_cov()
    max_range = noise.max_sensing_range

    prev_key = plan.start_key
    prev_val = graph.value(plan.start_key)
    prev_pose = Pose2(prev_val.x, prev_val.y, prev_val.theta)
    chain = [plan.start_key]
    seen: set[tuple[float, float]] = set()
    wps = plan.waypoints
    for i in range(1, wps.shape[0]):
        pose = Pose2(wps[i, 0], wps[i, 1], plan.headings[i])
        key = PoseKey(plan.robot_id, VIRTUAL_TIME_BASE + i)
        graph.add_variable(key, pose)
        seg_len = math.hypot(wps[i, 0] - wps[i - 1, 0], wps[i, 1] - wps[i - 1, 1])
        n_steps = max(1, int(math.ceil(seg_len / (speed * dt) - 1e-9)))
        graph.add_factor(
            BetweenFactor(prev_key, key, se2_between(prev_pose, pose), n_steps * step_cov, kind="virtual_odometry")
        )
        pos_id = (round(wps[i, 0], 9), round(wps[i, 1], 9))
        if pos_id not in seen and lm_keys:
            seen.add(pos_id)
            d = np.hypot(lm_xy[:, 0] - wps[i, 0], lm_xy[:, 1] - wps[i, 1])
            for j in np.nonzero((d > 1e-9) & (d <= max_range))[0]:
                lm = lm_keys[int(j)]
                meas = observe_landmark(pose, graph.value(lm))
                graph.add_factor(RangeBearingFactor(key, lm, meas, rb_cov))
        prev_key, prev_pose = key, pose
        chain.append(key)
    return chain


def link_virtual_chains(
    graph: FactorGraph,
    chain_a: list[PoseKey],
    chain_b: list[PoseKey],
    noise: NoiseSpec,
) -> int:
    """Add virtual rendezvous factors between two chains.

    Chains are walked index by index (the robots travel simultaneously); the
    shorter chain is padded by reusing its final pose, modeling a robot that
    arrives first and waits.  A factor is added when the estimated distance
    at that index is within sensing range, once per pose pair.  Returns the
    number of factors added.
    """
    cov = noise.rendezvous_cov()
    n = max(len(chain_a), len(chain_b))
    added = 0
    done: set[tuple[PoseKey, PoseKey]] = set()
    for i in range(1, n):
        ka = chain_a[min(i, len(chain_a) - 1)]
        kb = chain_b[min(i, len(chain_b) - 1)]
        if (ka, kb) in done:
            continue
        done.add((ka, kb))
        pa = graph.value(ka)
        pb = graph.value(kb)
        if math.hypot(pa.x - pb.x, pa.y - pb.y) > noise.max_sensing_range:
            continue
        pose_a = Pose2(pa.x, pa.y, pa.theta)
        pose_b = Pose2(pb.x, pb.y, pb.theta)
        graph.add_factor(
            BetweenFactor(ka, kb, se2_between(pose_a, pose_b), cov, kind="virtual_rendezvous")
        )
        added += 1
    return added


@dataclass
class PropagationResult:
    graph: FactorGraph
    estimate: GraphEstimate
    marginals: MarginalSet
    chains: dict[int, list[PoseKey]] = field(default_factory=dict)


def propagate_uncertainty(
    graph: FactorGraph,
    plans: list[VirtualPlan],
    noise: NoiseSpec,
    speed: float = 1.0,
    dt: float = 1.0,
    marginal_robot_ids: set[int] | None = None,
    context: MarginalContext | None = None,
) -> PropagationResult:
    """Predict the posterior after executing the given plans.

    Clones the graph, injects each plan's virtual chain, links every pair
    of chains with range-gated rendezvous factors, re-optimizes (a no-op
    thanks to the zero-residual construction) and recovers marginals.  Pose
    marginals are restricted to ``marginal_robot_ids`` when given (landmark
    marginals are always included); the source graph is never touched.

    When ``context`` is given (a :class:`MarginalContext` built on ``graph``
    whose presolved keys cover the marginals requested here), the re-solve
    is skipped outright: values cannot move under zero-residual factors, and
    the marginals come from the context's cached factorization plus a
    low-rank update.  Results match the direct route to solver precision.
    """
    if len({p.robot_id for p in plans}) != len(plans):
        raise ValueError("one plan per robot")
    g = graph.clone()
    chains: dict[int, list[PoseKey]] = {}
    for plan in plans:
        chains[plan.robot_id] = virtual_observe(g, plan, noise, speed, dt)
    ids = sorted(chains)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            link_virtual_chains(g, chains[ids[i]], chains[ids[j]], noise)
    if context is None:
        est = g.optimize()
        if not est.converged:
            raise PropagationDivergence("predicted-belief optimization did not converge")
    else:
        est = g.current_estimate(with_cost=False)
        est.converged = True  # zero-residual extension of an optimum
    keys = [
        k
        for k in g.pose_keys()
        if not g.is_fixed(k) and (marginal_robot_ids is None or k.robot_id in marginal_robot_ids)
    ]
    keys += [k for k in g.landmark_keys() if not g.is_fixed(k)]
    marg = g.marginal_covariances(keys) if context is None else context.extended_marginals(g, keys)
    return PropagationResult(graph=g, estimate=est, marginals=marg, chains=chains)
