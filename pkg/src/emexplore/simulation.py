"""Multi-robot exploration trial loop.

One trial wires everything together: a sampled true world, per-robot noisy
sensing feeding a single shared factor graph (centralized estimation, the
no-bandwidth-limit communication model), an occupancy-only team map for
frontier generation, and a pluggable target-selection planner.

Timing model: robots move every step; the graph grows at keyframes.  All
robots emit a keyframe on the aligned schedule (every ``keyframe_stride``
steps), which is also the only time rendezvous measurements are taken, so
both endpoints of a relative-pose factor share a timestamp.  A robot that
needs a decision off-schedule gets a forced keyframe (odometry and landmark
factors only) so it can plan from a current estimate.  Between keyframes a
robot's believed pose is its last optimized estimate composed with the
dead-reckoned odometry since.

Decisions happen on arrival (or on a stall), asynchronously per robot, in
simulation-time order with ties broken by robot id.  Everything is driven
by per-robot RNG streams spawned from the trial seed, so trials are
bit-reproducible.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrialConfig
from .factor_graph import (
    BetweenFactor,
    FactorGraph,
    GraphEstimate,
    LandmarkKey,
    PoseKey,
    PriorPoseFactor,
    RangeBearingFactor,
)
from .frontiers import Frontier, compute_frontiers
from .geometry import Pose2, project_observation, se2_compose
from .grid_paths import inflate_obstacles
from .planners import Decision, DecisionContext, make_planner
from .virtual_map import GridSpec, VirtualMap, rebuild
from .world import (
    ControlParams,
    Environment,
    OdometryAccumulator,
    RobotBody,
    apf_control,
    sense_landmarks,
    sense_relative,
)

_ANCHOR_SIGMA = 1e-3


def _f(v: float) -> str:
    return repr(float(v))


@dataclass
class SharedState:
    """What robots publish to each other: chosen targets (full history)
    and the currently active goal per robot."""

    target_history: list[tuple[int, float, float]] = field(default_factory=list)
    current_goals: dict[int, Frontier] = field(default_factory=dict)


class TrialRecord:
    """Complete, deterministic record of one trial.

    Tables (written as CSV, units in the headers):

    * steps: one wide row per simulation step with cumulative distance,
      explored ratio, RMSE series, and per-robot true/estimated poses and
      goal cells;
    * decisions: one row per candidate evaluation with the chosen flag;
    * poses: every keyframe pose, truth vs final estimate;
    * landmarks: truth vs final estimate (blank where never observed);
    * summary: one row of final scalars.

    Float fields are serialized with ``repr`` so identical trials produce
    byte-identical files.
    """

    def __init__(self, seed: int, planner_name: str, n_robots: int):
        self.seed = seed
        self.planner_name = planner_name
        self.n_robots = n_robots
        self.step_rows: list[str] = []
        self.decision_rows: list[str] = []
        self.pose_rows: list[str] = []
        self.landmark_rows: list[str] = []
        self.summary: dict[str, object] = {}

    def steps_header(self) -> str:
        cols = ["step", "total_distance_m", "explored_ratio", "loc_rmse_m", "lm_rmse_m"]
        for i in range(self.n_robots):
            cols += [
                f"r{i}_true_x_m",
                f"r{i}_true_y_m",
                f"r{i}_true_theta_rad",
                f"r{i}_est_x_m",
                f"r{i}_est_y_m",
                f"r{i}_est_theta_rad",
                f"r{i}_goal_row",
                f"r{i}_goal_col",
            ]
        return ",".join(cols)

    DECISIONS_HEADER = (
        "step,robot_id,planner,kind,cell_row,cell_col,u_m,u_t,u_d_m,utility,chosen,"
        "landmark_id,target_robot_id"
    )
    POSES_HEADER = (
        "robot_id,time_index,true_x_m,true_y_m,true_theta_rad,est_x_m,est_y_m,est_theta_rad"
    )
    LANDMARKS_HEADER = "landmark_id,true_x_m,true_y_m,observed,est_x_m,est_y_m"

    def summary_header_and_row(self) -> tuple[str, str]:
        keys = list(self.summary)
        vals = []
        for k in keys:
            v = self.summary[k]
            vals.append(_f(v) if isinstance(v, float) else str(v))
        return ",".join(keys), ",".join(vals)

    def write(self, out_dir: str, prefix: str) -> dict[str, str]:
        """Write all tables; returns {table: path}."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {}

        def put(table: str, header: str, rows: list[str]) -> None:
            path = os.path.join(out_dir, f"{prefix}_{table}.csv")
            with open(path, "w") as fh:
                fh.write(header + "\n")
                for r in rows:
                    fh.write(r + "\n")
            paths[table] = path

        put("steps", self.steps_header(), self.step_rows)
        put("decisions", self.DECISIONS_HEADER, self.decision_rows)
        put("poses", self.POSES_HEADER, self.pose_rows)
        put("landmarks", self.LANDMARKS_HEADER, self.landmark_rows)
        s_header, s_row = self.summary_header_and_row()
        put("summary", s_header, [s_row])
        return paths


@dataclass
class _RobotState:
    body: RobotBody
    rng: np.random.Generator
    odom: OdometryAccumulator
    belief_ref: Pose2
    last_kf: int = 0
    goal: Frontier | None = None
    stall_best: float = math.inf
    stall_count: int = 0
    distance: float = 0.0
    # Goal cell abandoned by the last stall, excluded from the replan that
    # the stall triggers so the robot cannot immediately re-adopt it.
    abandoned_cell: tuple[int, int] | None = None

    def belief_now(self) -> Pose2:
        return se2_compose(self.belief_ref, self.odom.relative)


class Simulation:
    """One configured trial; call :meth:`run` once."""

    def __init__(self, config: TrialConfig):
        self.config = config
        self.planner = make_planner(config.planner.name)
        self.noise = config.noise.to_spec()
        self.map_params = config.map_params()
        self.ctrl = ControlParams(speed=config.sim.speed, dt=config.sim.dt)

        ss = np.random.SeedSequence(config.seed)
        streams = ss.spawn(1 + config.sim.n_robots)
        env_rng = np.random.default_rng(streams[0])
        self.env = Environment.sample(config.world, env_rng)
        w = config.world
        self.grid = GridSpec.from_bounds(w.x_min, w.y_min, w.x_max, w.y_max, config.sim.cell_size)

        starts = config.start_poses()
        if len(starts) != config.sim.n_robots:
            raise ValueError("need one start pose per robot")
        for p in starts:
            if self.env.collides(p.x, p.y):
                raise ValueError(f"start pose ({p.x}, {p.y}) collides with the world")

        self.robots = [
            _RobotState(
                body=RobotBody(i, starts[i]),
                rng=np.random.default_rng(streams[1 + i]),
                odom=OdometryAccumulator(self.noise),
                belief_ref=starts[i],
            )
            for i in range(config.sim.n_robots)
        ]
        self.graph = FactorGraph()
        self.shared = SharedState()
        self.record = TrialRecord(config.seed, config.planner.name, config.sim.n_robots)
        self.kf_truth: dict[PoseKey, Pose2] = {}
        # Step at which each robot last observed each landmark, for the
        # revisit cooldown: a landmark seen moments ago has no fresh
        # information to offer, so its standoff cell is withheld for a while.
        self.lm_last_seen: list[dict[int, int]] = [{} for _ in range(config.sim.n_robots)]
        self.est: GraphEstimate | None = None
        self.inter: VirtualMap | None = None
        self.blocked: np.ndarray | None = None
        self.explored_max = 0.0
        self.loc_rmse = 0.0
        self.lm_rmse = 0.0
        self.dist_at_target = -1.0
        self.t = 0
        self.termination = "budget"

    # -- measurement plumbing ------------------------------------------------

    def _observe_landmarks(self, rid: int, key: PoseKey, belief: Pose2) -> None:
        rs = self.robots[rid]
        for lm_id, rb in sense_landmarks(self.env, self.noise, rs.body.pose, rs.rng):
            lkey = LandmarkKey(lm_id)
            if not self.graph.has_variable(lkey):
                self.graph.add_variable(lkey, project_observation(belief, rb))
            self.graph.add_factor(
                RangeBearingFactor(key, lkey, rb, self.noise.range_bearing_cov())
            )
            self.lm_last_seen[rid][lm_id] = self.t

    def _add_keyframe(self, rid: int, t: int) -> PoseKey:
        rs = self.robots[rid]
        meas, cov = rs.odom.emit()
        prev = PoseKey(rid, rs.last_kf)
        key = PoseKey(rid, t)
        belief = se2_compose(rs.belief_ref, meas)
        self.graph.add_variable(key, belief)
        self.graph.add_factor(BetweenFactor(prev, key, meas, cov, kind="odometry"))
        self.kf_truth[key] = rs.body.pose
        rs.last_kf = t
        rs.belief_ref = belief
        self._observe_landmarks(rid, key, belief)
        return key

    def _aligned_rendezvous(self, t: int) -> None:
        n = len(self.robots)
        for i in range(n):
            for j in range(i + 1, n):
                a, b = self.robots[i], self.robots[j]
                d = math.hypot(a.body.pose.x - b.body.pose.x, a.body.pose.y - b.body.pose.y)
                if d > self.noise.max_sensing_range:
                    continue
                meas = sense_relative(self.noise, a.body.pose, b.body.pose, a.rng)
                self.graph.add_factor(
                    BetweenFactor(
                        PoseKey(i, t), PoseKey(j, t), meas, self.noise.rendezvous_cov(), kind="rendezvous"
                    )
                )

    # -- shared belief refresh -----------------------------------------------

    def _refresh(self) -> None:
        """Optimize, update per-robot reference beliefs, rebuild the team
        occupancy map and metric series."""
        self.est = self.graph.optimize()
        for rs in self.robots:
            rs.belief_ref = self.est.value(PoseKey(rs.body.robot_id, rs.last_kf))
        self.inter = rebuild(self.grid, self.map_params, self.est, with_covariance=False)
        self.explored_max = max(self.explored_max, self.inter.explored_ratio())
        if self.dist_at_target < 0 and self.explored_max >= self.config.sim.explored_target:
            self.dist_at_target = self._total_distance()
        lm_keys, lm_est = self.est.landmark_array()
        self.lm_keys = lm_keys
        self.lm_est = lm_est
        self.blocked = inflate_obstacles(
            self.grid,
            lm_est,
            self.config.world.collision_radius + self.config.sim.planning_margin,
        )
        self._update_rmse()

    def _total_distance(self) -> float:
        return sum(rs.distance for rs in self.robots)

    def _update_rmse(self) -> None:
        keys, est = self.est.pose_array()
        err2 = 0.0
        for k, row in zip(keys, est):
            truth = self.kf_truth[k]
            err2 += (row[0] - truth.x) ** 2 + (row[1] - truth.y) ** 2
        self.loc_rmse = math.sqrt(err2 / len(keys)) if keys else 0.0
        if self.lm_keys:
            truth = self.env.landmarks[[k.landmark_id for k in self.lm_keys]]
            d2 = np.sum((self.lm_est - truth) ** 2, axis=1)
            self.lm_rmse = float(np.sqrt(np.mean(d2)))
        else:
            self.lm_rmse = 0.0

    # -- decisions -------------------------------------------------------------

    def _decide(self, rid: int) -> None:
        rs = self.robots[rid]
        belief = rs.belief_ref
        cooldown = self.config.planner.revisit_cooldown_steps
        seen = self.lm_last_seen[rid]
        lm_dict = {
            k.landmark_id: self.lm_est[i]
            for i, k in enumerate(self.lm_keys)
            if cooldown <= 0 or self.t - seen.get(k.landmark_id, -cooldown) >= cooldown
        }
        neighbor_targets = {
            other: goal.cell()
            for other, goal in self.shared.current_goals.items()
            if other != rid
        }
        frontiers = compute_frontiers(
            self.inter,
            self.blocked,
            np.array([belief.x, belief.y]),
            lm_dict,
            neighbor_targets,
            self.config.planner.frontier_params(),
            exclude_radius=self.config.arrival_radius(),
        )
        if rs.abandoned_cell is not None:
            frontiers = [f for f in frontiers if f.cell() != rs.abandoned_cell]
            rs.abandoned_cell = None
        decision = Decision(None)
        if frontiers:
            ctx = DecisionContext(
                robot_id=rid,
                current_key=PoseKey(rid, rs.last_kf),
                current_pose=belief,
                graph=self.graph,
                grid=self.grid,
                map_params=self.map_params,
                inter_map=self.inter,
                blocked=self.blocked,
                frontiers=frontiers,
                noise=self.noise,
                speed=self.config.sim.speed,
                dt=self.config.sim.dt,
                waypoint_spacing=self.config.waypoint_spacing(),
                target_history=self.shared.target_history,
                neighbor_goals={
                    other: (PoseKey(other, self.robots[other].last_kf), goal)
                    for other, goal in self.shared.current_goals.items()
                    if other != rid
                },
                explored_ratio=self.explored_max,
                distance_metric=self.config.planner.distance_metric,
                u_t_max_distance=self.config.planner.u_t_max_distance,
            )
            decision = self.planner.decide(ctx)
        chosen = decision.target
        for ev in decision.evaluations:
            f = ev.frontier
            self.record.decision_rows.append(
                ",".join(
                    [
                        str(self.t),
                        str(rid),
                        self.planner.name,
                        f.kind.name.lower(),
                        str(f.row),
                        str(f.col),
                        _f(ev.u_m),
                        _f(ev.u_t),
                        _f(ev.u_d),
                        _f(ev.utility),
                        "1" if f is chosen else "0",
                        str(f.landmark_id if f.landmark_id is not None else -1),
                        str(f.robot_id if f.robot_id is not None else -1),
                    ]
                )
            )
        rs.stall_best = math.inf
        rs.stall_count = 0
        if chosen is None:
            rs.goal = None
            self.shared.current_goals.pop(rid, None)
        else:
            rs.goal = chosen
            self.shared.current_goals[rid] = chosen
            self.shared.target_history.append((rid, chosen.position.x, chosen.position.y))

    # -- recording ---------------------------------------------------------------

    def _record_step(self) -> None:
        row = [
            str(self.t),
            _f(self._total_distance()),
            _f(self.explored_max),
            _f(self.loc_rmse),
            _f(self.lm_rmse),
        ]
        for rs in self.robots:
            belief = rs.belief_now()
            true = rs.body.pose
            goal = rs.goal
            row += [
                _f(true.x),
                _f(true.y),
                _f(true.theta),
                _f(belief.x),
                _f(belief.y),
                _f(belief.theta),
                str(goal.row if goal is not None else -1),
                str(goal.col if goal is not None else -1),
            ]
        self.record.step_rows.append(",".join(row))

    def _finalize(self) -> TrialRecord:
        est = self.est
        keys, arr = est.pose_array()
        for k, row in zip(keys, arr):
            truth = self.kf_truth[k]
            self.record.pose_rows.append(
                ",".join(
                    [
                        str(k.robot_id),
                        str(k.time_index),
                        _f(truth.x),
                        _f(truth.y),
                        _f(truth.theta),
                        _f(row[0]),
                        _f(row[1]),
                        _f(row[2]),
                    ]
                )
            )
        est_by_id = {k.landmark_id: self.lm_est[i] for i, k in enumerate(self.lm_keys)}
        for lm_id in range(self.env.landmarks.shape[0]):
            tx, ty = self.env.landmarks[lm_id]
            if lm_id in est_by_id:
                ex, ey = est_by_id[lm_id]
                self.record.landmark_rows.append(
                    f"{lm_id},{_f(tx)},{_f(ty)},1,{_f(ex)},{_f(ey)}"
                )
            else:
                self.record.landmark_rows.append(f"{lm_id},{_f(tx)},{_f(ty)},0,,")
        self.record.summary = {
            "seed": self.config.seed,
            "planner": self.planner.name,
            "n_robots": len(self.robots),
            "termination": self.termination,
            "steps": self.t,
            "explored_ratio": float(self.explored_max),
            "total_distance_m": float(self._total_distance()),
            "distance_at_explored_target_m": float(self.dist_at_target),
            "loc_rmse_m": float(self.loc_rmse),
            "lm_rmse_m": float(self.lm_rmse),
            "n_keyframes": len(self.kf_truth),
            "n_landmarks_observed": len(self.lm_keys),
        }
        return self.record

    # -- main loop -----------------------------------------------------------------

    def _initialize(self) -> None:
        n = len(self.robots)
        anchor = self.robots[0].belief_ref
        self.graph.add_variable(PoseKey(0, 0), anchor)
        self.kf_truth[PoseKey(0, 0)] = self.robots[0].body.pose
        self.graph.add_factor(
            PriorPoseFactor(PoseKey(0, 0), anchor, _ANCHOR_SIGMA**2 * np.eye(3))
        )
        # Teammates are co-initialized from a relative measurement taken by
        # robot 0 at the shared start, which also seeds the first
        # inter-robot loop-closure factors.
        for i in range(1, n):
            a, b = self.robots[0], self.robots[i]
            meas = sense_relative(self.noise, a.body.pose, b.body.pose, a.rng)
            belief_i = se2_compose(anchor, meas)
            self.robots[i].belief_ref = belief_i
            self.graph.add_variable(PoseKey(i, 0), belief_i)
            self.kf_truth[PoseKey(i, 0)] = b.body.pose
            self.graph.add_factor(
                BetweenFactor(
                    PoseKey(0, 0), PoseKey(i, 0), meas, self.noise.rendezvous_cov(), kind="rendezvous"
                )
            )
        for i in range(1, n):
            for j in range(i + 1, n):
                a, b = self.robots[i], self.robots[j]
                d = math.hypot(a.body.pose.x - b.body.pose.x, a.body.pose.y - b.body.pose.y)
                if d > self.noise.max_sensing_range:
                    continue
                meas = sense_relative(self.noise, a.body.pose, b.body.pose, a.rng)
                self.graph.add_factor(
                    BetweenFactor(PoseKey(i, 0), PoseKey(j, 0), meas, self.noise.rendezvous_cov(), kind="rendezvous")
                )
        for i in range(n):
            self._observe_landmarks(i, PoseKey(i, 0), self.robots[i].belief_ref)
        self._refresh()
        for i in range(n):
            self._decide(i)
        self._record_step()

    def run(self) -> TrialRecord:
        self._initialize()
        cfg = self.config.sim
        arrival = self.config.arrival_radius()
        stall_eps = 0.05
        while self.t < cfg.max_steps:
            self.t += 1
            aligned = self.t % cfg.keyframe_stride == 0
            needs_decision: list[int] = []

            for rs in self.robots:
                if rs.goal is None:
                    rs.odom.push_still()
                    continue
                goal_xy = np.array([rs.goal.position.x, rs.goal.position.y])
                turn, advance, _ = apf_control(
                    self.env, self.ctrl, rs.belief_now(), rs.body.pose, goal_xy
                )
                true_step = rs.body.commit(rs.body.apply(turn, advance))
                rs.odom.push(true_step, rs.rng)
                rs.distance += advance

                belief = rs.belief_now()
                d_goal = math.hypot(belief.x - goal_xy[0], belief.y - goal_xy[1])
                if d_goal <= arrival:
                    needs_decision.append(rs.body.robot_id)
                    continue
                if d_goal < rs.stall_best - stall_eps:
                    rs.stall_best = d_goal
                    rs.stall_count = 0
                else:
                    rs.stall_count += 1
                    if rs.stall_count >= cfg.stall_patience:
                        rs.abandoned_cell = rs.goal.cell()
                        needs_decision.append(rs.body.robot_id)

            if aligned:
                # Idle robots get to look for fresh frontiers on the shared
                # schedule; the team map may have grown since they parked.
                needs_decision.extend(
                    rs.body.robot_id for rs in self.robots if rs.goal is None
                )
            needs_decision = sorted(set(needs_decision))

            if aligned:
                for rs in self.robots:
                    self._add_keyframe(rs.body.robot_id, self.t)
                self._aligned_rendezvous(self.t)
                self._refresh()
            elif needs_decision:
                # Forced keyframes so deciders plan from a current estimate;
                # no rendezvous off-schedule (timestamps would not pair up).
                for rid in needs_decision:
                    self._add_keyframe(rid, self.t)
                self._refresh()

            if self.explored_max >= cfg.explored_target:
                self.termination = "explored"
                self._record_step()
                break

            for rid in needs_decision:
                self._decide(rid)
            self._record_step()

            if aligned and all(rs.goal is None for rs in self.robots):
                self.termination = "no_frontiers"
                break
        return self._finalize()


def run_trial(config: TrialConfig) -> TrialRecord:
    """Run one trial end to end; the returned record holds every table."""
    return Simulation(config).run()
