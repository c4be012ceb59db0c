"""Ground-truth world: environment, robot motion, and noisy sensing.

Everything here operates on true states that the estimator never sees
directly.  Robots move with exact unicycle kinematics (commands execute
perfectly); noise enters through the measurements: odometry increments,
range-bearing landmark observations, and robot-to-robot relative poses.

The reactive controller mixes goal attraction computed in the robot's
believed frame with obstacle repulsion computed from true relative
geometry, which mirrors how a real platform behaves: it steers by its
estimate but its proximity sensing reacts to the world as it actually is.
A hard feasibility check guarantees a commanded step never enters an
inflated obstacle disc or leaves the arena; when it would, the robot turns
in place instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    NoiseSpec,
    Point2,
    Pose2,
    RangeBearing,
    jacobians_compose,
    observe_landmark,
    se2_between,
    se2_compose,
    wrap_angle,
)


@dataclass(frozen=True, slots=True)
class WorldParams:
    """Arena geometry and obstacle layout parameters.

    Landmarks are discs: robots sense their centers as point features but
    must keep the disc surface at least a robot radius away.
    """

    x_min: float = 0.0
    y_min: float = 0.0
    x_max: float = 100.0
    y_max: float = 100.0
    n_landmarks: int = 20
    landmark_radius: float = 1.0
    landmark_margin: float = 5.0
    landmark_min_separation: float = 10.0
    robot_radius: float = 0.5
    influence_radius: float = 3.0

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def collision_radius(self) -> float:
        """Center distance below which a robot touches a landmark disc."""
        return self.landmark_radius + self.robot_radius


def generate_landmarks(params: WorldParams, rng: np.random.Generator) -> np.ndarray:
    """Sample landmark positions uniformly inside the arena margin, kept at
    least the minimum separation apart by rejection (error after 1e5
    rejected draws: the layout is infeasible)."""
    pts: list[tuple[float, float]] = []
    lo_x = params.x_min + params.landmark_margin
    hi_x = params.x_max - params.landmark_margin
    lo_y = params.y_min + params.landmark_margin
    hi_y = params.y_max - params.landmark_margin
    if params.n_landmarks > 0 and (hi_x <= lo_x or hi_y <= lo_y):
        raise ValueError("margin leaves no room for landmarks")
    min_sep2 = params.landmark_min_separation**2
    failures = 0
    while len(pts) < params.n_landmarks:
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        if all((x - px) ** 2 + (y - py) ** 2 >= min_sep2 for px, py in pts):
            pts.append((x, y))
        else:
            failures += 1
            if failures > 100_000:
                raise RuntimeError("could not place landmarks with the requested separation")
    return np.array(pts).reshape(-1, 2)


@dataclass
class Environment:
    """True arena: bounds plus disc landmarks that double as obstacles."""

    params: WorldParams
    landmarks: np.ndarray

    def __post_init__(self) -> None:
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 2)

    @staticmethod
    def sample(params: WorldParams, rng: np.random.Generator) -> "Environment":
        return Environment(params, generate_landmarks(params, rng))

    def in_bounds(self, x: float, y: float, margin: float = 0.0) -> bool:
        p = self.params
        return (
            p.x_min + margin <= x <= p.x_max - margin
            and p.y_min + margin <= y <= p.y_max - margin
        )

    def clearance(self, x: float, y: float) -> float:
        """Distance from a point to the nearest landmark disc surface."""
        if self.landmarks.shape[0] == 0:
            return math.inf
        d = np.sqrt((self.landmarks[:, 0] - x) ** 2 + (self.landmarks[:, 1] - y) ** 2)
        return float(np.min(d)) - self.params.landmark_radius

    def collides(self, x: float, y: float) -> bool:
        """Robot body at (x, y) touches a landmark disc or the boundary."""
        p = self.params
        if not self.in_bounds(x, y, margin=p.robot_radius):
            return True
        if self.landmarks.shape[0] == 0:
            return False
        d2 = (self.landmarks[:, 0] - x) ** 2 + (self.landmarks[:, 1] - y) ** 2
        return bool(np.any(d2 <= p.collision_radius**2))


@dataclass
class RobotBody:
    """True kinematic state of one robot (unicycle, turn then advance)."""

    robot_id: int
    pose: Pose2

    def apply(self, turn: float, advance: float) -> Pose2:
        """The pose after turning by ``turn`` then driving ``advance``
        forward, without committing it."""
        theta = wrap_angle(self.pose.theta + turn)
        return Pose2(
            self.pose.x + advance * math.cos(theta),
            self.pose.y + advance * math.sin(theta),
            theta,
        )

    def commit(self, pose: Pose2) -> Pose2:
        prev = self.pose
        self.pose = pose
        return se2_between(prev, pose)


def sense_landmarks(
    env: Environment, noise: NoiseSpec, true_pose: Pose2, rng: np.random.Generator
) -> list[tuple[int, RangeBearing]]:
    """Noisy range-bearing observations of every landmark whose true range
    is within the sensor limit, in landmark id order."""
    out: list[tuple[int, RangeBearing]] = []
    for lm_id in range(env.landmarks.shape[0]):
        lx, ly = env.landmarks[lm_id]
        true_obs = observe_landmark(true_pose, Point2(lx, ly))
        if true_obs.range > noise.max_sensing_range or true_obs.range <= 1e-9:
            continue
        r = max(true_obs.range + rng.normal(0.0, noise.range_sigma), 1e-3)
        b = wrap_angle(true_obs.bearing + rng.normal(0.0, noise.bearing_sigma))
        out.append((lm_id, RangeBearing(r, b)))
    return out


def sense_relative(
    noise: NoiseSpec, pose_a: Pose2, pose_b: Pose2, rng: np.random.Generator
) -> Pose2:
    """Noisy relative pose of robot b in robot a's frame (rendezvous
    measurement); noise follows the rendezvous covariance convention."""
    rel = se2_between(pose_a, pose_b)
    return Pose2(
        rel.x + rng.normal(0.0, noise.range_sigma),
        rel.y + rng.normal(0.0, noise.range_sigma),
        wrap_angle(rel.theta + rng.normal(0.0, 2.0 * noise.bearing_sigma)),
    )


class OdometryAccumulator:
    """Composes noisy per-step odometry increments between keyframes.

    Each true step gets additive Gaussian noise in its own frame; the
    accumulated relative pose and its covariance follow the exact
    composition rules, so the emitted measurement is what wheel odometry
    integrated over several steps would report.
    """

    def __init__(self, noise: NoiseSpec):
        self._noise = noise
        self._step_cov = noise.odometry_step_cov()
        self.reset()

    _STILL_COV = 1e-10 * np.eye(3)

    def reset(self) -> None:
        self._rel = Pose2(0.0, 0.0, 0.0)
        self._cov = np.zeros((3, 3))
        self._steps = 0

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def relative(self) -> Pose2:
        """Accumulated measured displacement since the last keyframe (the
        dead-reckoned offset)."""
        return self._rel

    def push_still(self) -> None:
        """Record one step with no commanded motion.  Encoders at rest
        report zero with near-certainty, so no noise is drawn; keeping the
        step count moving lets parked robots emit keyframes on schedule."""
        self._cov = self._cov + self._STILL_COV
        self._steps += 1

    def push(self, true_step: Pose2, rng: np.random.Generator) -> None:
        noisy = Pose2(
            true_step.x + rng.normal(0.0, self._noise.odom_trans_sigma),
            true_step.y + rng.normal(0.0, self._noise.odom_trans_sigma),
            wrap_angle(true_step.theta + rng.normal(0.0, self._noise.odom_rot_sigma)),
        )
        ja, jb = jacobians_compose(self._rel, noisy)
        self._cov = ja @ self._cov @ ja.T + jb @ self._step_cov @ jb.T
        self._rel = se2_compose(self._rel, noisy)
        self._steps += 1

    def emit(self) -> tuple[Pose2, np.ndarray]:
        """The accumulated measurement and covariance; resets the
        accumulator for the next keyframe interval."""
        if self._steps == 0:
            raise RuntimeError("no odometry steps accumulated")
        rel, cov = self._rel, self._cov
        # Guard against numerically vanishing covariance on single tiny steps.
        cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(3)
        self.reset()
        return rel, cov


@dataclass(frozen=True, slots=True)
class ControlParams:
    speed: float = 1.0
    dt: float = 1.0
    turn_limit: float = math.radians(15.0)
    attraction_gain: float = 1.0
    repulsion_gain: float = 2.0


def apf_control(
    env: Environment,
    ctrl: ControlParams,
    belief_pose: Pose2,
    true_pose: Pose2,
    goal_xy: np.ndarray,
) -> tuple[float, float, bool]:
    """One potential-field control step.

    Attraction points at the goal in the believed frame; repulsion comes
    from true relative obstacle and wall geometry within the influence
    radius.  Returns (turn, advance, blocked): ``blocked`` is True when the
    hard feasibility check rejected translation and the robot only turns.
    """
    p = env.params
    gx = float(goal_xy[0]) - belief_pose.x
    gy = float(goal_xy[1]) - belief_pose.y
    gn = math.hypot(gx, gy)
    cb, sb = math.cos(belief_pose.theta), math.sin(belief_pose.theta)
    if gn > 1e-9:
        ax = (cb * gx + sb * gy) / gn
        ay = (-sb * gx + cb * gy) / gn
    else:
        ax = ay = 0.0
    fx = ctrl.attraction_gain * ax
    fy = ctrl.attraction_gain * ay
    rep_mag = 0.0

    ct, st = math.cos(true_pose.theta), math.sin(true_pose.theta)
    rho0 = p.influence_radius
    for i in range(env.landmarks.shape[0]):
        dx = env.landmarks[i, 0] - true_pose.x
        dy = env.landmarks[i, 1] - true_pose.y
        rho = math.hypot(dx, dy)
        if rho < 1e-9:
            continue
        # Distance between robot body and disc surface drives the falloff.
        rho_s = max(rho - p.collision_radius, 1e-3)
        if rho_s > rho0:
            continue
        # Direction away from the obstacle, in the robot frame.
        ox = (ct * dx + st * dy) / rho
        oy = (-st * dx + ct * dy) / rho
        mag = ctrl.repulsion_gain * (1.0 / rho_s - 1.0 / rho0) / (rho_s * rho_s)
        rep_mag += mag
        fx -= mag * ox
        fy -= mag * oy
    # Walls repel along their normals.
    for dist, ox, oy in (
        (true_pose.x - p.x_min, -1.0, 0.0),
        (p.x_max - true_pose.x, 1.0, 0.0),
        (true_pose.y - p.y_min, 0.0, -1.0),
        (p.y_max - true_pose.y, 0.0, 1.0),
    ):
        rho_s = max(dist - p.robot_radius, 1e-3)
        if rho_s > rho0:
            continue
        mag = ctrl.repulsion_gain * (1.0 / rho_s - 1.0 / rho0) / (rho_s * rho_s)
        rep_mag += mag
        wx = ct * ox + st * oy
        wy = -st * ox + ct * oy
        fx -= mag * wx
        fy -= mag * wy

    # Terminal approach.  The turn limit puts a floor on the turning circle
    # (speed*dt/turn_limit), and a goal inside that circle can be orbited
    # forever while the arrival check never fires.  Within one circle
    # diameter, and clear of any meaningful repulsion, steer at the goal
    # itself and advance only when the step closes the believed distance;
    # the feasibility check below still vetoes any step into an obstacle.
    if 1e-9 < gn < 2.0 * ctrl.speed * ctrl.dt / ctrl.turn_limit and rep_mag < 0.5 * ctrl.attraction_gain:
        heading_err = wrap_angle(math.atan2(gy, gx) - belief_pose.theta)
        turn = min(max(heading_err, -ctrl.turn_limit), ctrl.turn_limit)
        theta_b = wrap_angle(belief_pose.theta + turn)
        step = ctrl.speed * ctrl.dt
        nbx = belief_pose.x + step * math.cos(theta_b)
        nby = belief_pose.y + step * math.sin(theta_b)
        closes = math.hypot(float(goal_xy[0]) - nbx, float(goal_xy[1]) - nby) < gn
        advance = step if closes else 0.0
    else:
        if math.hypot(fx, fy) < 1e-12:
            heading_err = 0.0
        else:
            heading_err = math.atan2(fy, fx)
        turn = min(max(heading_err, -ctrl.turn_limit), ctrl.turn_limit)
        advance = ctrl.speed * ctrl.dt if abs(heading_err) <= math.pi / 2 else 0.0

    if advance > 0.0:
        theta = wrap_angle(true_pose.theta + turn)
        nx = true_pose.x + advance * math.cos(theta)
        ny = true_pose.y + advance * math.sin(theta)
        if env.collides(nx, ny):
            return turn, 0.0, True
    return turn, advance, False
