"""Trial configuration: dataclasses, YAML loading, and named presets.

A trial is fully described by a TrialConfig; together with the seed it
determines every byte of the outputs.  Presets cover the two benchmark
environment sizes plus a small smoke-test world.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

import yaml

from .frontiers import FrontierParams
from .geometry import NoiseSpec, Pose2
from .virtual_map import MapParams
from .world import WorldParams


@dataclass(frozen=True, slots=True)
class NoiseConfig:
    """Sensor error bounds (95% confidence values, converted to sigmas
    internally).  ``scale`` multiplies all sigmas, for consistency checks
    with shrunken noise."""

    range_error: float = 0.002
    bearing_error_deg: float = 0.5
    odom_trans_error: float = 0.05
    odom_rot_error_deg: float = 0.5
    max_sensing_range: float = 7.5
    scale: float = 1.0

    def to_spec(self) -> NoiseSpec:
        spec = NoiseSpec.from_95ci(
            range_error=self.range_error,
            bearing_error_deg=self.bearing_error_deg,
            odom_trans_error=self.odom_trans_error,
            odom_rot_error_deg=self.odom_rot_error_deg,
            max_sensing_range=self.max_sensing_range,
        )
        if self.scale != 1.0:
            spec = spec.scaled(self.scale)
        return spec


@dataclass(frozen=True, slots=True)
class PlannerConfig:
    """Planner choice plus candidate-generation and utility knobs."""

    name: str = "em2"
    distance_metric: str = "path"
    u_t_max_distance: float = 30.0
    n_explore_max: int = 10
    min_separation_cells: float = 4.0
    revisit_distance: float = 3.75
    revisit_cap: int | None = None
    waypoint_spacing_cells: float = 2.0
    # A landmark observed by the robot within this many steps yields no
    # revisiting candidate for it; 0 disables the cooldown.
    revisit_cooldown_steps: int = 0

    def __post_init__(self) -> None:
        if self.distance_metric not in ("path", "euclidean"):
            raise ValueError("distance_metric must be 'path' or 'euclidean'")

    def frontier_params(self) -> FrontierParams:
        return FrontierParams(
            n_explore_max=self.n_explore_max,
            min_separation_cells=self.min_separation_cells,
            revisit_distance=self.revisit_distance,
            revisit_cap=self.revisit_cap,
        )


@dataclass(frozen=True, slots=True)
class SimConfig:
    """Simulation loop parameters."""

    n_robots: int = 3
    cell_size: float = 2.0
    keyframe_stride: int = 3
    max_steps: int = 1500
    explored_target: float = 0.95
    arrival_radius_cells: float = 0.5
    stall_patience: int = 30
    speed: float = 1.0
    dt: float = 1.0
    q_prior: float = 0.5
    p_hit: float = 0.8
    q_min: float = 0.67
    planning_margin: float = 0.5
    starts: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.n_robots < 1:
            raise ValueError("need at least one robot")
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")


@dataclass(frozen=True, slots=True)
class TrialConfig:
    seed: int = 0
    world: WorldParams = WorldParams()
    noise: NoiseConfig = NoiseConfig()
    planner: PlannerConfig = PlannerConfig()
    sim: SimConfig = SimConfig()

    def map_params(self) -> MapParams:
        return MapParams(
            q_prior=self.sim.q_prior,
            p_hit=self.sim.p_hit,
            q_min=self.sim.q_min,
            sensing_range=self.noise.max_sensing_range,
        )

    def start_poses(self) -> list[Pose2]:
        """Start poses: configured explicitly, or a vertical line in the
        middle-left region, spaced well inside mutual sensing range."""
        if self.sim.starts is not None:
            return [Pose2(x, y, theta) for x, y, theta in self.sim.starts]
        w = self.world
        n = self.sim.n_robots
        x = w.x_min + 2.0
        y_center = 0.5 * (w.y_min + w.y_max)
        return [Pose2(x, y_center + 2.5 * (i - (n - 1) / 2.0), 0.0) for i in range(n)]

    def waypoint_spacing(self) -> float:
        return self.planner.waypoint_spacing_cells * self.sim.cell_size

    def arrival_radius(self) -> float:
        return self.sim.arrival_radius_cells * self.sim.cell_size


def _build(cls, data: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict[str, Any]) -> TrialConfig:
    data = dict(data)
    world = _build(WorldParams, data.pop("world", {}))
    noise = _build(NoiseConfig, data.pop("noise", {}))
    planner = _build(PlannerConfig, data.pop("planner", {}))
    sim_data = dict(data.pop("sim", {}))
    if sim_data.get("starts") is not None:
        sim_data["starts"] = tuple(tuple(float(v) for v in s) for s in sim_data["starts"])
    sim = _build(SimConfig, sim_data)
    seed = int(data.pop("seed", 0))
    if data:
        raise ValueError(f"unknown config keys: {sorted(data)}")
    return TrialConfig(seed=seed, world=world, noise=noise, planner=planner, sim=sim)


def config_to_dict(cfg: TrialConfig) -> dict[str, Any]:
    d = asdict(cfg)
    if d["sim"]["starts"] is not None:
        d["sim"]["starts"] = [list(s) for s in d["sim"]["starts"]]
    return d


def load_config(path: str) -> TrialConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
    return config_from_dict(data)


def save_config(cfg: TrialConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def preset(name: str) -> TrialConfig:
    """Named configurations.

    ``smoke``: tiny world for fast end-to-end checks.
    ``env100``: 100 x 100 m, 20 landmarks, 2 m cells (benchmark, small).
    ``env200``: 200 x 200 m, 20 landmarks, 4 m cells (benchmark, large).
    The benchmark presets report Euclidean travel cost and thin the
    candidate set to keep serial runtime inside the evaluation budget.
    """
    if name == "smoke":
        return TrialConfig(
            world=WorldParams(x_max=40.0, y_max=40.0, n_landmarks=4, landmark_margin=6.0),
            sim=SimConfig(n_robots=2, cell_size=2.0, keyframe_stride=3, max_steps=500),
            planner=PlannerConfig(n_explore_max=6, revisit_cap=3),
        )
    if name == "env100":
        return TrialConfig(
            world=WorldParams(x_max=100.0, y_max=100.0, n_landmarks=20),
            sim=SimConfig(n_robots=3, cell_size=2.0, keyframe_stride=5, max_steps=2000),
            planner=PlannerConfig(
                distance_metric="euclidean",
                n_explore_max=6,
                revisit_cap=4,
                u_t_max_distance=10.0,
                revisit_cooldown_steps=150,
            ),
        )
    if name == "env200":
        return TrialConfig(
            world=WorldParams(x_max=200.0, y_max=200.0, n_landmarks=20),
            sim=SimConfig(n_robots=3, cell_size=4.0, keyframe_stride=5, max_steps=3000),
            planner=PlannerConfig(
                distance_metric="euclidean",
                n_explore_max=6,
                revisit_cap=4,
                u_t_max_distance=10.0,
                revisit_cooldown_steps=150,
            ),
        )
    raise ValueError(f"unknown preset {name!r}; expected smoke, env100, or env200")
