"""Frontier candidate generation.

Candidates come in three kinds:

* exploring: representatives of the boundary between explored and
  unexplored space, thinned so nearby boundary cells collapse to one
  candidate, nearest ones first;
* revisiting: one cell per known landmark, placed at a preferred standoff
  distance, so driving there re-observes the landmark and closes a loop;
* rendezvous: the current targets of the other robots, so driving there
  yields a relative measurement when both arrive.

Candidates are returned sorted by (kind, distance to robot, cell index),
which fixes the evaluation order downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import Point2
from .virtual_map import GridSpec, VirtualMap


class FrontierKind(IntEnum):
    EXPLORING = 0
    REVISITING = 1
    RENDEZVOUS = 2


@dataclass(frozen=True, slots=True)
class Frontier:
    kind: FrontierKind
    row: int
    col: int
    position: Point2
    heading: float
    distance: float
    landmark_id: int | None = None
    robot_id: int | None = None

    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)


@dataclass(frozen=True, slots=True)
class FrontierParams:
    """Knobs for candidate generation.

    ``n_explore_max`` caps exploring candidates only; ``revisit_cap``
    (None for unlimited) keeps the landmarks nearest the robot when the
    environment has many.  ``min_separation_cells`` thins the boundary.
    """

    n_explore_max: int = 10
    min_separation_cells: float = 4.0
    revisit_distance: float = 3.75
    revisit_cap: int | None = None


def boundary_mask(vm: VirtualMap, blocked: np.ndarray) -> np.ndarray:
    """Explored cells 4-adjacent to unexplored ones, excluding the outer
    grid ring and blocked cells."""
    explored = vm.explored_mask()
    unexplored = ~explored
    out = np.zeros_like(explored)
    out[1:-1, 1:-1] = explored[1:-1, 1:-1] & (
        unexplored[:-2, 1:-1]
        | unexplored[2:, 1:-1]
        | unexplored[1:-1, :-2]
        | unexplored[1:-1, 2:]
    )
    out &= ~blocked
    return out


def _cell_pos(grid: GridSpec, row: int, col: int) -> tuple[float, float]:
    return (
        grid.origin_x + (col + 0.5) * grid.cell_size,
        grid.origin_y + (row + 0.5) * grid.cell_size,
    )


def _make(kind, grid, row, col, robot_xy, **extra) -> Frontier:
    x, y = _cell_pos(grid, row, col)
    dx = x - robot_xy[0]
    dy = y - robot_xy[1]
    return Frontier(
        kind=kind,
        row=int(row),
        col=int(col),
        position=Point2(x, y),
        heading=math.atan2(dy, dx),
        distance=math.hypot(dx, dy),
        **extra,
    )


def exploring_frontiers(
    vm: VirtualMap, blocked: np.ndarray, robot_xy: np.ndarray, params: FrontierParams
) -> list[Frontier]:
    """Thinned boundary representatives, nearest-first.

    Boundary cells are visited in order of distance from the robot; a cell
    becomes a candidate when it keeps at least the minimum separation from
    every candidate accepted so far, until the cap is reached.
    """
    grid = vm.grid
    mask = boundary_mask(vm, blocked)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return []
    xs = grid.origin_x + (cols + 0.5) * grid.cell_size
    ys = grid.origin_y + (rows + 0.5) * grid.cell_size
    d = np.hypot(xs - robot_xy[0], ys - robot_xy[1])
    flat = rows.astype(np.int64) * grid.n_cols + cols
    order = np.lexsort((flat, d))
    min_sep = params.min_separation_cells * grid.cell_size
    kept: list[Frontier] = []
    kept_xy: list[tuple[float, float]] = []
    for i in order:
        if len(kept) >= params.n_explore_max:
            break
        x, y = xs[i], ys[i]
        if any(math.hypot(x - kx, y - ky) < min_sep for kx, ky in kept_xy):
            continue
        kept.append(_make(FrontierKind.EXPLORING, grid, rows[i], cols[i], robot_xy))
        kept_xy.append((x, y))
    return kept


def revisiting_frontiers(
    vm: VirtualMap,
    blocked: np.ndarray,
    robot_xy: np.ndarray,
    landmarks: dict[int, np.ndarray],
    params: FrontierParams,
) -> list[Frontier]:
    """One standoff cell per landmark: the explored, unblocked cell whose
    center distance to the landmark is closest to the preferred revisit
    distance (first such cell in row-major order on ties).  Landmarks with
    no explored cell near the standoff ring yield no candidate."""
    grid = vm.grid
    explored = vm.explored_mask()
    col_c = grid.col_centers()
    row_c = grid.row_centers()
    rad = int(math.ceil((params.revisit_distance + grid.cell_size) / grid.cell_size)) + 1
    out: list[Frontier] = []
    for lm_id in sorted(landmarks):
        lx, ly = float(landmarks[lm_id][0]), float(landmarks[lm_id][1])
        crow, ccol = grid.cell_of(lx, ly)
        r0 = max(crow - rad, 0)
        r1 = min(crow + rad + 1, grid.n_rows)
        c0 = max(ccol - rad, 0)
        c1 = min(ccol + rad + 1, grid.n_cols)
        if r0 >= r1 or c0 >= c1:
            continue
        dy = row_c[r0:r1] - ly
        dx = col_c[c0:c1] - lx
        dist = np.sqrt(dy[:, None] ** 2 + dx[None, :] ** 2)
        score = np.abs(dist - params.revisit_distance)
        score[blocked[r0:r1, c0:c1] | ~explored[r0:r1, c0:c1]] = np.inf
        idx = int(np.argmin(score))
        if not np.isfinite(score.reshape(-1)[idx]):
            continue
        row = r0 + idx // (c1 - c0)
        col = c0 + idx % (c1 - c0)
        out.append(_make(FrontierKind.REVISITING, grid, row, col, robot_xy, landmark_id=lm_id))
    if params.revisit_cap is not None and len(out) > params.revisit_cap:
        out.sort(key=lambda f: (f.distance, f.row * grid.n_cols + f.col))
        out = out[: params.revisit_cap]
    return out


def rendezvous_frontiers(
    vm: VirtualMap,
    blocked: np.ndarray,
    robot_xy: np.ndarray,
    neighbor_targets: dict[int, tuple[int, int]],
    params: FrontierParams,
) -> list[Frontier]:
    """The other robots' current target cells, where a meeting would
    produce a relative measurement."""
    grid = vm.grid
    out: list[Frontier] = []
    for rid in sorted(neighbor_targets):
        row, col = neighbor_targets[rid]
        if not grid.contains(row, col) or blocked[row, col]:
            continue
        out.append(_make(FrontierKind.RENDEZVOUS, grid, row, col, robot_xy, robot_id=rid))
    return out


def compute_frontiers(
    vm: VirtualMap,
    blocked: np.ndarray,
    robot_xy: np.ndarray,
    landmarks: dict[int, np.ndarray],
    neighbor_targets: dict[int, tuple[int, int]],
    params: FrontierParams,
    exclude_radius: float = 0.0,
) -> list[Frontier]:
    """All candidates, sorted by (kind, distance, cell index).

    ``exclude_radius`` drops candidates the robot is already standing on
    (within the arrival radius): a reached target is serviced, and keeping
    it on offer lets a zero-length plan win on distance forever.
    """
    grid = vm.grid
    cands = (
        exploring_frontiers(vm, blocked, robot_xy, params)
        + revisiting_frontiers(vm, blocked, robot_xy, landmarks, params)
        + rendezvous_frontiers(vm, blocked, robot_xy, neighbor_targets, params)
    )
    if exclude_radius > 0.0:
        cands = [f for f in cands if f.distance > exclude_radius]
    cands.sort(key=lambda f: (int(f.kind), f.distance, f.row * grid.n_cols + f.col))
    return cands
