"""Grid path planning: obstacle inflation, 8-connected A*, and waypoint
resampling along the resulting polyline.

Paths are planned on the same grid the virtual map uses.  Obstacles are
point landmarks inflated to discs; a cell is blocked when its center lies
inside any disc.  A* uses octile distance as the heuristic and breaks
cost ties by insertion order, so results are deterministic.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .virtual_map import GridSpec

# Neighbor offsets in fixed order: orthogonals first, then diagonals.
_STEPS = (
    (-1, 0, 1.0),
    (1, 0, 1.0),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (-1, -1, math.sqrt(2.0)),
    (-1, 1, math.sqrt(2.0)),
    (1, -1, math.sqrt(2.0)),
    (1, 1, math.sqrt(2.0)),
)


def inflate_obstacles(grid: GridSpec, points: np.ndarray, radius: float) -> np.ndarray:
    """Boolean (rows, cols) mask, True where a cell center lies within
    ``radius`` of any obstacle point."""
    blocked = np.zeros((grid.n_rows, grid.n_cols), dtype=bool)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        return blocked
    col_c = grid.col_centers()
    row_c = grid.row_centers()
    rad_cells = int(math.ceil(radius / grid.cell_size)) + 1
    r2 = radius * radius
    for px, py in pts:
        crow, ccol = grid.cell_of(px, py)
        r0 = max(crow - rad_cells, 0)
        r1 = min(crow + rad_cells + 1, grid.n_rows)
        c0 = max(ccol - rad_cells, 0)
        c1 = min(ccol + rad_cells + 1, grid.n_cols)
        if r0 >= r1 or c0 >= c1:
            continue
        dy = row_c[r0:r1] - py
        dx = col_c[c0:c1] - px
        blocked[r0:r1, c0:c1] |= dy[:, None] ** 2 + dx[None, :] ** 2 <= r2
    return blocked


def astar(
    grid: GridSpec,
    blocked: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
) -> list[tuple[int, int]] | None:
    """Shortest 8-connected path from ``start`` to ``goal`` as a list of
    (row, col) cells, or None when the goal is unreachable.

    The start cell is always treated as free (the robot is standing there);
    a blocked goal is unreachable.  Diagonal moves are refused when either
    adjacent orthogonal cell is blocked, so paths never squeeze between
    blocked corners.
    """
    if not (grid.contains(*start) and grid.contains(*goal)):
        return None
    if blocked[goal]:
        return None
    if start == goal:
        return [start]
    n_rows, n_cols = grid.n_rows, grid.n_cols

    def heuristic(r: int, c: int) -> float:
        dr = abs(r - goal[0])
        dc = abs(c - goal[1])
        return max(dr, dc) + (math.sqrt(2.0) - 1.0) * min(dr, dc)

    g_score = {start: 0.0}
    came: dict[tuple[int, int], tuple[int, int]] = {}
    counter = 0
    open_heap = [(heuristic(*start), counter, start)]
    closed: set[tuple[int, int]] = set()
    while open_heap:
        _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in came:
                cur = came[cur]
                path.append(cur)
            path.reverse()
            return path
        closed.add(cur)
        cr, cc = cur
        base = g_score[cur]
        for dr, dc, step in _STEPS:
            nr, nc = cr + dr, cc + dc
            if not (0 <= nr < n_rows and 0 <= nc < n_cols):
                continue
            if blocked[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (blocked[cr + dr, cc] or blocked[cr, cc + dc]):
                continue
            nxt = (nr, nc)
            tentative = base + step
            if tentative < g_score.get(nxt, math.inf):
                g_score[nxt] = tentative
                came[nxt] = cur
                counter += 1
                heapq.heappush(open_heap, (tentative + heuristic(nr, nc), counter, nxt))
    return None


def cells_to_world(grid: GridSpec, cells: list[tuple[int, int]]) -> np.ndarray:
    """Cell centers of a path as an (n, 2) array."""
    out = np.empty((len(cells), 2))
    for i, (r, c) in enumerate(cells):
        out[i, 0] = grid.origin_x + (c + 0.5) * grid.cell_size
        out[i, 1] = grid.origin_y + (r + 0.5) * grid.cell_size
    return out


def polyline_length(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def path_length(grid: GridSpec, cells: list[tuple[int, int]]) -> float:
    """World length of a cell path (unit and diagonal steps)."""
    return polyline_length(cells_to_world(grid, cells))


def astar_distance(
    grid: GridSpec,
    blocked: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
) -> float:
    """A* path length in world units, inf when unreachable."""
    path = astar(grid, blocked, start, goal)
    if path is None:
        return math.inf
    return path_length(grid, path)


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Points at fixed arc-length spacing along a polyline.

    The first input point is always kept; the exact final point closes the
    list (appended when the last multiple of ``spacing`` falls short of the
    total length).  A degenerate polyline collapses to its single point.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("empty polyline")
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(np.sum(seg_len))
    if total <= 1e-12:
        return pts[:1].copy()
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    n_steps = int(math.floor(total / spacing + 1e-9))
    targets = [i * spacing for i in range(n_steps + 1)]
    if total - targets[-1] > 1e-9:
        targets.append(total)
    else:
        targets[-1] = total
    out = np.empty((len(targets), 2))
    seg_i = 0
    for k, s in enumerate(targets):
        while seg_i < seg_len.size - 1 and cum[seg_i + 1] < s - 1e-12:
            seg_i += 1
        ds = s - cum[seg_i]
        denom = seg_len[seg_i]
        frac = 0.0 if denom <= 1e-12 else min(ds / denom, 1.0)
        out[k] = pts[seg_i] + frac * seg[seg_i]
    out[-1] = pts[-1]
    return out
