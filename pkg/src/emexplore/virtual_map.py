"""Virtual map: a uniform grid carrying occupancy belief and uncertainty.

Each cell holds an occupancy probability ``q`` (updated in log-odds form)
and, once observed, a 2x2 covariance describing how well that patch of the
world is known.  Cells seen from a robot pose get the pose marginal pushed
through the range-bearing observation model; cells containing a mapped
landmark are stamped with the landmark's Cartesian marginal.  Repeated
observations of a cell are merged with covariance intersection, which stays
consistent when the contributing estimates are correlated (as SLAM poses
always are).

The map is rebuilt from scratch whenever the underlying estimates change;
rebuilds are deterministic, so two rebuilds from identical inputs produce
bit-identical maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Point2, Pose2, jacobians_observe_arrays, validate_cov

_Q_CLAMP = 1e-6
_CI_TOL = 1e-6
_GOLDEN = 0.6180339887498949
_PROJECTION_JITTER = 1e-12


def _logit(p):
    p = np.clip(p, _Q_CLAMP, 1.0 - _Q_CLAMP)
    return np.log(p) - np.log1p(-p)


def update_q(q, p):
    """One log-odds occupancy update of belief ``q`` with observation
    likelihood ``p``; accepts scalars or arrays, result clamped away from
    0 and 1 so later updates stay finite."""
    lo = _logit(q) + _logit(p)
    out = 1.0 / (1.0 + np.exp(-lo))
    return np.clip(out, _Q_CLAMP, 1.0 - _Q_CLAMP)


def propagate_cell(pose: Pose2, pose_cov: np.ndarray, center: Point2) -> np.ndarray:
    """Project a pose marginal onto a cell through the range-bearing model.

    Returns H cov H^T where H is the observation Jacobian with respect to
    the pose, i.e. the covariance of the (range, bearing) observation of the
    cell center induced by pose uncertainty alone.
    """
    from .geometry import jacobian_observe_wrt_pose

    cov = validate_cov(pose_cov, 3, "pose_cov")
    h = jacobian_observe_wrt_pose(pose, center)
    out = h @ cov @ h.T
    return 0.5 * (out + out.T)


@numba.njit(cache=True)
def _ci_trace(w, ia_a, ia_b, ia_d, ib_a, ib_b, ib_d):
    ka = w * ia_a + (1.0 - w) * ib_a
    kb = w * ia_b + (1.0 - w) * ib_b
    kd = w * ia_d + (1.0 - w) * ib_d
    det = ka * kd - kb * kb
    return (ka + kd) / det


@numba.njit(cache=True)
def _ci_pair(aa, ab, ad, ba, bb, bd):
    """Covariance intersection of two packed 2x2 covariances (a, b, d).

    The mixing weight minimizes the fused trace via golden-section search
    on [0, 1].  Returns (fused_a, fused_b, fused_d, weight).
    """
    det_a = aa * ad - ab * ab
    det_b = ba * bd - bb * bb
    ia_a = ad / det_a
    ia_b = -ab / det_a
    ia_d = aa / det_a
    ib_a = bd / det_b
    ib_b = -bb / det_b
    ib_d = ba / det_b
    lo = 0.0
    hi = 1.0
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc = _ci_trace(c, ia_a, ia_b, ia_d, ib_a, ib_b, ib_d)
    fd = _ci_trace(d, ia_a, ia_b, ia_d, ib_a, ib_b, ib_d)
    while hi - lo > _CI_TOL:
        if fc < fd:
            hi = d
            d = c
            fd = fc
            c = hi - _GOLDEN * (hi - lo)
            fc = _ci_trace(c, ia_a, ia_b, ia_d, ib_a, ib_b, ib_d)
        else:
            lo = c
            c = d
            fc = fd
            d = lo + _GOLDEN * (hi - lo)
            fd = _ci_trace(d, ia_a, ia_b, ia_d, ib_a, ib_b, ib_d)
    w = 0.5 * (lo + hi)
    ka = w * ia_a + (1.0 - w) * ib_a
    kb = w * ia_b + (1.0 - w) * ib_b
    kd = w * ia_d + (1.0 - w) * ib_d
    det = ka * kd - kb * kb
    return kd / det, -kb / det, ka / det, w


@numba.njit(cache=True)
def _fuse_sorted(cells, a, b, d, sigma_flat, count_flat):
    """Fold per-incidence covariances into the map, in the order given.

    ``cells`` must be sorted so that all incidences of one cell are
    contiguous and in generation order; the fold is then deterministic.
    The first contribution to a cell is written directly, later ones are
    merged with covariance intersection.
    """
    for i in range(cells.size):
        c = cells[i]
        if count_flat[c] == 0:
            sigma_flat[c, 0] = a[i]
            sigma_flat[c, 1] = b[i]
            sigma_flat[c, 2] = d[i]
        else:
            fa, fb, fd, _ = _ci_pair(
                sigma_flat[c, 0], sigma_flat[c, 1], sigma_flat[c, 2], a[i], b[i], d[i]
            )
            sigma_flat[c, 0] = fa
            sigma_flat[c, 1] = fb
            sigma_flat[c, 2] = fd
        count_flat[c] += 1


def ci_omega(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Trace-minimizing covariance intersection weight for two 2x2
    covariances (weight applies to ``cov_a``)."""
    a = validate_cov(cov_a, 2, "cov_a")
    b = validate_cov(cov_b, 2, "cov_b")
    _, _, _, w = _ci_pair(a[0, 0], a[0, 1], a[1, 1], b[0, 0], b[0, 1], b[1, 1])
    return float(w)


def covariance_intersection(cov_a: np.ndarray, cov_b: np.ndarray) -> tuple[np.ndarray, float]:
    """Fuse two 2x2 covariances by covariance intersection.

    Returns the fused covariance and the mixing weight.  The fused estimate
    is conservative: it never claims less uncertainty than is justified even
    when the inputs are correlated to an unknown degree.
    """
    a = validate_cov(cov_a, 2, "cov_a")
    b = validate_cov(cov_b, 2, "cov_b")
    fa, fb, fd, w = _ci_pair(a[0, 0], a[0, 1], a[1, 1], b[0, 0], b[0, 1], b[1, 1])
    return np.array([[fa, fb], [fb, fd]]), float(w)


@dataclass(frozen=True, slots=True)
class GridSpec:
    """Axis-aligned uniform grid: ``origin`` is the lower-left corner of
    cell (0, 0), rows grow with y and columns with x."""

    origin_x: float
    origin_y: float
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise ValueError("grid must have at least one cell")

    @staticmethod
    def from_bounds(x_min: float, y_min: float, x_max: float, y_max: float, cell_size: float) -> "GridSpec":
        if x_max <= x_min or y_max <= y_min:
            raise ValueError("empty bounds")
        n_cols = max(1, int(math.ceil((x_max - x_min) / cell_size - 1e-12)))
        n_rows = max(1, int(math.ceil((y_max - y_min) / cell_size - 1e-12)))
        return GridSpec(x_min, y_min, cell_size, n_rows, n_cols)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing a world point; may fall outside
        the grid, check :meth:`contains`."""
        col = int(math.floor((x - self.origin_x) / self.cell_size))
        row = int(math.floor((y - self.origin_y) / self.cell_size))
        return row, col

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.n_rows and 0 <= col < self.n_cols

    def center(self, row: int, col: int) -> Point2:
        return Point2(
            self.origin_x + (col + 0.5) * self.cell_size,
            self.origin_y + (row + 0.5) * self.cell_size,
        )

    def col_centers(self) -> np.ndarray:
        return self.origin_x + (np.arange(self.n_cols) + 0.5) * self.cell_size

    def row_centers(self) -> np.ndarray:
        return self.origin_y + (np.arange(self.n_rows) + 0.5) * self.cell_size


@dataclass(frozen=True, slots=True)
class MapParams:
    """Occupancy and sensing parameters for virtual map construction."""

    q_prior: float = 0.5
    p_hit: float = 0.8
    q_min: float = 0.67
    sensing_range: float = 7.5

    def __post_init__(self) -> None:
        for name in ("q_prior", "p_hit", "q_min"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1)")
        if self.sensing_range <= 0:
            raise ValueError("sensing_range must be positive")


@dataclass(frozen=True, slots=True)
class CellView:
    """Read-only snapshot of one map cell."""

    row: int
    col: int
    center: Point2
    q: float
    count: int
    sigma: np.ndarray | None


class VirtualMap:
    """Grid of occupancy beliefs and per-cell uncertainty.

    ``q`` is (rows, cols) occupancy probability, ``count`` the number of
    observations folded into each cell, and ``sigma`` the packed symmetric
    covariance (a, b, d) for observed cells.  Maps built without covariance
    tracking keep ``sigma`` at zero and only maintain ``q``/``count``.
    """

    def __init__(self, grid: GridSpec, params: MapParams, q: np.ndarray, sigma: np.ndarray, count: np.ndarray):
        self.grid = grid
        self.params = params
        self.q = q
        self.sigma = sigma
        self.count = count

    @staticmethod
    def empty(grid: GridSpec, params: MapParams) -> "VirtualMap":
        return VirtualMap(
            grid,
            params,
            np.full((grid.n_rows, grid.n_cols), params.q_prior),
            np.zeros((grid.n_rows, grid.n_cols, 3)),
            np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64),
        )

    def cell(self, row: int, col: int) -> CellView:
        if not self.grid.contains(row, col):
            raise IndexError(f"cell ({row}, {col}) outside grid")
        cnt = int(self.count[row, col])
        sigma = None
        if cnt > 0:
            a, b, d = self.sigma[row, col]
            sigma = np.array([[a, b], [b, d]])
        return CellView(row, col, self.grid.center(row, col), float(self.q[row, col]), cnt, sigma)

    def observed_mask(self) -> np.ndarray:
        """Cells with at least one folded observation."""
        return self.count > 0

    def explored_mask(self) -> np.ndarray:
        """Cells whose occupancy belief clears the observed threshold."""
        return self.q > self.params.q_min

    def explored_ratio(self) -> float:
        return float(np.mean(self.explored_mask()))

    def trace_field(self) -> np.ndarray:
        """Per-cell covariance trace, zero where nothing was observed."""
        return np.where(self.count > 0, self.sigma[:, :, 0] + self.sigma[:, :, 2], 0.0)

    def sum_uncertainty(self, mask: np.ndarray | None = None) -> float:
        """Total covariance trace over observed cells, optionally restricted
        to ``mask`` (boolean, same shape as the grid)."""
        field = self.trace_field()
        if mask is not None:
            field = np.where(mask, field, 0.0)
        return float(np.sum(field))

    def save_text(self, path: str) -> None:
        """Write the map as text: a small header, then one line per observed
        cell with count, q and the packed covariance, in row-major order."""
        g = self.grid
        p = self.params
        lines = [
            "# virtual map",
            f"origin {g.origin_x!r} {g.origin_y!r}",
            f"cell_size {g.cell_size!r}",
            f"shape {g.n_rows} {g.n_cols}",
            f"params {p.q_prior!r} {p.p_hit!r} {p.q_min!r} {p.sensing_range!r}",
        ]
        rows, cols = np.nonzero(self.count)
        for r, c in zip(rows.tolist(), cols.tolist()):
            a, b, d = self.sigma[r, c]
            lines.append(
                f"cell {r} {c} {int(self.count[r, c])} {self.q[r, c]!r} {a!r} {b!r} {d!r}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @staticmethod
    def load_text(path: str) -> "VirtualMap":
        grid = params = None
        origin = cell_size = shape = None
        cells = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tok = line.split()
                if tok[0] == "origin":
                    origin = (float(tok[1]), float(tok[2]))
                elif tok[0] == "cell_size":
                    cell_size = float(tok[1])
                elif tok[0] == "shape":
                    shape = (int(tok[1]), int(tok[2]))
                elif tok[0] == "params":
                    params = MapParams(float(tok[1]), float(tok[2]), float(tok[3]), float(tok[4]))
                elif tok[0] == "cell":
                    cells.append(tok[1:])
                else:
                    raise ValueError(f"unrecognized map line: {line}")
        if origin is None or cell_size is None or shape is None or params is None:
            raise ValueError("incomplete map header")
        grid = GridSpec(origin[0], origin[1], cell_size, shape[0], shape[1])
        vm = VirtualMap.empty(grid, params)
        for tok in cells:
            r, c = int(tok[0]), int(tok[1])
            vm.count[r, c] = int(tok[2])
            vm.q[r, c] = float(tok[3])
            vm.sigma[r, c] = [float(tok[4]), float(tok[5]), float(tok[6])]
        return vm


def _pose_incidences(grid: GridSpec, poses: np.ndarray, sensing_range: float, cache=None):
    """For each pose, the flat indices of grid cells whose centers lie
    within sensing range (and not exactly at the pose).  Returns the flat
    cell indices and the pose row of each incidence, in deterministic
    (pose, row-major cell) order.

    ``cache`` maps an exact (x, y) pair to its flat cell indices; the cell
    set is a pure function of position, so callers that rebuild many maps
    over a mostly shared pose set (candidate scoring) can share one dict.
    """
    col_c = grid.col_centers()
    row_c = grid.row_centers()
    rad = int(math.ceil(sensing_range / grid.cell_size)) + 1
    r2 = sensing_range * sensing_range
    cells_list = []
    rows_list = []
    for i in range(poses.shape[0]):
        px, py = poses[i, 0], poses[i, 1]
        if cache is not None:
            hit = cache.get((px, py))
            if hit is not None:
                if hit.size:
                    cells_list.append(hit)
                    rows_list.append(np.full(hit.size, i, dtype=np.int64))
                continue
        crow, ccol = grid.cell_of(px, py)
        r0 = max(crow - rad, 0)
        r1 = min(crow + rad + 1, grid.n_rows)
        c0 = max(ccol - rad, 0)
        c1 = min(ccol + rad + 1, grid.n_cols)
        if r0 >= r1 or c0 >= c1:
            if cache is not None:
                cache[(px, py)] = np.zeros(0, dtype=np.int64)
            continue
        dy = row_c[r0:r1] - py
        dx = col_c[c0:c1] - px
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        mask = (d2 <= r2) & (d2 > 1e-18)
        rr, cc = np.nonzero(mask)
        flat = (rr + r0) * grid.n_cols + (cc + c0)
        if cache is not None:
            cache[(px, py)] = flat
        if flat.size == 0:
            continue
        cells_list.append(flat)
        rows_list.append(np.full(rr.size, i, dtype=np.int64))
    if not cells_list:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(cells_list), np.concatenate(rows_list)


def rebuild(
    grid: GridSpec,
    params: MapParams,
    estimate,
    marginals=None,
    robot_filter=None,
    with_covariance: bool = True,
    incidence_cache=None,
) -> VirtualMap:
    """Build a virtual map from a graph estimate.

    Every cell within sensing range of an estimated pose receives one
    occupancy hit and (when ``with_covariance``) that pose's marginal pushed
    through the observation model; contributions to the same cell are merged
    with covariance intersection in a fixed order, so the result depends
    only on the inputs.  Landmarks within sensing range of an included pose
    mark their cell occupied and stamp it with their Cartesian marginal.

    ``robot_filter`` restricts the pose set (and thus the landmark set) to
    the given robot ids, which is how per-robot local maps are built.
    ``marginals`` must cover all included poses and landmarks when
    covariance tracking is on.  ``incidence_cache`` is an optional dict
    shared between calls whose pose sets overlap; see
    :func:`_pose_incidences`.
    """
    if with_covariance and marginals is None:
        raise ValueError("marginals are required when with_covariance is set")
    pose_keys, poses = estimate.pose_array()
    if robot_filter is not None:
        allowed = set(robot_filter)
        keep = [i for i, k in enumerate(pose_keys) if k.robot_id in allowed]
        pose_keys = [pose_keys[i] for i in keep]
        poses = poses[keep] if keep else np.zeros((0, 3))
    lm_keys, lm_xy = estimate.landmark_array()

    vm = VirtualMap.empty(grid, params)
    cells, pose_rows = _pose_incidences(grid, poses, params.sensing_range, incidence_cache)
    count_flat = vm.count.reshape(-1)
    sigma_flat = vm.sigma.reshape(-1, 3)

    if with_covariance and cells.size:
        pose_blocks = marginals.pose_blocks(pose_keys)
        col_c = grid.col_centers()
        centers = np.empty((cells.size, 2))
        centers[:, 0] = col_c[cells % grid.n_cols]
        centers[:, 1] = grid.row_centers()[cells // grid.n_cols]
        hp, _ = jacobians_observe_arrays(poses[pose_rows], centers)
        sig = np.einsum("mij,mjk,mlk->mil", hp, pose_blocks[pose_rows], hp)
        a = sig[:, 0, 0] + _PROJECTION_JITTER
        b = 0.5 * (sig[:, 0, 1] + sig[:, 1, 0])
        d = sig[:, 1, 1] + _PROJECTION_JITTER
        order = np.argsort(cells, kind="stable")
        _fuse_sorted(cells[order], a[order], b[order], d[order], sigma_flat, count_flat)
    else:
        np.add.at(count_flat, cells, 1)

    # Landmarks: occupancy hit plus a covariance stamp on their own cell,
    # for landmarks currently visible from at least one included pose.
    if lm_keys and poses.shape[0]:
        dist = np.linalg.norm(lm_xy[:, None, :] - poses[None, :, :2], axis=2)
        visible = np.any((dist > 1e-9) & (dist <= params.sensing_range), axis=1)
        for j, key in enumerate(lm_keys):
            if not visible[j]:
                continue
            row, col = grid.cell_of(lm_xy[j, 0], lm_xy[j, 1])
            if not grid.contains(row, col):
                continue
            flat = row * grid.n_cols + col
            if with_covariance:
                cov = marginals.cov(key)
                sigma_flat[flat] = (cov[0, 0], 0.5 * (cov[0, 1] + cov[1, 0]), cov[1, 1])
            count_flat[flat] += 1

    hit = count_flat > 0
    if np.any(hit):
        lo = count_flat[hit] * _logit(params.p_hit) + _logit(params.q_prior)
        vm.q.reshape(-1)[hit] = np.clip(1.0 / (1.0 + np.exp(-lo)), _Q_CLAMP, 1.0 - _Q_CLAMP)
    return vm
