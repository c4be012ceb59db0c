"""Nonlinear least-squares factor graph over SE(2) poses and point landmarks.

Variables are keyed by :class:`PoseKey` (robot id, time index) or
:class:`LandmarkKey`.  Factors are priors, relative-pose constraints
(odometry or robot-to-robot rendezvous), and range-bearing landmark
observations.  Optimization is batch Levenberg-Marquardt on the whitened
residual stack; marginal covariances are recovered from the Gauss-Newton
information matrix by sparse triangular solves.

Design notes
------------
Factor data is compiled into per-type column arrays so residuals and
Jacobians for thousands of factors are evaluated with a handful of numpy
kernels per iteration.  The compiled cache is append-only and copy-on-write,
so a graph and its clones share it until either side grows; that makes the
clone-extend-optimize pattern used by the planners cheap.

Variables may be marked *fixed*: they keep their value, contribute no
columns to the linear system, and act as gauge anchors.  This is exact
conditioning (the infinite-information limit of a prior).
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import splu

from .geometry import (
    Point2,
    Pose2,
    RangeBearing,
    between_arrays,
    jacobians_between_arrays,
    jacobians_observe_arrays,
    observe_arrays,
    validate_cov,
    wrap_angles,
)


class GaugeError(ValueError):
    """The graph has unconstrained degrees of freedom (some connected
    component is reached by no prior and no fixed variable)."""


class NotOptimizedError(RuntimeError):
    """Marginals were requested before :meth:`FactorGraph.optimize` ran on
    the current graph contents."""


class SingularGraphError(RuntimeError):
    """The information matrix could not be factorized."""


@dataclass(frozen=True, slots=True, order=True)
class PoseKey:
    robot_id: int
    time_index: int

    def __repr__(self) -> str:  # compact, shows up a lot in dumps/debugging
        return f"x{self.robot_id}@{self.time_index}"


@dataclass(frozen=True, slots=True, order=True)
class LandmarkKey:
    landmark_id: int

    def __repr__(self) -> str:
        return f"l{self.landmark_id}"


VariableKey = Union[PoseKey, LandmarkKey]

# Sort keys for the canonical variable orderings.  Plain ``sorted`` on the
# dataclasses works too but goes through the generated comparison methods,
# which shows up once planners sort key lists thousands of times per run.
_POSE_ORDER = operator.attrgetter("robot_id", "time_index")
_LANDMARK_ORDER = operator.attrgetter("landmark_id")


def _splu_spd(mat: scipy.sparse.csc_matrix):
    """LU factorization tuned for the SPD normal-equations matrices used
    here: a symmetric fill-reducing ordering and diagonal pivoting keep the
    factors several times sparser than the unsymmetric default."""
    return splu(
        mat,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.001,
        options={"SymmetricMode": True},
    )


_SQRT_INFO_CACHE: dict[tuple[int, bytes], np.ndarray] = {}


def _sqrt_info(cov: np.ndarray, dim: int) -> np.ndarray:
    """Whitening matrix W with W^T W = cov^-1 (W = L^-1, cov = L L^T).

    Results are cached by the covariance bytes: measurement models reuse a
    handful of covariance matrices thousands of times.
    """
    key = (dim, np.asarray(cov, dtype=float).tobytes())
    w = _SQRT_INFO_CACHE.get(key)
    if w is None:
        c = validate_cov(cov, dim)
        try:
            low = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise ValueError("factor covariance must be positive definite") from exc
        w = scipy.linalg.solve_triangular(low, np.eye(dim), lower=True)
        if len(_SQRT_INFO_CACHE) >= 8192:
            _SQRT_INFO_CACHE.clear()
        _SQRT_INFO_CACHE[key] = w
    return w


@dataclass(frozen=True, eq=False)
class PriorPoseFactor:
    key: PoseKey
    measured: Pose2
    cov: np.ndarray

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.key,)


@dataclass(frozen=True, eq=False)
class PriorPointFactor:
    key: LandmarkKey
    measured: Point2
    cov: np.ndarray

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.key,)


@dataclass(frozen=True, eq=False)
class BetweenFactor:
    """Relative-pose constraint: measured = pose of ``key_b`` in ``key_a``'s
    frame.  ``kind`` records provenance (odometry vs rendezvous, real vs
    virtual); the residual model is identical for all kinds."""

    key_a: PoseKey
    key_b: PoseKey
    measured: Pose2
    cov: np.ndarray
    kind: str = "odometry"

    def __post_init__(self) -> None:
        if self.kind not in ("odometry", "rendezvous", "virtual_odometry", "virtual_rendezvous"):
            raise ValueError(f"unknown between-factor kind {self.kind!r}")

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.key_a, self.key_b)


@dataclass(frozen=True, eq=False)
class RangeBearingFactor:
    pose_key: PoseKey
    landmark_key: LandmarkKey
    measured: RangeBearing
    cov: np.ndarray

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.pose_key, self.landmark_key)


Factor = Union[PriorPoseFactor, PriorPointFactor, BetweenFactor, RangeBearingFactor]


class _Block:
    """Immutable compiled arrays for one factor family.

    ``idx_*`` arrays index the flat storage vector per factor row;
    ``cols_*`` duplicate them for building Jacobian column indices.  A block
    is never mutated: growing it returns a new instance, so blocks can be
    shared between a graph and its clones.
    """

    __slots__ = ("count", "arrays")

    def __init__(self, count: int = 0, arrays: dict[str, np.ndarray] | None = None) -> None:
        self.count = count
        self.arrays = arrays if arrays is not None else {}

    def extended(self, parts: dict[str, np.ndarray], n_new: int) -> "_Block":
        if self.count == 0:
            return _Block(n_new, parts)
        merged = {k: np.concatenate([self.arrays[k], parts[k]]) for k in parts}
        return _Block(self.count + n_new, merged)


class MarginalSet:
    """Marginal covariance blocks for a set of variables."""

    def __init__(self, blocks: dict[VariableKey, np.ndarray]):
        self._blocks = blocks

    def cov(self, key: VariableKey) -> np.ndarray:
        try:
            return self._blocks[key]
        except KeyError:
            raise KeyError(f"no marginal was computed for {key!r}") from None

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def keys(self) -> Iterator[VariableKey]:
        return iter(self._blocks)

    def pose_blocks(self, keys: Sequence[PoseKey]) -> np.ndarray:
        """Stack 3x3 pose blocks for ``keys`` into an (n, 3, 3) array."""
        if not keys:
            return np.zeros((0, 3, 3))
        return np.stack([self._blocks[k] for k in keys])


class GraphEstimate:
    """Optimization result: every variable's estimate plus diagnostics.

    Values are held in flat arrays; :meth:`value` materializes dataclasses on
    demand and :meth:`pose_array` exposes stacked rows for bulk consumers.
    """

    def __init__(
        self,
        keys: tuple[VariableKey, ...],
        offsets: np.ndarray,
        values: np.ndarray,
        cost: float,
        converged: bool,
        iterations: int,
    ):
        self._keys = keys
        self._offsets = offsets
        self._values = values
        self.cost = cost
        self.converged = converged
        self.iterations = iterations
        self._index = {k: i for i, k in enumerate(keys)}

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> tuple[VariableKey, ...]:
        return self._keys

    def value(self, key: VariableKey) -> Pose2 | Point2:
        i = self._index[key]
        o = self._offsets[i]
        if isinstance(key, PoseKey):
            return Pose2(self._values[o], self._values[o + 1], self._values[o + 2])
        return Point2(self._values[o], self._values[o + 1])

    def pose_array(self, robot_id: int | None = None) -> tuple[list[PoseKey], np.ndarray]:
        """Pose estimates ordered by (robot, time) as an (n, 3) array."""
        keys = sorted(
            (k for k in self._keys if isinstance(k, PoseKey) and (robot_id is None or k.robot_id == robot_id)),
            key=_POSE_ORDER,
        )
        out = np.empty((len(keys), 3))
        for r, k in enumerate(keys):
            o = self._offsets[self._index[k]]
            out[r] = self._values[o : o + 3]
        return keys, out

    def landmark_array(self) -> tuple[list[LandmarkKey], np.ndarray]:
        """Landmark estimates ordered by id as an (n, 2) array."""
        keys = sorted((k for k in self._keys if isinstance(k, LandmarkKey)), key=_LANDMARK_ORDER)
        out = np.empty((len(keys), 2))
        for r, k in enumerate(keys):
            o = self._offsets[self._index[k]]
            out[r] = self._values[o : o + 2]
        return keys, out

    def as_dict(self) -> dict[VariableKey, Pose2 | Point2]:
        return {k: self.value(k) for k in self._keys}


class FactorGraph:
    """Mutable factor graph with batch LM optimization.

    Typical lifecycle: add variables and factors as measurements arrive,
    call :meth:`optimize` (cheap when warm-started at the previous optimum),
    then query :meth:`marginal_covariance` / :meth:`marginal_covariances`.
    """

    def __init__(self) -> None:
        self._slots: list[VariableKey] = []
        self._index: dict[VariableKey, int] = {}
        self._offsets: list[int] = []  # storage offset per slot
        self._dims: list[int] = []
        self._fixed: set[VariableKey] = set()
        self._x = np.zeros(0)
        self._theta_offsets: list[int] = []
        self._theta_idx_cache: np.ndarray | None = None

        self._priors_pose: list[PriorPoseFactor] = []
        self._priors_point: list[PriorPointFactor] = []
        self._betweens: list[BetweenFactor] = []
        self._range_bearings: list[RangeBearingFactor] = []

        self._blocks: dict[str, _Block] = {k: _Block() for k in ("pp", "pl", "bt", "rb")}
        self._pending: dict[str, list[dict[str, np.ndarray]]] = {k: [] for k in ("pp", "pl", "bt", "rb")}
        self._marginal_lu = None
        self._marginal_clean = False
        self._gauge_ok = False

    # -- construction -------------------------------------------------------

    def add_variable(self, key: VariableKey, initial: Pose2 | Point2, fixed: bool = False) -> None:
        if key in self._index:
            raise KeyError(f"variable {key!r} already exists")
        if isinstance(key, PoseKey):
            if not isinstance(initial, Pose2):
                raise TypeError(f"{key!r} requires a Pose2 initial value")
            vals, dim = initial.as_array(), 3
        elif isinstance(key, LandmarkKey):
            if not isinstance(initial, Point2):
                raise TypeError(f"{key!r} requires a Point2 initial value")
            vals, dim = initial.as_array(), 2
        else:
            raise TypeError(f"unsupported key type {type(key).__name__}")
        self._index[key] = len(self._slots)
        self._slots.append(key)
        off = self._x.size
        self._offsets.append(off)
        self._dims.append(dim)
        if dim == 3:
            self._theta_offsets.append(off + 2)
            self._theta_idx_cache = None
        if fixed:
            self._fixed.add(key)
        self._x = np.concatenate([self._x, vals])
        self._marginal_clean = False
        self._gauge_ok = False

    def fix_variable(self, key: VariableKey) -> None:
        """Freeze a variable at its current value (exact conditioning)."""
        self._require_key(key)
        self._fixed.add(key)
        self._marginal_clean = False
        self._gauge_ok = False

    def set_value(self, key: VariableKey, value: Pose2 | Point2) -> None:
        """Overwrite a variable's current estimate (e.g. to re-initialize)."""
        self._require_key(key)
        slot = self._index[key]
        off, dim = self._offsets[slot], self._dims[slot]
        arr = value.as_array()
        if arr.size != dim:
            raise TypeError(f"value of wrong dimension for {key!r}")
        self._x[off : off + dim] = arr
        self._marginal_clean = False

    def add_factor(self, factor: Factor) -> None:
        for key in factor.keys:
            self._require_key(key)
        if isinstance(factor, PriorPoseFactor):
            w = _sqrt_info(factor.cov, 3)
            self._priors_pose.append(factor)
            self._pending["pp"].append({
                "idx": self._dof_idx(factor.key, 3),
                "measured": factor.measured.as_array(),
                "w": w,
            })
        elif isinstance(factor, PriorPointFactor):
            w = _sqrt_info(factor.cov, 2)
            self._priors_point.append(factor)
            self._pending["pl"].append({
                "idx": self._dof_idx(factor.key, 2),
                "measured": factor.measured.as_array(),
                "w": w,
            })
        elif isinstance(factor, BetweenFactor):
            if not isinstance(factor.key_a, PoseKey) or not isinstance(factor.key_b, PoseKey):
                raise TypeError("between factors connect two poses")
            w = _sqrt_info(factor.cov, 3)
            self._betweens.append(factor)
            self._pending["bt"].append({
                "idx_a": self._dof_idx(factor.key_a, 3),
                "idx_b": self._dof_idx(factor.key_b, 3),
                "measured": factor.measured.as_array(),
                "w": w,
            })
        elif isinstance(factor, RangeBearingFactor):
            w = _sqrt_info(factor.cov, 2)
            self._range_bearings.append(factor)
            self._pending["rb"].append({
                "idx_p": self._dof_idx(factor.pose_key, 3),
                "idx_l": self._dof_idx(factor.landmark_key, 2),
                "measured": factor.measured.as_array(),
                "w": w,
            })
        else:
            raise TypeError(f"unsupported factor type {type(factor).__name__}")
        self._marginal_clean = False

    def _dof_idx(self, key: VariableKey, dim: int) -> np.ndarray:
        off = self._offsets[self._index[key]]
        return np.arange(off, off + dim, dtype=np.int64)

    def _require_key(self, key: VariableKey) -> None:
        if key not in self._index:
            raise KeyError(f"unknown variable {key!r}")

    def _block(self, name: str) -> _Block:
        pend = self._pending[name]
        if pend:
            parts = {k: np.stack([p[k] for p in pend]) for k in pend[0]}
            self._blocks[name] = self._blocks[name].extended(parts, len(pend))
            pend.clear()
        return self._blocks[name]

    # -- introspection ------------------------------------------------------

    @property
    def n_variables(self) -> int:
        return len(self._slots)

    @property
    def n_factors(self) -> int:
        return (
            len(self._priors_pose)
            + len(self._priors_point)
            + len(self._betweens)
            + len(self._range_bearings)
        )

    def has_variable(self, key: VariableKey) -> bool:
        return key in self._index

    def is_fixed(self, key: VariableKey) -> bool:
        return key in self._fixed

    def variable_keys(self) -> list[VariableKey]:
        return list(self._slots)

    def pose_keys(self, robot_id: int | None = None) -> list[PoseKey]:
        return sorted(
            (k for k in self._slots if isinstance(k, PoseKey) and (robot_id is None or k.robot_id == robot_id)),
            key=_POSE_ORDER,
        )

    def landmark_keys(self) -> list[LandmarkKey]:
        return sorted((k for k in self._slots if isinstance(k, LandmarkKey)), key=_LANDMARK_ORDER)

    def factors(self) -> list[Factor]:
        return [*self._priors_pose, *self._priors_point, *self._betweens, *self._range_bearings]

    def value(self, key: VariableKey) -> Pose2 | Point2:
        i = self._index[key]
        o = self._offsets[i]
        if isinstance(key, PoseKey):
            return Pose2(self._x[o], self._x[o + 1], self._x[o + 2])
        return Point2(self._x[o], self._x[o + 1])

    def current_estimate(self, with_cost: bool = True) -> GraphEstimate:
        """Snapshot of the current values without optimizing.  Pass
        ``with_cost=False`` to skip the residual evaluation (cost is NaN)."""
        return GraphEstimate(
            keys=tuple(self._slots),
            offsets=np.asarray(self._offsets, dtype=np.int64),
            values=self._x.copy(),
            cost=self._cost(self._x) if with_cost else float("nan"),
            converged=False,
            iterations=0,
        )

    def clone(self) -> "FactorGraph":
        """Independent copy; cheap because compiled caches are shared until
        either graph grows."""
        g = FactorGraph.__new__(FactorGraph)
        g._slots = list(self._slots)
        g._index = dict(self._index)
        g._offsets = list(self._offsets)
        g._dims = list(self._dims)
        g._fixed = set(self._fixed)
        g._x = self._x.copy()
        g._theta_offsets = list(self._theta_offsets)
        g._theta_idx_cache = None
        g._priors_pose = list(self._priors_pose)
        g._priors_point = list(self._priors_point)
        g._betweens = list(self._betweens)
        g._range_bearings = list(self._range_bearings)
        g._blocks = dict(self._blocks)  # _Block instances are immutable
        g._pending = {k: list(v) for k, v in self._pending.items()}
        g._marginal_lu = None
        g._marginal_clean = False
        g._gauge_ok = self._gauge_ok
        return g

    # -- linearization ------------------------------------------------------

    def _layout(self) -> tuple[np.ndarray, int]:
        """Map storage dofs to system columns (-1 for fixed)."""
        col_of = np.full(self._x.size, -1, dtype=np.int64)
        col = 0
        for slot, key in enumerate(self._slots):
            if key in self._fixed:
                continue
            off, dim = self._offsets[slot], self._dims[slot]
            col_of[off : off + dim] = np.arange(col, col + dim)
            col += dim
        return col_of, col

    def _residual_blocks(self, x: np.ndarray, with_jacobian: bool, tails: dict[str, int] | None = None):
        """Whitened residuals (and optionally Jacobian values) per family.

        Yields (e, vals, storage_cols): ``e`` is (n, rdim); ``vals`` is
        (n, rdim, cdim) whitened Jacobian entries; ``storage_cols`` is
        (n, cdim) storage dof indices (mapped to system columns later).
        ``tails`` restricts each family to the factors added after the given
        count (extension rows only).
        """

        def start(name: str) -> int:
            return tails.get(name, 0) if tails is not None else 0

        bt = self._block("bt")
        s = start("bt")
        if bt.count > s:
            idx_a = bt.arrays["idx_a"][s:]
            idx_b = bt.arrays["idx_b"][s:]
            a = x[idx_a]
            b = x[idx_b]
            r = between_arrays(a, b) - bt.arrays["measured"][s:]
            r[:, 2] = wrap_angles(r[:, 2])
            w = bt.arrays["w"][s:]
            e = np.einsum("nij,nj->ni", w, r)
            if with_jacobian:
                ja, jb = jacobians_between_arrays(a, b)
                vals = np.concatenate(
                    [np.einsum("nij,njk->nik", w, ja), np.einsum("nij,njk->nik", w, jb)], axis=2
                )
                cols = np.concatenate([idx_a, idx_b], axis=1)
                yield e, vals, cols
            else:
                yield e, None, None
        rb = self._block("rb")
        s = start("rb")
        if rb.count > s:
            idx_p = rb.arrays["idx_p"][s:]
            idx_l = rb.arrays["idx_l"][s:]
            p = x[idx_p]
            l = x[idx_l]
            r = observe_arrays(p, l) - rb.arrays["measured"][s:]
            r[:, 1] = wrap_angles(r[:, 1])
            w = rb.arrays["w"][s:]
            e = np.einsum("nij,nj->ni", w, r)
            if with_jacobian:
                hp, hl = jacobians_observe_arrays(p, l)
                vals = np.concatenate(
                    [np.einsum("nij,njk->nik", w, hp), np.einsum("nij,njk->nik", w, hl)], axis=2
                )
                cols = np.concatenate([idx_p, idx_l], axis=1)
                yield e, vals, cols
            else:
                yield e, None, None
        pp = self._block("pp")
        s = start("pp")
        if pp.count > s:
            idx = pp.arrays["idx"][s:]
            v = x[idx]
            r = v - pp.arrays["measured"][s:]
            r[:, 2] = wrap_angles(r[:, 2])
            w = pp.arrays["w"][s:]
            e = np.einsum("nij,nj->ni", w, r)
            if with_jacobian:
                yield e, w.copy(), idx
            else:
                yield e, None, None
        pl = self._block("pl")
        s = start("pl")
        if pl.count > s:
            idx = pl.arrays["idx"][s:]
            v = x[idx]
            r = v - pl.arrays["measured"][s:]
            w = pl.arrays["w"][s:]
            e = np.einsum("nij,nj->ni", w, r)
            if with_jacobian:
                yield e, w.copy(), idx
            else:
                yield e, None, None

    def _cost(self, x: np.ndarray) -> float:
        total = 0.0
        for e, _, _ in self._residual_blocks(x, with_jacobian=False):
            total += float(np.sum(e * e))
        return 0.5 * total

    def _assemble(self, x: np.ndarray, col_of: np.ndarray, n_cols: int, tails: dict[str, int] | None = None):
        """Build the whitened Jacobian (sparse CSC) and residual vector,
        optionally restricted to the factors past the ``tails`` counts."""
        rows_list, cols_list, vals_list, e_list = [], [], [], []
        row_base = 0
        for e, vals, storage_cols in self._residual_blocks(x, with_jacobian=True, tails=tails):
            n, rdim = e.shape
            e_list.append(e.reshape(-1))
            cdim = storage_cols.shape[1]
            sys_cols = col_of[storage_cols]  # (n, cdim); -1 where fixed
            rows = row_base + np.repeat(np.arange(n * rdim), cdim)
            cols = np.broadcast_to(sys_cols[:, None, :], (n, rdim, cdim)).reshape(-1)
            v = vals.reshape(-1)
            keep = cols >= 0
            rows_list.append(rows[keep])
            cols_list.append(cols[keep])
            vals_list.append(v[keep])
            row_base += n * rdim
        e_all = np.concatenate(e_list) if e_list else np.zeros(0)
        if rows_list:
            rows = np.concatenate(rows_list)
            cols = np.concatenate(cols_list)
            vals = np.concatenate(vals_list)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        j = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(row_base, n_cols)).tocsc()
        return j, e_all

    def _theta_idx(self) -> np.ndarray:
        if self._theta_idx_cache is None or self._theta_idx_cache.size != len(self._theta_offsets):
            self._theta_idx_cache = np.asarray(self._theta_offsets, dtype=np.int64)
        return self._theta_idx_cache

    def _retract(self, x: np.ndarray, delta: np.ndarray, col_of: np.ndarray) -> np.ndarray:
        out = x.copy()
        free = col_of >= 0
        out[free] = out[free] + delta[col_of[free]]
        t = self._theta_idx()
        if t.size:
            out[t] = wrap_angles(out[t])
        return out

    # -- gauge check --------------------------------------------------------

    def _check_gauge(self) -> None:
        """Union-find over variables; every component containing a free
        variable must be anchored by a prior or a fixed variable.

        The result is cached: adding factors or fixing variables can only
        merge components or add anchors, so only a new variable can break
        an established gauge.
        """
        if self._gauge_ok:
            return
        n = len(self._slots)
        parent = list(range(n))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        def union(i: int, j: int) -> None:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj

        anchored = [key in self._fixed for key in self._slots]
        for f in self._priors_pose:
            anchored[self._index[f.key]] = True
        for f in self._priors_point:
            anchored[self._index[f.key]] = True
        for f in self._betweens:
            union(self._index[f.key_a], self._index[f.key_b])
        for f in self._range_bearings:
            union(self._index[f.pose_key], self._index[f.landmark_key])
        root_anchored = [False] * n
        for i in range(n):
            if anchored[i]:
                root_anchored[find(i)] = True
        for i, key in enumerate(self._slots):
            if key not in self._fixed and not root_anchored[find(i)]:
                raise GaugeError(
                    f"variable {key!r} lies in a connected component with no prior or fixed anchor"
                )
        self._gauge_ok = True

    # -- optimization -------------------------------------------------------

    def optimize(
        self,
        max_iterations: int = 100,
        rel_decrease_tol: float = 1e-8,
        update_tol: float = 1e-8,
        initial_damping: float = 1e-4,
    ) -> GraphEstimate:
        """Batch Levenberg-Marquardt from the current values.

        Damping multiplies the information diagonal, grows tenfold on a
        rejected step and shrinks tenfold on an accepted one.  Iterations
        stop when the relative cost decrease or the update norm falls below
        tolerance, or at ``max_iterations`` (``converged`` False, best
        iterate kept).  Accepted steps never increase the cost.  Updated
        estimates are written back into the graph.
        """
        self._check_gauge()
        col_of, n_cols = self._layout()
        x = self._x.copy()
        cost = self._cost(x)
        converged = n_cols == 0  # nothing free to optimize
        lam = initial_damping
        iters = 0
        while not converged and iters < max_iterations:
            iters += 1
            j, e = self._assemble(x, col_of, n_cols)
            h = (j.T @ j).tocsc()
            g = j.T @ e
            d = np.maximum(h.diagonal(), 1e-12)
            try:
                lu = _splu_spd(h + scipy.sparse.diags(lam * d, format="csc"))
                delta = lu.solve(-g)
            except RuntimeError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            if float(np.linalg.norm(delta)) < update_tol:
                x_new = self._retract(x, delta, col_of)
                new_cost = self._cost(x_new)
                if new_cost < cost:
                    x, cost = x_new, new_cost
                converged = True
                break
            x_new = self._retract(x, delta, col_of)
            new_cost = self._cost(x_new)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                x, cost = x_new, new_cost
                lam = max(lam / 10.0, 1e-12)
                if rel < rel_decrease_tol:
                    converged = True
            else:
                lam *= 10.0
        self._x = x
        self._marginal_lu = None
        self._marginal_clean = True
        return GraphEstimate(
            keys=tuple(self._slots),
            offsets=np.asarray(self._offsets, dtype=np.int64),
            values=x.copy(),
            cost=cost,
            converged=converged,
            iterations=iters,
        )

    # -- marginals ----------------------------------------------------------

    def _marginal_factorization(self):
        if not self._marginal_clean:
            raise NotOptimizedError(
                "optimize() must run after the last graph change before querying marginals"
            )
        if self._marginal_lu is None:
            col_of, n_cols = self._layout()
            j, _ = self._assemble(self._x, col_of, n_cols)
            h = (j.T @ j).tocsc()
            try:
                lu = _splu_spd(h)
            except RuntimeError as exc:
                raise SingularGraphError("information matrix is singular") from exc
            self._marginal_lu = (lu, col_of, n_cols)
        return self._marginal_lu

    def marginal_covariances(self, keys: Iterable[VariableKey]) -> MarginalSet:
        """Marginal covariance blocks for several variables with one sparse
        multi-column solve against the information matrix."""
        key_list = list(keys)
        if not key_list:
            return MarginalSet({})
        lu, col_of, n_cols = self._marginal_factorization()
        col_groups: list[np.ndarray] = []
        for key in key_list:
            self._require_key(key)
            if key in self._fixed:
                raise ValueError(f"{key!r} is fixed; it has no marginal covariance")
            slot = self._index[key]
            off, dim = self._offsets[slot], self._dims[slot]
            col_groups.append(col_of[off : off + dim])
        all_cols = np.concatenate(col_groups)
        rhs = np.zeros((n_cols, all_cols.size))
        rhs[all_cols, np.arange(all_cols.size)] = 1.0
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SingularGraphError("information matrix is singular")
        blocks: dict[VariableKey, np.ndarray] = {}
        pos = 0
        for key, cols in zip(key_list, col_groups):
            dim = cols.size
            block = sol[np.ix_(cols, np.arange(pos, pos + dim))]
            blocks[key] = 0.5 * (block + block.T)
            pos += dim
        return MarginalSet(blocks)

    def marginal_covariance(self, key: VariableKey) -> np.ndarray:
        """Marginal covariance of one variable (3x3 for poses, 2x2 for
        landmarks) from the Gauss-Newton information matrix at the current
        linearization point."""
        return self.marginal_covariances([key]).cov(key)

    def marginal_context(self, keys: Iterable[VariableKey]) -> "MarginalContext":
        """Prepare a reusable :class:`MarginalContext` over this graph.

        ``keys`` are the existing variables whose marginals will be queried
        from extensions of this graph; their information-matrix columns are
        presolved once here so each extension only pays for what it adds.
        """
        return MarginalContext(self, keys)

    # -- debug dump ---------------------------------------------------------

    def dump(self, path: str) -> None:
        """Write a human-readable snapshot: one variable or factor per line.

        Format: comment header, then ``var`` lines
        (``var pose <robot> <time> <fixed> <x> <y> <theta>`` or
        ``var landmark <id> <fixed> <x> <y>``) followed by ``factor`` lines
        carrying the type, keys, measured values and row-major covariance.
        """
        lines = [
            "# factor graph dump",
            f"# variables={self.n_variables} factors={self.n_factors}",
            "# var pose <robot> <time> <fixed> <x> <y> <theta>",
            "# var landmark <id> <fixed> <x> <y>",
            "# factor <type> <keys...> <measured...> <cov row-major...>",
        ]
        for key in self._slots:
            fixed = int(key in self._fixed)
            if isinstance(key, PoseKey):
                p = self.value(key)
                lines.append(f"var pose {key.robot_id} {key.time_index} {fixed} {p.x!r} {p.y!r} {p.theta!r}")
            else:
                p = self.value(key)
                lines.append(f"var landmark {key.landmark_id} {fixed} {p.x!r} {p.y!r}")

        def fmt(a: np.ndarray) -> str:
            return " ".join(repr(float(v)) for v in np.asarray(a).ravel())

        for f in self._priors_pose:
            lines.append(
                f"factor prior_pose {f.key.robot_id} {f.key.time_index} {fmt(f.measured.as_array())} {fmt(f.cov)}"
            )
        for f in self._priors_point:
            lines.append(f"factor prior_point {f.key.landmark_id} {fmt(f.measured.as_array())} {fmt(f.cov)}")
        for f in self._betweens:
            lines.append(
                f"factor between_{f.kind} {f.key_a.robot_id} {f.key_a.time_index} "
                f"{f.key_b.robot_id} {f.key_b.time_index} {fmt(f.measured.as_array())} {fmt(f.cov)}"
            )
        for f in self._range_bearings:
            lines.append(
                f"factor range_bearing {f.pose_key.robot_id} {f.pose_key.time_index} "
                f"{f.landmark_key.landmark_id} {fmt(f.measured.as_array())} {fmt(f.cov)}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _cho(mat: np.ndarray, what: str):
    """Cholesky factor of a small dense SPD matrix, as a cho_solve handle."""
    try:
        return scipy.linalg.cho_factor(mat, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularGraphError(f"{what} is not positive definite") from exc


class MarginalContext:
    """Shared factorization for pricing many small extensions of one graph.

    Candidate evaluation repeatedly clones an optimized graph, appends a few
    variables and factors, and asks for marginal covariances.  Refactorizing
    the whole information matrix for every candidate wastes nearly all of
    that work because the base block never changes.  This context factors the
    base information matrix H once, presolves the covariance columns for the
    base keys of interest, and then prices each extension exactly through its
    *footprint*: the handful of base columns its factors actually touch.

    Split the extension's whitened Jacobian U into base columns U_b and
    new-variable columns U_c, and let F be the nonzero column support of U_b
    (chain anchors plus observed landmarks, a few dozen dofs).  With
    Y = H^-1 E_F and the dense f x f and m x m pieces

        K = Y[F],  A = K^-1 + Ub'Ub,  C = Uc'Uc,  V = Ub'Uc   (Ub = U_b[:, F])

    two Woodbury applications collapse the extended covariance to::

        cov(new)  = (C - V' A^-1 V)^-1                       [sparse C, rank-f fix]
        cov(base) = H^-1 + Y Q Y'                            [Q is f x f]

    so per candidate there is no large factorization and no large solve: the
    presolved columns already contain Y whenever the planner asked for every
    key the extension can touch, and missing footprint columns fall back to
    one thin solve against the cached factor.

    Nothing here re-optimizes: callers must only extend with factors whose
    residuals vanish at the base values (measurements synthesized from the
    current estimate), which keeps the base estimate the exact optimum of
    the extended graph and the cached linearization point valid.
    """

    def __init__(self, graph: FactorGraph, keys: Iterable[VariableKey]) -> None:
        lu, col_of, n_cols = graph._marginal_factorization()
        self._lu = lu
        self._col_of = col_of
        self._n_base_cols = n_cols
        self._base_x = graph._x.copy()
        self._base_size = graph._x.size
        self._fixed = frozenset(graph._fixed)
        self._n_slots = len(graph._slots)
        self._tails = {name: graph._block(name).count for name in ("pp", "pl", "bt", "rb")}
        self._cols: dict[VariableKey, np.ndarray] = {}
        self._pos: dict[VariableKey, np.ndarray] = {}
        pos = 0
        for key in keys:
            graph._require_key(key)
            if key in graph._fixed:
                raise ValueError(f"{key!r} is fixed; it has no marginal covariance")
            if key in self._cols:
                continue
            slot = graph._index[key]
            off, dim = graph._offsets[slot], graph._dims[slot]
            self._cols[key] = col_of[off : off + dim]
            self._pos[key] = np.arange(pos, pos + dim)
            pos += dim
        if pos:
            all_cols = np.concatenate([self._cols[k] for k in self._cols])
            rhs = np.zeros((n_cols, pos))
            rhs[all_cols, np.arange(pos)] = 1.0
            x_sol = lu.solve(rhs)
            if not np.all(np.isfinite(x_sol)):
                raise SingularGraphError("information matrix is singular")
        else:
            all_cols = np.zeros(0, dtype=np.int64)
            x_sol = np.zeros((n_cols, 0))
        self._x_sol = x_sol
        # system column -> presolved column position (-1 where absent)
        self._col_pos = np.full(n_cols, -1, dtype=np.int64)
        self._col_pos[all_cols] = np.arange(all_cols.size)
        # base-graph marginal blocks, reused as the zeroth-order term
        self._base_blocks: dict[VariableKey, np.ndarray] = {
            k: x_sol[np.ix_(self._cols[k], self._pos[k])] for k in self._cols
        }

    def base_marginals(self) -> MarginalSet:
        """Marginals of the presolved keys in the base graph itself."""
        return MarginalSet(
            {k: 0.5 * (b + b.T) for k, b in self._base_blocks.items()}
        )

    def _footprint_solution(self, f_cols: np.ndarray) -> np.ndarray:
        """H^-1 columns for the footprint, preferring presolved ones."""
        pos = self._col_pos[f_cols]
        missing = f_cols[pos < 0]
        if missing.size == 0:
            return self._x_sol[:, pos]
        rhs = np.zeros((self._n_base_cols, missing.size))
        rhs[missing, np.arange(missing.size)] = 1.0
        extra = self._lu.solve(rhs)
        if not np.all(np.isfinite(extra)):
            raise SingularGraphError("information matrix is singular")
        y = np.empty((self._n_base_cols, f_cols.size))
        miss_at = 0
        for i in range(f_cols.size):
            if pos[i] >= 0:
                y[:, i] = self._x_sol[:, pos[i]]
            else:
                y[:, i] = extra[:, miss_at]
                miss_at += 1
        return y

    def _extension_layout(self, extension: FactorGraph) -> tuple[np.ndarray, int]:
        """Column layout of the extension: base columns verbatim, new
        variables appended after them in registration order."""
        ext_col_of = np.full(extension._x.size, -1, dtype=np.int64)
        ext_col_of[: self._base_size] = self._col_of
        col = self._n_base_cols
        for slot in range(self._n_slots, len(extension._slots)):
            off, dim = extension._offsets[slot], extension._dims[slot]
            ext_col_of[off : off + dim] = np.arange(col, col + dim)
            col += dim
        return ext_col_of, col

    def extended_marginals(self, extension: FactorGraph, keys: Iterable[VariableKey]) -> MarginalSet:
        """Marginal covariance blocks inside ``extension``.

        ``extension`` must be an append-only clone of the base graph: same
        variables in the same order with bit-identical values and the same
        fixed set, plus any new (never fixed) variables and factors after
        them.  Violations raise rather than returning silently wrong
        covariances.  Keys that live in the base graph must have been
        presolved at construction time; keys the extension introduced are
        always allowed.
        """
        if extension._x.size < self._base_size or not np.array_equal(
            extension._x[: self._base_size], self._base_x
        ):
            raise ValueError("extension altered base values; cached factorization is stale")
        if extension._fixed != self._fixed:
            raise ValueError("extension altered the fixed-variable set")
        ext_col_of, ext_n_cols = self._extension_layout(extension)
        n_b = self._n_base_cols
        m = ext_n_cols - n_b

        base_req: list[VariableKey] = []
        new_req: list[VariableKey] = []
        for key in keys:
            extension._require_key(key)
            if key in self._cols:
                base_req.append(key)
            elif key in self._fixed:
                raise ValueError(f"{key!r} is fixed; it has no marginal covariance")
            elif extension._offsets[extension._index[key]] < self._base_size:
                raise KeyError(f"base variable {key!r} was not presolved in this context")
            else:
                new_req.append(key)

        u, _ = extension._assemble(extension._x, ext_col_of, ext_n_cols, tails=self._tails)
        p = u.shape[0]
        blocks: dict[VariableKey, np.ndarray] = {}
        if p == 0:
            if new_req:
                raise SingularGraphError("extension variables are unconstrained")
            for key in base_req:
                b = self._base_blocks[key]
                blocks[key] = 0.5 * (b + b.T)
            return MarginalSet(blocks)

        u_b = u[:, :n_b].tocsc()
        f_cols = np.flatnonzero(np.diff(u_b.indptr))  # footprint: touched base columns
        ub = u_b[:, f_cols].toarray()  # (p, f)
        nf = f_cols.size
        y = self._footprint_solution(f_cols)  # (n_b, f) = H^-1 E_F
        k_ff = 0.5 * (y[f_cols, :] + y[f_cols, :].T)
        k_cho = _cho(k_ff, "footprint covariance block")
        cf = ub.T @ ub
        a_ff = scipy.linalg.cho_solve(k_cho, np.eye(nf), check_finite=False) + cf
        a_cho = _cho(a_ff, "extension update matrix")
        m_ff = cf - cf @ scipy.linalg.cho_solve(a_cho, cf, check_finite=False)
        q_ff = -m_ff

        c_lu = None
        r_mat = b_inv = None
        if m:
            u_c = u[:, n_b:].tocsc()
            c_mat = (u_c.T @ u_c).tocsc()
            try:
                c_lu = _splu_spd(c_mat)
            except RuntimeError as exc:
                raise SingularGraphError("extension leaves new variables unconstrained") from exc
            v_t = (u_c.T @ ub)  # (m, f) = V'
            v_t = v_t.toarray() if scipy.sparse.issparse(v_t) else np.asarray(v_t)
            r_mat = c_lu.solve(v_t)  # (m, f) = C^-1 V'
            if not np.all(np.isfinite(r_mat)):
                raise SingularGraphError("extension leaves new variables unconstrained")
            b_ff = a_ff - v_t.T @ r_mat
            b_cho = _cho(b_ff, "extension coupling matrix")
            b_inv = scipy.linalg.cho_solve(b_cho, np.eye(nf), check_finite=False)
            n_ff = v_t.T - cf @ scipy.linalg.cho_solve(a_cho, v_t.T, check_finite=False)  # (f, m)
            rn = c_lu.solve(n_ff.T)  # (m, f) = C^-1 N'
            nr = n_ff @ r_mat  # (f, f) = N R
            q_ff = q_ff + n_ff @ rn + nr @ b_inv @ nr.T

        if base_req:
            row_groups = [self._cols[k] for k in base_req]
            req_rows = np.concatenate(row_groups)
            yq = y[req_rows, :] @ q_ff  # (r, f)
            y_req = y[req_rows, :]
            pos = 0
            for key, rows in zip(base_req, row_groups):
                dim = rows.size
                sel = slice(pos, pos + dim)
                b = self._base_blocks[key] + yq[sel] @ y_req[sel].T
                blocks[key] = 0.5 * (b + b.T)
                pos += dim
        if new_req:
            cc_groups = []
            for key in new_req:
                slot = extension._index[key]
                off, dim = extension._offsets[slot], extension._dims[slot]
                cc_groups.append(ext_col_of[off : off + dim] - n_b)
            cc_all = np.concatenate(cc_groups)
            rhs = np.zeros((m, cc_all.size))
            rhs[cc_all, np.arange(cc_all.size)] = 1.0
            c_diag = c_lu.solve(rhs)  # C^-1 unit columns
            if not np.all(np.isfinite(c_diag)):
                raise SingularGraphError("extension leaves new variables unconstrained")
            pos = 0
            for key, cc in zip(new_req, cc_groups):
                dim = cc.size
                sel = np.arange(pos, pos + dim)
                r_cc = r_mat[cc, :]
                b = c_diag[np.ix_(cc, sel)] + r_cc @ b_inv @ r_cc.T
                blocks[key] = 0.5 * (b + b.T)
                pos += dim
        return MarginalSet(blocks)
