"""Independent reference implementations used to check derived values.

Everything in here recomputes results from first principles with plain
numpy and finite differences, deliberately avoiding the package's own
Jacobians, solvers, and search code, so agreement is meaningful.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from emexplore.factor_graph import (
    BetweenFactor,
    PriorPointFactor,
    PriorPoseFactor,
    RangeBearingFactor,
)


def wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def whiten(cov: np.ndarray) -> np.ndarray:
    """W with W^T W = cov^-1, from a plain Cholesky of the covariance."""
    low = np.linalg.cholesky(np.asarray(cov, dtype=float))
    return np.linalg.inv(low)


# -- residual models, re-derived ------------------------------------------


def between_residual(xa, xb, measured, w):
    """Whitened between residual: predicted relative pose minus measured."""
    c, s = math.cos(xa[2]), math.sin(xa[2])
    dx, dy = xb[0] - xa[0], xb[1] - xa[1]
    pred = np.array([c * dx + s * dy, -s * dx + c * dy, xb[2] - xa[2]])
    r = pred - measured
    r[2] = wrap(r[2])
    return w @ r


def observe_residual(xp, xl, measured, w):
    dx, dy = xl[0] - xp[0], xl[1] - xp[1]
    pred = np.array([math.hypot(dx, dy), math.atan2(dy, dx) - xp[2]])
    r = pred - measured
    r[1] = wrap(r[1])
    return w @ r


def prior_pose_residual(x, measured, w):
    r = x - measured
    r[2] = wrap(r[2])
    return w @ r


def prior_point_residual(x, measured, w):
    return w @ (x - measured)


def fd_jacobian(fun, x, step=1e-7):
    """Central-difference Jacobian of fun at x (fun returns a vector)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    j = np.empty((f0.size, x.size))
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        j[:, i] = (np.asarray(fun(hi)) - np.asarray(fun(lo))) / (2.0 * step)
    return j


def dense_marginals(graph, keys, fd_step=1e-7):
    """Marginal covariances from a dense normal-equations matrix.

    Walks the graph's factors through the public API, rebuilds each whitened
    residual with the functions above, takes finite-difference Jacobians,
    accumulates H = sum J^T J densely over the free variables, and inverts.
    Only sensible for small graphs (a few dozen variables).
    """
    free = [k for k in graph.variable_keys() if not graph.is_fixed(k)]
    col0: dict = {}
    n = 0
    for k in free:
        v = graph.value(k)
        dim = 3 if hasattr(v, "theta") else 2
        col0[k] = (n, dim)
        n += dim

    def value_vec(key):
        v = graph.value(key)
        if hasattr(v, "theta"):
            return np.array([v.x, v.y, v.theta])
        return np.array([v.x, v.y])

    h = np.zeros((n, n))
    for f in graph.factors():
        if isinstance(f, BetweenFactor):
            w = whiten(f.cov)
            z = f.measured.as_array()
            ka, kb = f.key_a, f.key_b
            va, vb = value_vec(ka), value_vec(kb)

            def fun(x, va=va, vb=vb, z=z, w=w, fa=ka in col0, fb=kb in col0):
                ia = 3 if fa else 0
                xa = x[:3] if fa else va
                xb = x[ia : ia + 3] if fb else vb
                return between_residual(xa, xb, z, w)

            x0 = np.concatenate(
                [v for v, used in ((va, ka in col0), (vb, kb in col0)) if used]
            )
            parts = [k for k in (ka, kb) if k in col0]
        elif isinstance(f, RangeBearingFactor):
            w = whiten(f.cov)
            z = f.measured.as_array()
            kp, kl = f.pose_key, f.landmark_key
            vp, vl = value_vec(kp), value_vec(kl)

            def fun(x, vp=vp, vl=vl, z=z, w=w, fp=kp in col0, fl=kl in col0):
                ip = 3 if fp else 0
                xp = x[:3] if fp else vp
                xl = x[ip : ip + 2] if fl else vl
                return observe_residual(xp, xl, z, w)

            x0 = np.concatenate(
                [v for v, used in ((vp, kp in col0), (vl, kl in col0)) if used]
            )
            parts = [k for k in (kp, kl) if k in col0]
        elif isinstance(f, PriorPoseFactor):
            if f.key not in col0:
                continue
            w = whiten(f.cov)
            z = f.measured.as_array()

            def fun(x, z=z, w=w):
                return prior_pose_residual(x, z, w)

            x0 = value_vec(f.key)
            parts = [f.key]
        elif isinstance(f, PriorPointFactor):
            if f.key not in col0:
                continue
            w = whiten(f.cov)
            z = f.measured.as_array()

            def fun(x, z=z, w=w):
                return prior_point_residual(x, z, w)

            x0 = value_vec(f.key)
            parts = [f.key]
        else:
            raise TypeError(f"oracle does not know factor type {type(f).__name__}")
        if not parts:
            continue
        j = fd_jacobian(fun, x0, fd_step)
        cols = np.concatenate(
            [np.arange(col0[k][0], col0[k][0] + col0[k][1]) for k in parts]
        )
        h[np.ix_(cols, cols)] += j.T @ j

    cov = np.linalg.inv(h)
    out = {}
    for k in keys:
        o, dim = col0[k]
        block = cov[o : o + dim, o : o + dim]
        out[k] = 0.5 * (block + block.T)
    return out


# -- grid search ------------------------------------------------------------


def dijkstra_grid(blocked: np.ndarray, start, goal):
    """Plain Dijkstra over the 8-connected grid, same movement rules as the
    planner is documented to use (no squeezing between blocked corners,
    start always free, blocked goal unreachable).  Returns the cost in cell
    units or None."""
    n_rows, n_cols = blocked.shape
    if blocked[goal]:
        return None
    if start == goal:
        return 0.0
    dist = {start: 0.0}
    heap = [(0.0, start)]
    steps = [
        (-1, 0, 1.0),
        (1, 0, 1.0),
        (0, -1, 1.0),
        (0, 1, 1.0),
        (-1, -1, math.sqrt(2.0)),
        (-1, 1, math.sqrt(2.0)),
        (1, -1, math.sqrt(2.0)),
        (1, 1, math.sqrt(2.0)),
    ]
    seen = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur in seen:
            continue
        if cur == goal:
            return d
        seen.add(cur)
        r, c = cur
        for dr, dc, w in steps:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < n_rows and 0 <= nc < n_cols):
                continue
            if blocked[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (blocked[r + dr, c] or blocked[r, c + dc]):
                continue
            nd = d + w
            if nd < dist.get((nr, nc), math.inf):
                dist[(nr, nc)] = nd
                heapq.heappush(heap, (nd, (nr, nc)))
    return None


def boundary_cells_bruteforce(explored: np.ndarray, blocked: np.ndarray):
    """Set of (row, col): explored, unblocked, not on the outer ring, with a
    4-neighbor that is unexplored.  Double loop on purpose."""
    n_rows, n_cols = explored.shape
    out = set()
    for r in range(1, n_rows - 1):
        for c in range(1, n_cols - 1):
            if not explored[r, c] or blocked[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                if not explored[r + dr, c + dc]:
                    out.add((r, c))
                    break
    return out


def ci_trace_grid_scan(cov_a: np.ndarray, cov_b: np.ndarray, n: int = 2001):
    """Brute-force covariance-intersection weight: scan omega over a uniform
    grid and return the argmin of trace((w A^-1 + (1-w) B^-1)^-1)."""
    ia = np.linalg.inv(cov_a)
    ib = np.linalg.inv(cov_b)
    best_w, best_t = 0.0, math.inf
    for w in np.linspace(0.0, 1.0, n):
        k = w * ia + (1.0 - w) * ib
        t = float(np.trace(np.linalg.inv(k)))
        if t < best_t:
            best_t, best_w = t, float(w)
    return best_w, best_t
