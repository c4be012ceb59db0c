"""Planar rigid-body geometry and range-bearing measurement models.

Conventions used throughout the package:

- World frame is right-handed, x forward / y left, headings in radians.
- Every heading and bearing is wrapped to the half-open interval (-pi, pi].
- Bearings are measured counterclockwise from the observing robot's heading
  axis, so a landmark dead ahead has bearing zero.

The module provides scalar operations on small frozen dataclasses plus
vectorized variants operating on stacked ``(n, 3)`` pose arrays and
``(n, 2)`` point arrays for the optimizer and mapping hot paths.  The two
families implement the same formulas and are cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class DegenerateGeometryError(ValueError):
    """Raised when a geometric operation has no well-defined result."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi].

    Parameters
    ----------
    theta
        Angle in radians, any magnitude.

    Returns
    -------
    float
        Equivalent angle in (-pi, pi].  Idempotent.
    """
    w = math.remainder(theta, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle` for float arrays."""
    t = np.asarray(theta, dtype=float)
    w = np.remainder(t + math.pi, TWO_PI) - math.pi
    # remainder lands in [-pi, pi); fold the closed end onto +pi.
    return np.where(w <= -math.pi, w + TWO_PI, w)


@dataclass(frozen=True, slots=True)
class Point2:
    """A planar point in the world frame, in meters."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point2 components must be finite, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @staticmethod
    def from_array(a: np.ndarray) -> "Point2":
        return Point2(float(a[0]), float(a[1]))


@dataclass(frozen=True, slots=True)
class Pose2:
    """An SE(2) pose: translation in meters, heading in radians.

    The heading is wrapped to (-pi, pi] on construction, so instances
    produced by any of the module operations always carry a wrapped angle.
    """

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"Pose2 components must be finite, got ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> Point2:
        return Point2(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @staticmethod
    def from_array(a: np.ndarray) -> "Pose2":
        return Pose2(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True, slots=True)
class RangeBearing:
    """A range-bearing observation: range in meters, bearing in radians.

    Bearing is counterclockwise-positive from the observer's heading and is
    wrapped to (-pi, pi] on construction.  Range is non-negative.
    """

    range: float
    bearing: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.range) and math.isfinite(self.bearing)):
            raise ValueError("RangeBearing components must be finite")
        if self.range < 0.0:
            raise ValueError(f"range must be non-negative, got {self.range}")
        object.__setattr__(self, "bearing", wrap_angle(self.bearing))

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.bearing], dtype=float)


# 95% of a zero-mean Gaussian lies within +-1.96 sigma; sensor datasheets in
# this package quote error bounds as 95% confidence intervals.
CI95_FACTOR = 1.96


@dataclass(frozen=True, slots=True)
class NoiseSpec:
    """Standard deviations of the sensing and dead-reckoning channels.

    Attributes
    ----------
    range_sigma
        Range measurement noise, meters.
    bearing_sigma
        Bearing measurement noise, radians.
    odom_trans_sigma
        Dead-reckoning translation noise per simulation step, meters
        (applied independently to the longitudinal and lateral axes).
    odom_rot_sigma
        Dead-reckoning rotation noise per simulation step, radians.
    max_sensing_range
        Detection range for landmarks and other robots, meters.
    """

    range_sigma: float
    bearing_sigma: float
    odom_trans_sigma: float
    odom_rot_sigma: float
    max_sensing_range: float

    def __post_init__(self) -> None:
        for name in ("range_sigma", "bearing_sigma", "odom_trans_sigma", "odom_rot_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not math.isfinite(self.max_sensing_range) or self.max_sensing_range <= 0.0:
            raise ValueError(f"max_sensing_range must be positive, got {self.max_sensing_range}")

    @staticmethod
    def from_95ci(
        range_error: float,
        bearing_error_deg: float,
        odom_trans_error: float,
        odom_rot_error_deg: float,
        max_sensing_range: float,
    ) -> "NoiseSpec":
        """Build a spec from 95% confidence-interval error bounds.

        Each bound is divided by 1.96 to obtain the Gaussian sigma; angular
        bounds are given in degrees.
        """
        return NoiseSpec(
            range_sigma=range_error / CI95_FACTOR,
            bearing_sigma=math.radians(bearing_error_deg) / CI95_FACTOR,
            odom_trans_sigma=odom_trans_error / CI95_FACTOR,
            odom_rot_sigma=math.radians(odom_rot_error_deg) / CI95_FACTOR,
            max_sensing_range=max_sensing_range,
        )

    def scaled(self, factor: float) -> "NoiseSpec":
        """Return a copy with every sigma multiplied by ``factor``."""
        return NoiseSpec(
            range_sigma=self.range_sigma * factor,
            bearing_sigma=self.bearing_sigma * factor,
            odom_trans_sigma=self.odom_trans_sigma * factor,
            odom_rot_sigma=self.odom_rot_sigma * factor,
            max_sensing_range=self.max_sensing_range,
        )

    def range_bearing_cov(self) -> np.ndarray:
        """2x2 covariance of one range-bearing measurement."""
        return np.diag([self.range_sigma**2, self.bearing_sigma**2])

    def odometry_step_cov(self) -> np.ndarray:
        """3x3 covariance of one dead-reckoning step (dx, dy, dtheta)."""
        return np.diag([self.odom_trans_sigma**2, self.odom_trans_sigma**2, self.odom_rot_sigma**2])

    def rendezvous_cov(self) -> np.ndarray:
        """3x3 covariance of a robot-to-robot relative pose measurement.

        Translation channels reuse the range noise; the relative heading
        combines two bearing-like observations, hence the factor of two.
        """
        s_t = self.range_sigma
        s_r = 2.0 * self.bearing_sigma
        return np.diag([s_t**2, s_t**2, s_r**2])


def default_noise() -> NoiseSpec:
    """Sonar-grade default noise: 95% bounds of 0.002 m range, 0.5 deg
    bearing, 0.05 m / 0.5 deg dead reckoning per step, 7.5 m sensing."""
    return NoiseSpec.from_95ci(
        range_error=0.002,
        bearing_error_deg=0.5,
        odom_trans_error=0.05,
        odom_rot_error_deg=0.5,
        max_sensing_range=7.5,
    )


# ---------------------------------------------------------------------------
# Scalar SE(2) operations
# ---------------------------------------------------------------------------


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Compose two poses: the pose of frame ``b`` expressed relative to ``a``
    mapped into the world frame (group operation a * b)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def se2_inverse(a: Pose2) -> Pose2:
    """Group inverse: se2_compose(a, se2_inverse(a)) is the identity."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def se2_between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose of ``b`` expressed in the frame of ``a`` (a^-1 * b)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def jacobians_between(a: Pose2, b: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`se2_between` with respect to ``a`` and ``b``.

    Returns
    -------
    (Ja, Jb)
        Two 3x3 arrays; ``Ja`` differentiates the relative pose with respect
        to the reference pose, ``Jb`` with respect to the target pose.
    """
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    ja = np.array([[-c, -s, ry], [s, -c, -rx], [0.0, 0.0, -1.0]])
    jb = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def jacobians_compose(a: Pose2, b: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`se2_compose` with respect to ``a`` and ``b``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    ja = np.array(
        [
            [1.0, 0.0, -s * b.x - c * b.y],
            [0.0, 1.0, c * b.x - s * b.y],
            [0.0, 0.0, 1.0],
        ]
    )
    jb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def observe_landmark(pose: Pose2, landmark: Point2) -> RangeBearing:
    """Predict the range-bearing observation of ``landmark`` from ``pose``.

    A landmark coincident with the pose yields a zero range and zero bearing.
    """
    dx, dy = landmark.x - pose.x, landmark.y - pose.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        return RangeBearing(0.0, 0.0)
    return RangeBearing(r, math.atan2(dy, dx) - pose.theta)


def jacobian_observe_wrt_pose(pose: Pose2, landmark: Point2) -> np.ndarray:
    """2x3 Jacobian of :func:`observe_landmark` with respect to the pose.

    Raises
    ------
    DegenerateGeometryError
        If the landmark coincides with the pose position (the observation
        model is not differentiable there).
    """
    dx, dy = landmark.x - pose.x, landmark.y - pose.y
    q = dx * dx + dy * dy
    if q < 1e-18:
        raise DegenerateGeometryError("landmark coincides with observing pose")
    r = math.sqrt(q)
    return np.array([[-dx / r, -dy / r, 0.0], [dy / q, -dx / q, -1.0]])


def jacobian_observe_wrt_point(pose: Pose2, landmark: Point2) -> np.ndarray:
    """2x2 Jacobian of :func:`observe_landmark` with respect to the landmark."""
    dx, dy = landmark.x - pose.x, landmark.y - pose.y
    q = dx * dx + dy * dy
    if q < 1e-18:
        raise DegenerateGeometryError("landmark coincides with observing pose")
    r = math.sqrt(q)
    return np.array([[dx / r, dy / r], [-dy / q, dx / q]])


def project_observation(pose: Pose2, obs: RangeBearing) -> Point2:
    """World position implied by observing ``obs`` from ``pose`` (inverse of
    :func:`observe_landmark` for a fixed pose)."""
    a = pose.theta + obs.bearing
    return Point2(pose.x + obs.range * math.cos(a), pose.y + obs.range * math.sin(a))


# ---------------------------------------------------------------------------
# Vectorized variants (stacked arrays, used by the optimizer and mapping)
# ---------------------------------------------------------------------------


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`se2_compose` on (n, 3) pose arrays."""
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] + c * b[:, 0] - s * b[:, 1]
    out[:, 1] = a[:, 1] + s * b[:, 0] + c * b[:, 1]
    out[:, 2] = wrap_angles(a[:, 2] + b[:, 2])
    return out


def between_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`se2_between` on (n, 3) pose arrays."""
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx = b[:, 0] - a[:, 0]
    dy = b[:, 1] - a[:, 1]
    out = np.empty_like(a)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = wrap_angles(b[:, 2] - a[:, 2])
    return out


def jacobians_between_arrays(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Jacobians of the between operation: two (n, 3, 3) arrays."""
    n = a.shape[0]
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx = b[:, 0] - a[:, 0]
    dy = b[:, 1] - a[:, 1]
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    ja = np.zeros((n, 3, 3))
    ja[:, 0, 0] = -c
    ja[:, 0, 1] = -s
    ja[:, 0, 2] = ry
    ja[:, 1, 0] = s
    ja[:, 1, 1] = -c
    ja[:, 1, 2] = -rx
    ja[:, 2, 2] = -1.0
    jb = np.zeros((n, 3, 3))
    jb[:, 0, 0] = c
    jb[:, 0, 1] = s
    jb[:, 1, 0] = -s
    jb[:, 1, 1] = c
    jb[:, 2, 2] = 1.0
    return ja, jb


def observe_arrays(poses: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Row-wise range-bearing prediction: (n, 3) poses x (n, 2) points ->
    (n, 2) measurements."""
    dx = points[:, 0] - poses[:, 0]
    dy = points[:, 1] - poses[:, 1]
    out = np.empty((poses.shape[0], 2))
    out[:, 0] = np.hypot(dx, dy)
    out[:, 1] = wrap_angles(np.arctan2(dy, dx) - poses[:, 2])
    return out


def jacobians_observe_arrays(poses: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise observation Jacobians: (n, 2, 3) wrt pose, (n, 2, 2) wrt point."""
    n = poses.shape[0]
    dx = points[:, 0] - poses[:, 0]
    dy = points[:, 1] - poses[:, 1]
    q = dx * dx + dy * dy
    r = np.sqrt(q)
    hp = np.zeros((n, 2, 3))
    hp[:, 0, 0] = -dx / r
    hp[:, 0, 1] = -dy / r
    hp[:, 1, 0] = dy / q
    hp[:, 1, 1] = -dx / q
    hp[:, 1, 2] = -1.0
    hl = np.zeros((n, 2, 2))
    hl[:, 0, 0] = dx / r
    hl[:, 0, 1] = dy / r
    hl[:, 1, 0] = -dy / q
    hl[:, 1, 1] = dx / q
    return hp, hl


# ---------------------------------------------------------------------------
# Covariance helpers
# ---------------------------------------------------------------------------


def validate_cov(m: np.ndarray, dim: int, name: str = "covariance") -> np.ndarray:
    """Validate a covariance matrix: shape (dim, dim), symmetric to 1e-9,
    eigenvalues >= -1e-9.  Returns a float copy."""
    a = np.asarray(m, dtype=float)
    if a.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (a + a.T))) < -1e-9:
        raise ValueError(f"{name} must be positive semidefinite")
    return a.copy()
