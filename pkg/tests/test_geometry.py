"""Geometry layer: Jacobians against finite differences, group laws, and
the scalar/vectorized implementations against each other."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emexplore.geometry import (
    CI95_FACTOR,
    DegenerateGeometryError,
    NoiseSpec,
    Point2,
    Pose2,
    RangeBearing,
    between_arrays,
    compose_arrays,
    default_noise,
    jacobian_observe_wrt_point,
    jacobian_observe_wrt_pose,
    jacobians_between,
    jacobians_between_arrays,
    jacobians_compose,
    jacobians_observe_arrays,
    observe_arrays,
    observe_landmark,
    project_observation,
    se2_between,
    se2_compose,
    se2_inverse,
    validate_cov,
    wrap_angle,
    wrap_angles,
)
from oracles import fd_jacobian, wrap

N_INSTANCES = 100
FD_RTOL = 1e-5

angles = st.floats(-3.0, 3.0)
coords = st.floats(-50.0, 50.0)
poses = st.builds(Pose2, coords, coords, angles)


def random_pose(rng):
    # keep headings away from the +-pi seam so finite differences of the
    # wrapped residual stay smooth
    return Pose2(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-2.8, 2.8))


def rel_err(got, want):
    denom = max(1.0, float(np.max(np.abs(want))))
    return float(np.max(np.abs(got - want))) / denom


class TestWrap:
    def test_wrap_angle_range_and_idempotence(self):
        for t in np.linspace(-25.0, 25.0, 301):
            w = wrap_angle(float(t))
            assert -math.pi < w <= math.pi
            assert wrap_angle(w) == pytest.approx(w, abs=1e-15)
            assert math.cos(w) == pytest.approx(math.cos(t), abs=1e-12)
            assert math.sin(w) == pytest.approx(math.sin(t), abs=1e-12)

    def test_wrap_angles_matches_scalar(self):
        t = np.linspace(-25.0, 25.0, 301)
        vec = wrap_angles(t)
        scalar = np.array([wrap_angle(float(v)) for v in t])
        np.testing.assert_allclose(vec, scalar, atol=1e-12)

    def test_wrap_closed_end(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)


class TestGroupOps:
    def test_between_frozen_value(self):
        # by hand: rotate the offset (1, 1) into a's frame at heading pi/2
        a = Pose2(1.0, 2.0, math.pi / 2)
        b = Pose2(2.0, 3.0, math.pi)
        rel = se2_between(a, b)
        assert rel.x == pytest.approx(1.0, abs=1e-12)
        assert rel.y == pytest.approx(-1.0, abs=1e-12)
        assert rel.theta == pytest.approx(math.pi / 2, abs=1e-12)

    def test_compose_frozen_value(self):
        a = Pose2(1.0, 1.0, math.pi / 2)
        b = Pose2(2.0, 0.0, -math.pi / 4)
        c = se2_compose(a, b)
        assert c.x == pytest.approx(1.0, abs=1e-12)
        assert c.y == pytest.approx(3.0, abs=1e-12)
        assert c.theta == pytest.approx(math.pi / 4, abs=1e-12)

    @given(poses)
    def test_inverse_annihilates(self, a):
        e = se2_compose(a, se2_inverse(a))
        assert abs(e.x) < 1e-9 and abs(e.y) < 1e-9 and abs(wrap(e.theta)) < 1e-9

    @given(poses, poses)
    def test_between_inverts_compose(self, a, b):
        rel = se2_between(a, se2_compose(a, b))
        assert rel.x == pytest.approx(b.x, abs=1e-8)
        assert rel.y == pytest.approx(b.y, abs=1e-8)
        assert abs(wrap(rel.theta - b.theta)) < 1e-9

    @given(poses, poses, poses)
    @settings(max_examples=50)
    def test_compose_associative(self, a, b, c):
        left = se2_compose(se2_compose(a, b), c)
        right = se2_compose(a, se2_compose(b, c))
        assert left.x == pytest.approx(right.x, abs=1e-8)
        assert left.y == pytest.approx(right.y, abs=1e-8)
        assert abs(wrap(left.theta - right.theta)) < 1e-9

    def test_observe_frozen_345(self):
        obs = observe_landmark(Pose2(0.0, 0.0, 0.0), Point2(3.0, 4.0))
        assert obs.range == pytest.approx(5.0, abs=1e-12)
        assert obs.bearing == pytest.approx(math.atan2(4.0, 3.0), abs=1e-12)

    @given(poses, st.floats(0.1, 30.0), angles)
    def test_project_inverts_observe(self, pose, r, b):
        lm = project_observation(pose, RangeBearing(r, b))
        obs = observe_landmark(pose, lm)
        assert obs.range == pytest.approx(r, rel=1e-9)
        assert abs(wrap(obs.bearing - wrap_angle(b))) < 1e-9


class TestJacobiansAgainstFiniteDifferences:
    """Every analytic Jacobian against a central-difference oracle on 100
    seeded random instances."""

    def test_between(self, rng):
        for _ in range(N_INSTANCES):
            a, b = random_pose(rng), random_pose(rng)
            ja, jb = jacobians_between(a, b)

            def f_a(x):
                r = se2_between(Pose2(*x), b)
                return np.array([r.x, r.y, r.theta])

            def f_b(x):
                r = se2_between(a, Pose2(*x))
                return np.array([r.x, r.y, r.theta])

            assert rel_err(ja, fd_jacobian(f_a, a.as_array())) < FD_RTOL
            assert rel_err(jb, fd_jacobian(f_b, b.as_array())) < FD_RTOL

    def test_compose(self, rng):
        for _ in range(N_INSTANCES):
            a, b = random_pose(rng), random_pose(rng)
            ja, jb = jacobians_compose(a, b)

            def f_a(x):
                r = se2_compose(Pose2(*x), b)
                return np.array([r.x, r.y, r.theta])

            def f_b(x):
                r = se2_compose(a, Pose2(*x))
                return np.array([r.x, r.y, r.theta])

            assert rel_err(ja, fd_jacobian(f_a, a.as_array())) < FD_RTOL
            assert rel_err(jb, fd_jacobian(f_b, b.as_array())) < FD_RTOL

    def test_observe(self, rng):
        checked = 0
        while checked < N_INSTANCES:
            pose = random_pose(rng)
            lm = Point2(rng.uniform(-20, 20), rng.uniform(-20, 20))
            if math.hypot(lm.x - pose.x, lm.y - pose.y) < 0.5:
                continue
            checked += 1
            hp = jacobian_observe_wrt_pose(pose, lm)
            hl = jacobian_observe_wrt_point(pose, lm)

            def f_p(x):
                o = observe_landmark(Pose2(*x), lm)
                return np.array([o.range, o.bearing])

            def f_l(x):
                o = observe_landmark(pose, Point2(*x))
                return np.array([o.range, o.bearing])

            assert rel_err(hp, fd_jacobian(f_p, pose.as_array())) < FD_RTOL
            assert rel_err(hl, fd_jacobian(f_l, np.array([lm.x, lm.y]))) < FD_RTOL

    def test_observe_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            jacobian_observe_wrt_pose(Pose2(1.0, 2.0, 0.3), Point2(1.0, 2.0))
        with pytest.raises(DegenerateGeometryError):
            jacobian_observe_wrt_point(Pose2(1.0, 2.0, 0.3), Point2(1.0, 2.0))


class TestVectorizedAgreesWithScalar:
    def test_all_families(self, rng):
        n = 64
        a = np.column_stack(
            [rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(-3, 3, n)]
        )
        b = np.column_stack(
            [rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(-3, 3, n)]
        )
        pts = np.column_stack([rng.uniform(-20, 20, n), rng.uniform(-20, 20, n)])

        comp = compose_arrays(a, b)
        betw = between_arrays(a, b)
        obs = observe_arrays(a, pts)
        ja_v, jb_v = jacobians_between_arrays(a, b)
        hp_v, hl_v = jacobians_observe_arrays(a, pts)
        for i in range(n):
            pa, pb = Pose2(*a[i]), Pose2(*b[i])
            c = se2_compose(pa, pb)
            np.testing.assert_allclose(comp[i], [c.x, c.y, c.theta], atol=1e-12)
            r = se2_between(pa, pb)
            np.testing.assert_allclose(betw[i], [r.x, r.y, r.theta], atol=1e-12)
            o = observe_landmark(pa, Point2(*pts[i]))
            assert obs[i, 0] == pytest.approx(o.range, abs=1e-12)
            assert abs(wrap(obs[i, 1] - o.bearing)) < 1e-12
            ja, jb = jacobians_between(pa, pb)
            np.testing.assert_allclose(ja_v[i], ja, atol=1e-12)
            np.testing.assert_allclose(jb_v[i], jb, atol=1e-12)
            np.testing.assert_allclose(hp_v[i], jacobian_observe_wrt_pose(pa, Point2(*pts[i])), atol=1e-12)
            np.testing.assert_allclose(hl_v[i], jacobian_observe_wrt_point(pa, Point2(*pts[i])), atol=1e-12)


class TestNoiseSpec:
    def test_ci95_conversion(self):
        spec = NoiseSpec.from_95ci(
            range_error=0.002,
            bearing_error_deg=0.5,
            odom_trans_error=0.05,
            odom_rot_error_deg=0.5,
            max_sensing_range=7.5,
        )
        assert spec.range_sigma == pytest.approx(0.002 / CI95_FACTOR)
        assert spec.bearing_sigma == pytest.approx(math.radians(0.5) / CI95_FACTOR)
        assert spec.odom_trans_sigma == pytest.approx(0.05 / CI95_FACTOR)
        assert spec.odom_rot_sigma == pytest.approx(math.radians(0.5) / CI95_FACTOR)
        assert spec.max_sensing_range == 7.5
        assert default_noise() == spec

    def test_cov_builders(self):
        spec = default_noise()
        rb = spec.range_bearing_cov()
        np.testing.assert_allclose(rb, np.diag([spec.range_sigma**2, spec.bearing_sigma**2]))
        od = spec.odometry_step_cov()
        np.testing.assert_allclose(
            od, np.diag([spec.odom_trans_sigma**2] * 2 + [spec.odom_rot_sigma**2])
        )
        rv = spec.rendezvous_cov()
        assert rv[2, 2] == pytest.approx((2.0 * spec.bearing_sigma) ** 2)

    def test_scaled(self):
        spec = default_noise().scaled(0.01)
        assert spec.range_sigma == pytest.approx(default_noise().range_sigma * 0.01)
        assert spec.max_sensing_range == 7.5

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(-1.0, 0.1, 0.1, 0.1, 5.0)


class TestValidateCov:
    def test_accepts_and_copies(self):
        m = np.eye(3) * 2.0
        out = validate_cov(m, 3)
        out[0, 0] = 99.0
        assert m[0, 0] == 2.0

    def test_rejects_asymmetric(self):
        m = np.array([[1.0, 0.5], [0.4, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            validate_cov(m, 2)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="semidefinite"):
            validate_cov(np.diag([1.0, -1.0]), 2)

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError, match="2x2"):
            validate_cov(np.eye(3), 2)


def test_pose_wraps_on_construction():
    p = Pose2(0.0, 0.0, 3.0 * math.pi)
    assert p.theta == pytest.approx(math.pi)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        Pose2(math.nan, 0.0, 0.0)
    with pytest.raises(ValueError):
        Point2(math.inf, 0.0)
    with pytest.raises(ValueError):
        RangeBearing(-1.0, 0.0)
