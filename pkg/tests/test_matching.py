import numpy as np
import pytest

from degenlio.matching import (CorrespondenceSet, RejectionStrategy, RelativeMotion,
                               match_scan, point_threshold, scan_threshold)
from degenlio.so3 import Pose, exp_so3, random_rotation
from degenlio.voxel_map import VoxelSubmap


def _motion(angle_axis, t):
    return RelativeMotion(exp_so3(np.asarray(angle_axis, dtype=float)),
                          np.asarray(t, dtype=float))


class TestPointThreshold:
    def test_identity_motion_zero(self):
        m = RelativeMotion.identity()
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 3)) * 30
        assert np.allclose(point_threshold(m, pts), 0.0)

    def test_pure_translation(self):
        m = _motion([0, 0, 0], [0.12, -0.16, 0.0])
        pts = np.array([[1.0, 0, 0], [50.0, 0, 0]])
        assert np.allclose(point_threshold(m, pts), 0.2)

    def test_pure_rotation_high_precision(self):
        m = _motion([0, 0, 0.1], [0, 0, 0])
        val = point_threshold(m, np.array([10.0, 0.0, 0.0]))
        assert val == pytest.approx(2 * 10 * np.sin(0.05), abs=1e-12)
        # equals the exact displacement of a point at radius 10 perpendicular
        # to the axis
        moved = exp_so3([0, 0, 0.1]) @ np.array([10.0, 0.0, 0.0])
        assert val == pytest.approx(np.linalg.norm(moved - [10.0, 0, 0]), abs=1e-9)

    def test_monotonicity(self):
        rng = np.random.default_rng(1)
        base = _motion([0, 0, 0.05], [0.1, 0, 0])
        p = np.array([5.0, 1.0, 0.0])
        t0 = point_threshold(base, p)
        assert point_threshold(base, 2 * p) > t0
        assert point_threshold(_motion([0, 0, 0.1], [0.1, 0, 0]), p) > t0
        assert point_threshold(_motion([0, 0, 0.05], [0.2, 0, 0]), p) > t0

    def test_chord_bound_randomized(self):
        # |R p + t - p| <= threshold over random draws, never beyond 1e-9
        rng = np.random.default_rng(2)
        n = 20_000
        axes = rng.normal(size=(n, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.uniform(0, np.pi - 1e-3, n)
        trans = rng.normal(size=(n, 3))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 80, (n, 1))
        violations = 0
        for i in range(0, n, 2000):
            sl = slice(i, i + 2000)
            Rs = exp_so3(axes[sl] * angles[sl, None])
            moved = np.einsum("nij,nj->ni", Rs, pts[sl]) + trans[sl]
            disp = np.linalg.norm(moved - pts[sl], axis=1)
            bound = (np.linalg.norm(trans[sl], axis=1)
                     + 2 * np.linalg.norm(pts[sl], axis=1) * np.sin(0.5 * angles[sl]))
            violations += int(np.sum(disp > bound + 1e-9))
        assert violations == 0

    def test_chord_bound_equality_case(self):
        # p perpendicular to the axis, translation parallel to the chord
        r, theta = 12.0, 0.3
        p = np.array([r, 0.0, 0.0])
        R = exp_so3([0, 0, theta])
        chord = R @ p - p
        t = 0.37 * chord / np.linalg.norm(chord)
        disp = np.linalg.norm(R @ p + t - p)
        bound = point_threshold(RelativeMotion(R, t), p)
        assert abs(disp - bound) < 1e-9


class TestScanThreshold:
    def test_identity_zero(self):
        assert scan_threshold(RelativeMotion.identity(), 60.0) == 0.0

    def test_equals_point_threshold_at_rmax(self):
        m = _motion([0.02, 0.01, 0.05], [0.1, 0.2, 0.0])
        assert scan_threshold(m, 42.0) == pytest.approx(
            point_threshold(m, np.array([0.0, 42.0, 0.0])), abs=1e-12)

    def test_dominates_point_threshold(self):
        rng = np.random.default_rng(3)
        m = _motion([0.0, 0.0, 0.08], [0.3, 0.1, 0.0])
        r_max = 50.0
        pts = rng.normal(size=(500, 3))
        pts *= (rng.uniform(0, r_max, 500) / np.linalg.norm(pts, axis=1))[:, None]
        assert np.all(scan_threshold(m, r_max) >= point_threshold(m, pts) - 1e-12)

    def test_rejects_bad_rmax(self):
        with pytest.raises(ValueError):
            scan_threshold(RelativeMotion.identity(), 0.0)


def _populated_map(rng, n=400, extent=8.0):
    m = VoxelSubmap(voxel=0.5, max_points_per_voxel=50)
    pts = rng.uniform(-extent, extent, size=(n, 3))
    m.insert(pts)
    return m, pts


class TestMatchScan:
    def test_exact_self_match_all_strategies(self):
        rng = np.random.default_rng(4)
        m, pts = _populated_map(rng)
        for kind in ("none", "fixed", "scan_adaptive", "point_adaptive"):
            cs = match_scan(pts[:50], m, Pose.identity(), RelativeMotion.identity(),
                            RejectionStrategy(kind), r_max=20.0)
            assert cs.n_accepted == 50
            assert np.allclose(cs.distances, 0.0)

    def test_none_is_identity_filter(self):
        rng = np.random.default_rng(5)
        m, _ = _populated_map(rng)
        queries = rng.uniform(-12, 12, size=(80, 3))
        cs = match_scan(queries, m, Pose.identity(), RelativeMotion.identity(),
                        RejectionStrategy("none"))
        assert cs.n_accepted == len(queries)

    def test_adaptive_subset_of_none_and_scan(self):
        rng = np.random.default_rng(6)
        m, _ = _populated_map(rng)
        queries = rng.uniform(-12, 12, size=(200, 3))
        motion = _motion([0, 0, 0.03], [0.2, 0, 0])
        base = match_scan(queries, m, Pose.identity(), motion, RejectionStrategy("none"))
        scan_a = match_scan(queries, m, Pose.identity(), motion,
                            RejectionStrategy("scan_adaptive"), r_max=25.0)
        point_a = match_scan(queries, m, Pose.identity(), motion,
                             RejectionStrategy("point_adaptive"))
        assert np.all(base.accepted[point_a.accepted])
        assert np.all(scan_a.accepted[point_a.accepted])

    def test_empty_map_raises(self):
        with pytest.raises(ValueError):
            match_scan(np.zeros((1, 3)), VoxelSubmap(), Pose.identity(),
                       RelativeMotion.identity(), RejectionStrategy("none"))

    def test_accept_mask_reused(self):
        rng = np.random.default_rng(7)
        m, pts = _populated_map(rng)
        queries = pts[:60] + rng.normal(scale=0.01, size=(60, 3))
        motion = RelativeMotion.identity()
        first = match_scan(queries, m, Pose.identity(), motion,
                           RejectionStrategy("point_adaptive"))
        shifted = Pose(np.eye(3), np.array([0.4, 0.0, 0.0]))
        second = match_scan(queries, m, shifted, motion,
                            RejectionStrategy("point_adaptive"),
                            accept_mask=first.accepted)
        assert np.array_equal(second.accepted, first.accepted)
        assert not np.allclose(second.distances, first.distances)

    def test_noise_floor_keeps_stationary_matches(self):
        rng = np.random.default_rng(8)
        m, pts = _populated_map(rng)
        noisy = pts[:100] + rng.normal(scale=0.01, size=(100, 3))
        cs = match_scan(noisy, m, Pose.identity(), RelativeMotion.identity(),
                        RejectionStrategy("point_adaptive"), noise_floor=0.05)
        assert cs.n_accepted == 100
        strict = match_scan(noisy, m, Pose.identity(), RelativeMotion.identity(),
                            RejectionStrategy("point_adaptive"), noise_floor=0.0)
        assert strict.n_accepted < 100

    def test_scan_adaptive_requires_rmax(self):
        rng = np.random.default_rng(9)
        m, _ = _populated_map(rng)
        with pytest.raises(ValueError):
            match_scan(np.zeros((1, 3)), m, Pose.identity(),
                       RelativeMotion.identity(), RejectionStrategy("scan_adaptive"))

    def test_normals_attached_on_planar_targets(self):
        rng = np.random.default_rng(10)
        plane = np.column_stack([rng.uniform(-4, 4, 600), rng.uniform(-4, 4, 600),
                                 np.zeros(600)])
        m = VoxelSubmap(voxel=0.5, max_points_per_voxel=50)
        m.insert(plane)
        queries = plane[:40] + rng.normal(scale=0.005, size=(40, 3))
        cs = match_scan(queries, m, Pose.identity(), RelativeMotion.identity(),
                        RejectionStrategy("point_adaptive"))
        assert np.count_nonzero(cs.has_normal) > 30
        nz = cs.normals[cs.has_normal][:, 2]
        assert np.all(np.abs(np.abs(nz) - 1.0) < 1e-3)


def test_strategy_validation():
    with pytest.raises(ValueError):
        RejectionStrategy("qcar")
    with pytest.raises(ValueError):
        RejectionStrategy("fixed", tau=0.0)
