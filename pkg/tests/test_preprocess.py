from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import random_quat
from rio4d.geom import Pose, Quaternion
from rio4d.preprocess import (
    GridConfig,
    RadarPoint,
    RadarScan,
    ZeroRangePoint,
    divide_cloud,
    doppler_error,
    doppler_errors,
    filter_dynamic,
    remove_outliers,
    static_mask,
)
from rio4d.sim import CLUTTER, RadarSimConfig, gen_radar_scan, make_scenario, ring_world

I3 = np.eye(3)


def scan_of(points, doppler=None, rcs=None, t=0.0) -> RadarScan:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(p)
    return RadarScan(t, p, np.zeros(n) if doppler is None else doppler, np.zeros(n) if rcs is None else rcs)


def random_scan(rng, n=200, t=0.0) -> RadarScan:
    az = rng.uniform(-1, 1, n)
    el = rng.uniform(-0.25, 0.25, n)
    r = rng.uniform(2, 60, n)
    pos = np.c_[r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)]
    return RadarScan(t, pos, rng.normal(size=n), rng.uniform(0, 40, n))


class TestTypes:
    def test_zero_range_point_rejected(self):
        with pytest.raises(ZeroRangePoint):
            RadarPoint([0, 0, 0], 0.0, 0.0)

    def test_point_angles(self):
        p = RadarPoint([1.0, 1.0, np.sqrt(2.0)], 0.0, 0.0)
        assert p.azimuth == pytest.approx(np.pi / 4, abs=1e-12)
        assert p.elevation == pytest.approx(np.pi / 4, abs=1e-12)

    def test_scan_angles_match_points(self, rng):
        s = random_scan(rng)
        for i in range(0, len(s), 17):
            assert s.azimuth[i] == pytest.approx(s.point(i).azimuth, abs=1e-12)
            assert s.elevation[i] == pytest.approx(s.point(i).elevation, abs=1e-12)

    def test_scan_is_read_only(self, rng):
        s = random_scan(rng)
        with pytest.raises(ValueError):
            s.positions[0, 0] = 1.0

    def test_subset_keeps_original_ids(self, rng):
        s = random_scan(rng, 20)
        sub = s.subset(np.arange(20) % 3 == 0).subset([1, 2])
        assert list(sub.ids) == [3, 6]

    def test_from_points_round_trip(self, rng):
        s = random_scan(rng, 5)
        again = RadarScan.from_points(s.timestamp, [s.point(i) for i in range(5)])
        assert np.array_equal(again.positions, s.positions)
        assert len(RadarScan.from_points(0.0, [])) == 0


class TestOutliers:
    def test_identity_transform_keeps_everything(self, rng):
        s = random_scan(rng)
        out = remove_outliers(s, s, Pose(), 0.5)
        assert out.keep.all() and not out.skipped
        assert np.array_equal(out.scan.positions, s.positions)

    def test_isolated_point_removed(self):
        prev = scan_of([[10, 0, 0], [20, 5, 1]])
        cur = scan_of([[10.1, 0, 0], [20, 5, 11]])
        out = remove_outliers(cur, prev, Pose(), 0.5)
        assert list(out.keep) == [True, False]

    def test_boundary_distance_is_kept(self):
        out = remove_outliers(scan_of([[10.5, 0, 0]]), scan_of([[10, 0, 0]]), Pose(), 0.5)
        assert out.keep.all()

    def test_empty_previous_passes_through(self, rng):
        s = random_scan(rng, 10)
        out = remove_outliers(s, RadarScan.empty(0.0), Pose(), 0.5)
        assert out.skipped and out.keep.all()
        assert remove_outliers(s, None, Pose(), 0.5).skipped

    def test_transform_direction(self, rng):
        prev = random_scan(rng)
        T = Pose(Quaternion.from_axis_angle([0, 0, 1], 0.1), [1.0, -0.5, 0.2])
        cur = scan_of(T.apply(prev.positions))
        assert remove_outliers(cur, prev, T, 0.05).keep.all()
        assert remove_outliers(cur, prev, T.inverse(), 0.05).keep.mean() < 0.5

    def test_simulated_clutter_is_removed(self):
        sc = make_scenario("circle60")
        world = ring_world(np.random.default_rng(3), 500)
        cfg = RadarSimConfig(max_range=60.0, clutter_fraction=0.05)
        traj = sc.trajectory
        clutter_removed, true_kept = [], []
        for t in (5.0, 12.0, 30.0, 45.0):
            prev, _ = gen_radar_scan(world, traj, t - 0.1, cfg, frame=0)
            cur, lab = gen_radar_scan(world, traj, t, cfg, frame=1)
            T = traj.pose(t).inverse() @ traj.pose(t - 0.1)
            keep = remove_outliers(cur, prev, T, 0.5).keep
            clutter = lab.kind == CLUTTER
            clutter_removed.append(np.mean(~keep[clutter]))
            true_kept.append(np.mean(keep[~clutter]))
        assert np.mean(clutter_removed) >= 0.95
        assert np.mean(true_kept) >= 0.95


class TestDopplerError:
    def test_stationary_platform(self):
        assert doppler_error(RadarPoint([3, 4, 0], 0.0, 1.0), I3, I3, np.zeros(3)) == 0.0

    def test_exact_cancellation(self):
        assert doppler_error(RadarPoint([10, 0, 0], -1.0, 0.0), I3, I3, [1, 0, 0]) == 0.0

    def test_oncoming_mover(self):
        assert doppler_error(RadarPoint([10, 0, 0], 1.0, 0.0), I3, I3, [1, 0, 0]) == pytest.approx(2.0)

    def test_zero_range(self):
        p = RadarPoint.__new__(RadarPoint)
        object.__setattr__(p, "position", np.zeros(3))
        object.__setattr__(p, "doppler", 0.0)
        with pytest.raises(ZeroRangePoint):
            doppler_error(p, I3, I3, np.zeros(3))

    @given(st.floats(0.01, 100), st.integers(0, 2**31 - 1))
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        pos = rng.normal(size=3) + [5, 0, 0]
        R1, R2 = random_quat(rng), random_quat(rng)
        v = rng.normal(size=3)
        a = doppler_error(RadarPoint(pos, 0.3, 0), R1, R2, v)
        b = doppler_error(RadarPoint(pos * scale, 0.3, 0), R1, R2, v)
        assert a == pytest.approx(b, abs=1e-12)

    def test_batch_matches_scalar(self, rng):
        s = random_scan(rng, 30)
        R1, R2 = random_quat(rng), random_quat(rng)
        v = rng.normal(size=3)
        batch = doppler_errors(s, R1.to_matrix(), R2.to_matrix(), v)
        single = [doppler_error(s.point(i), R1, R2, v) for i in range(30)]
        assert np.allclose(batch, single, atol=1e-12)


class TestFilterDynamic:
    def test_noise_free_static_scene(self):
        sc = make_scenario("circle60")
        world = ring_world(np.random.default_rng(0), 500)
        for t in (2.0, 10.0, 40.0):
            scan, _ = gen_radar_scan(world, sc.trajectory, t, RadarSimConfig(max_range=60.0))
            st_ = sc.trajectory.state(t)
            static, dynamic = filter_dynamic(scan, I3, st_.rotation.conjugate(), st_.velocity)
            assert len(dynamic) == 0 and len(static) == len(scan)

    def test_boundary_inside_is_retained(self):
        # v = [-3.51, 0, 0] against doppler 3.9: error -3.51 + 3.9 = 0.39, ratio 0.1
        scan = scan_of([[10, 0, 0]], doppler=np.array([3.9]))
        static, dynamic = filter_dynamic(scan, I3, I3, [-3.51, 0, 0], v_thr=0.4, p_thr=0.25)
        assert len(static) == 1 and len(dynamic) == 0

    def test_each_test_can_reject(self):
        # |err| 0.5 > v_thr with a small ratio
        a = scan_of([[10, 0, 0]], doppler=np.array([10.0]))
        assert not static_mask(a, I3, I3, [-9.5, 0, 0]).any()
        # |err| 0.2 < v_thr but ratio 0.2 / 0.5 = 0.4 > p_thr
        b = scan_of([[10, 0, 0]], doppler=np.array([0.5]))
        assert not static_mask(b, I3, I3, [-0.3, 0, 0]).any()

    def test_zero_doppler_convention(self):
        s = scan_of([[10, 0, 0]], doppler=np.array([0.0]))
        assert static_mask(s, I3, I3, [0.3, 0, 0]).all()
        assert not static_mask(s, I3, I3, [0.5, 0, 0]).any()

    def test_doppler_floor_skips_ratio(self):
        s = scan_of([[10, 0, 0]], doppler=np.array([0.1]))
        assert not static_mask(s, I3, I3, [0.05, 0, 0]).any()
        assert static_mask(s, I3, I3, [0.05, 0, 0], doppler_floor=0.2).all()

    def test_mover_removed(self):
        sc = make_scenario("circle60")
        t = 10.0
        st_ = sc.trajectory.state(t)
        world = ring_world(np.random.default_rng(1), 300)
        heading = st_.rotation.to_matrix()[:, 0]
        mover = st_.position + heading * 20
        world = world.with_movers(mover[None] - 2.0 * heading * t, -2.0 * heading[None], [10.0])
        scan, lab = gen_radar_scan(world, sc.trajectory, t, RadarSimConfig(max_range=60.0))
        m = static_mask(scan, I3, st_.rotation.conjugate(), st_.velocity)
        assert not m[lab.kind == 1].any()
        assert m[lab.kind == 0].all()

    def test_bad_thresholds(self, rng):
        with pytest.raises(ValueError):
            static_mask(random_scan(rng), I3, I3, np.zeros(3), v_thr=0.0)

    @settings(max_examples=30)
    @given(st.integers(0, 2**31 - 1))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        s = random_scan(rng, 100)
        R1, R2 = random_quat(rng), random_quat(rng)
        v = rng.normal(size=3)
        static, _ = filter_dynamic(s, R1, R2, v)
        again, dropped = filter_dynamic(static, R1, R2, v)
        assert len(dropped) == 0 and np.array_equal(again.ids, static.ids)


class TestDivideCloud:
    def cfg(self, **kw):
        base = dict(theta_start=-60, theta_res=1, s=120, phi_start=-15, phi_res=3, t=10)
        base.update(kw)
        return GridConfig.from_degrees(*base.values())

    def point_at(self, az_deg, el_deg=0.0, r=10.0):
        a, e = np.deg2rad(az_deg), np.deg2rad(el_deg)
        return [r * np.cos(e) * np.cos(a), r * np.cos(e) * np.sin(a), r * np.sin(e)]

    def test_first_interval(self):
        g = divide_cloud(scan_of([self.point_at(-59.5)]), self.cfg())
        assert g.azimuth_idx[0] == 0

    @pytest.mark.parametrize("k", [0, 1, 17, 60, 119])
    def test_lower_edge_is_inclusive(self, k):
        g = divide_cloud(scan_of([self.point_at(-60 + k)]), self.cfg())
        assert g.azimuth_idx[0] == k
        assert not g.out_of_fov[0]

    def test_out_of_view_clamped_and_flagged(self):
        g = divide_cloud(scan_of([self.point_at(75), self.point_at(-80), self.point_at(0, 40)]), self.cfg())
        assert list(g.azimuth_idx[:2]) == [119, 0]
        assert g.elevation_idx[2] == 9
        assert g.out_of_fov.all()

    def test_partition_of_random_points(self, rng):
        s = random_scan(rng, 1000)
        g = divide_cloud(s)
        assert g.azimuth_counts.sum() == g.elevation_counts.sum() == 1000
        assert np.array_equal(np.bincount(g.azimuth_idx, minlength=30), g.azimuth_counts)
        edges = np.deg2rad(-60 + 4 * g.azimuth_idx)
        assert np.all((s.azimuth >= edges - 1e-12) & (s.azimuth < edges + np.deg2rad(4)))

    def test_empty_scan(self):
        g = divide_cloud(RadarScan.empty(0.0))
        assert g.n_points == 0 and g.azimuth_counts.sum() == 0

    @given(arrays(float, (20, 2), elements=st.floats(-0.99, 0.99)))
    def test_deterministic(self, angles):
        az, el = angles[:, 0] * np.pi / 3, angles[:, 1] * np.pi / 12
        pos = np.c_[np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)] * 10
        a = divide_cloud(scan_of(pos))
        b = divide_cloud(scan_of(pos))
        assert np.array_equal(a.cell_idx, b.cell_idx)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            GridConfig(s=0)
        with pytest.raises(ValueError):
            GridConfig(theta_res=0.0)
