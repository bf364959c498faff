from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import fd, gt_window, random_quat, random_state, rel_err
from rio4d.estimator import (
    EstimatorConfig,
    Frame,
    Mode,
    SlidingWindow,
    Source,
    advance_window,
    huber,
    p2p_jacobians,
    p2p_residual,
    solve_window,
)
from rio4d.geom import Pose, Quaternion
from rio4d.lgc import Correspondence, KeypointCloud
from rio4d.preprocess import RadarScan
from rio4d.state import STATE_DIM, NavState

MODES = [m.value for m in Mode]


def perturb(states, rng, pos=0.1, deg=1.0):
    out = [states[0]]
    for s in states[1:]:
        d = np.zeros(STATE_DIM)
        u, w = rng.normal(size=3), rng.normal(size=3)
        d[0:3] = pos * u / np.linalg.norm(u)
        d[6:9] = np.deg2rad(deg) * w / np.linalg.norm(w)
        out.append(s.retract(d))
    return out


def max_errors(est, ref):
    p = max(np.linalg.norm(a.position - b.position) for a, b in zip(est, ref))
    a = max(np.rad2deg(x.rotation.angle_to(y.rotation)) for x, y in zip(est, ref))
    return p, a


class TestMode:
    @pytest.mark.parametrize("text, mode", [("full", Mode.FULL), ("WD-IMU", Mode.WD_IMU), ("p2p_imu", Mode.P2P_IMU)])
    def test_parse(self, text, mode):
        assert Mode.parse(text) is mode

    def test_unknown(self):
        with pytest.raises(ValueError):
            Mode.parse("lidar")

    def test_families(self):
        assert [m.uses_doppler for m in Mode] == [True, True, False, True]
        assert [m.weighted for m in Mode] == [False, True, False, True]
        assert [m.uses_p2p for m in Mode] == [False, False, True, True]


class TestHuber:
    def test_quadratic_inside(self):
        s = np.linspace(0, 0.01, 50)
        rho, drho = huber(s, 0.1)
        assert np.array_equal(rho, s) and np.all(drho == 1.0)

    def test_linear_growth_outside(self):
        d, eps = 0.1, 1e-6
        r = np.array([d - eps, d + eps, 2 * d, 4 * d])
        rho, _ = huber(r**2, d)
        assert rho[0] == pytest.approx((d - eps) ** 2, rel=1e-12)
        assert rho[1] == pytest.approx(2 * d * (d + eps) - d * d, rel=1e-12)
        # linear in |r|: equal increments for equal steps in |r|
        assert rho[3] - rho[2] == pytest.approx(2 * d * 2 * d, rel=1e-12)

    @given(st.floats(1e-4, 10), st.floats(0.01, 1))
    def test_derivative(self, s, delta):
        _, drho = huber(s, delta)
        h = 1e-7 * max(s, 1e-3)
        num = (huber(s + h, delta)[0] - huber(s - h, delta)[0]) / (2 * h)
        if abs(s - delta**2) > 2 * h:
            assert float(drho) == pytest.approx(float(num), rel=1e-5)

    @given(st.floats(0, 100), st.floats(0.01, 1))
    def test_continuous_and_bounded_by_quadratic(self, s, delta):
        rho, drho = huber(s, delta)
        assert 0 <= rho <= s + 1e-12
        assert 0 < drho <= 1


class TestP2P:
    def test_consistent_point(self):
        s = NavState(0.0, np.zeros(3), np.zeros(3), Quaternion.identity())
        assert np.array_equal(p2p_residual([4, 5, 6], [4, 5, 6], s, Pose()), np.zeros(3))

    def test_translation_is_linear(self):
        s = NavState(0.0, np.zeros(3), np.zeros(3), Quaternion.identity())
        moved = NavState(0.0, [1, 0, 0], np.zeros(3), Quaternion.identity())
        d = p2p_residual([4, 5, 6], [1, 2, 3], moved, Pose()) - p2p_residual([4, 5, 6], [1, 2, 3], s, Pose())
        assert np.allclose(d, [-1, 0, 0])

    def test_extrinsic_chain(self, rng):
        s = random_state(rng)
        T = Pose(random_quat(rng), rng.normal(size=3))
        p = rng.normal(size=3) * 10
        world = s.pose.apply(T.apply(p))
        assert np.allclose(p2p_residual(world, p, s, T), 0, atol=1e-12)

    def test_jacobians_against_central_differences(self, rng):
        for _ in range(100):
            s = random_state(rng)
            T = Pose(random_quat(rng), rng.normal(size=3))
            p = rng.normal(size=3) * 20
            lm = rng.normal(size=3) * 20
            Jp, Jth, Jl = p2p_jacobians(p, s, T)
            J = np.zeros((3, STATE_DIM))
            J[:, 0:3], J[:, 6:9] = Jp, Jth
            N = fd(lambda d: p2p_residual(lm, p, s.retract(d), T), STATE_DIM)
            Nl = fd(lambda d: p2p_residual(lm + d, p, s, T), 3)
            assert rel_err(J, N) < 1e-6
            assert rel_err(Jl, Nl) < 1e-6


class TestSolveWindow:
    @pytest.mark.parametrize("mode", MODES)
    def test_ground_truth_is_a_fixed_point(self, mode):
        w, states, _ = gt_window(mode)
        rep = solve_window(w)
        assert rep.final_cost < 1e-12
        assert rep.iterations == 0
        p, a = max_errors(w.states, states)
        assert p < 1e-12 and a < 1e-9

    @pytest.mark.parametrize("anchor", ["full", "pose"])
    @pytest.mark.parametrize("mode", MODES)
    def test_recovers_from_perturbation(self, mode, anchor):
        w, states, _ = gt_window(mode, anchor=anchor)
        w.states = perturb(w.states, np.random.default_rng(7))
        rep = w.solve()
        assert not rep.diverged
        p, a = max_errors(w.states, states)
        assert p < 1e-4 and a < 0.01

    def test_gauge_and_unit_norm(self):
        w, states, _ = gt_window("Full", anchor="pose")
        w.states = perturb(w.states, np.random.default_rng(1))
        first = w.states[0]
        w.solve()
        assert np.array_equal(w.states[0].position, first.position)
        assert w.states[0].rotation == first.rotation
        for s in w.states:
            assert abs(s.rotation.norm() - 1.0) < 1e-9

    def test_full_anchor_fixes_velocity_and_bias(self):
        w, states, _ = gt_window("D-IMU")
        w.states = perturb(w.states, np.random.default_rng(2))
        first = w.states[0]
        w.solve()
        assert np.array_equal(w.states[0].velocity, first.velocity)
        assert np.array_equal(w.states[0].bias.as_array(), first.bias.as_array())

    @pytest.mark.parametrize("mode", MODES)
    def test_cost_never_increases(self, mode):
        w, _, _ = gt_window(mode)
        rng = np.random.default_rng(3)
        w.states = perturb(w.states, rng, pos=0.5, deg=3.0)
        for lm in w.landmarks.values():
            lm.position = lm.position + rng.normal(size=3) * 0.2
        rep = w.solve()
        assert np.all(np.diff(rep.cost_history) <= 0)
        assert rep.final_cost <= rep.initial_cost

    def test_family_costs_follow_mode(self):
        for mode, active in [("D-IMU", {"imu", "doppler"}), ("P2P-IMU", {"imu", "p2p"})]:
            w, _, _ = gt_window(mode)
            w.states = perturb(w.states, np.random.default_rng(4))
            prob = w.problem()
            costs = prob.family_costs((w.states, prob.landmark_positions()))
            assert {k for k, v in costs.items() if v > 0} == active

    @pytest.mark.parametrize("mode", MODES)
    def test_gradient_matches_cost_differences(self, mode):
        w, _, _ = gt_window(mode, n=5)
        rng = np.random.default_rng(5)
        w.states = perturb(w.states, rng, pos=0.3, deg=2.0)
        prob = w.problem()
        x = (list(w.states), prob.landmark_positions() + rng.normal(size=prob.landmark_positions().shape) * 0.05)
        lin = prob.linearize(x)
        ns, nl = len(lin.gs), len(lin.gl)
        grad = np.concatenate([lin.gs, lin.gl]) * 2.0  # linearize returns half the gradient
        free = np.concatenate([prob.free, np.ones(nl, dtype=bool)])
        idx = np.nonzero(free)[0]
        sample = np.sort(rng.choice(idx, size=min(60, len(idx)), replace=False))

        def cost_at(step):
            full = np.zeros(ns + nl)
            full[sample] = step
            return prob.cost(prob.retract(x, full[:ns], full[ns:]))

        num = fd(cost_at, len(sample), eps=1e-6)[0]
        assert rel_err(grad[sample], num) < 1e-5

    @pytest.mark.parametrize("mode", MODES)
    def test_state_hessian_is_symmetric_psd(self, mode):
        w, _, _ = gt_window(mode, n=3)
        rng = np.random.default_rng(6)
        w.states = perturb(w.states, rng, pos=0.01, deg=0.1)
        prob = w.problem()
        x = (list(w.states), prob.landmark_positions())
        lin = prob.linearize(x)
        H = lin.Hss
        assert np.allclose(H, H.T)
        assert np.min(np.linalg.eigvalsh(H)) > -1e-6 * np.max(np.abs(H))

    def test_trivial_window(self):
        w = SlidingWindow()
        assert w.solve().termination == "trivial"


def dummy_frame(fid, n=5, keypoints=True):
    pos = np.c_[np.arange(1, n + 1) * 3.0, np.zeros(n), np.zeros(n)]
    scan = RadarScan(float(fid), pos, np.zeros(n), np.zeros(n))
    kp = KeypointCloud(scan, np.arange(n)) if keypoints else None
    return Frame(fid, float(fid), scan, np.ones((n, 1)), keypoints=kp)


def static_state(t):
    return NavState(float(t), np.zeros(3), np.zeros(3), Quaternion.identity())


class TestWindowManagement:
    def test_capacity(self):
        w, _, _ = gt_window("D-IMU", n=12, window_size=10)
        assert len(w) == 10 and len(w.frames) == 10
        assert w.frames[0].preint is None
        assert w.imu_block_count() == 9

    def test_drop_removes_one_imu_block(self):
        w, _, _ = gt_window("D-IMU", n=10, window_size=10)
        before = w.imu_block_count()
        extra, _, _ = gt_window("D-IMU", n=11, window_size=11)
        frame, state = extra.frames[-1], extra.states[-1]
        dropped = w.advance(frame, state)
        assert len(dropped) == 1 and dropped[0][1].frame_id == 0
        assert len(w) == 10
        assert w.imu_block_count() == before  # one gained with the new frame, one lost with the drop
        assert w.frames[0].preint is None

    def test_advance_window_wrapper(self):
        w = SlidingWindow(EstimatorConfig(window_size=2))
        for k in range(3):
            w = advance_window(w, dummy_frame(k), static_state(k))
        assert [f.frame_id for f in w.frames] == [1, 2]

    def test_first_frame_matches_create_landmarks(self):
        w = SlidingWindow(EstimatorConfig(mode=Mode.P2P_IMU))
        w.advance(dummy_frame(0), static_state(0))
        s1 = NavState(1.0, [1.0, 2.0, 0.0], np.zeros(3), Quaternion.from_axis_angle([0, 0, 1], 0.2))
        w.advance(dummy_frame(1), s1)
        matches = [Correspondence(i, i, 9.0, True) for i in range(3)]
        stats = w.manage_landmarks(matches, nonkey=False)
        assert stats["new"] == 3 and len(w.landmarks) == 3
        for lm in w.landmarks.values():
            row = lm.observations[0][1]
            assert lm.observations[0][0] == 0
            assert np.allclose(lm.position, w.frames[0].body_points[row])  # frame 0 sits at the origin
            assert lm.source is Source.KEYPOINT and lm.observation_count == 2

    def test_chains_give_one_block_per_observation(self):
        w = SlidingWindow(EstimatorConfig(mode=Mode.P2P_IMU))
        for k in range(4):
            w.advance(dummy_frame(k), static_state(k))
            if k:
                w.manage_landmarks([Correspondence(0, 0, 9.0, True)], nonkey=False)
        assert len(w.landmarks) == 1
        lm = next(iter(w.landmarks.values()))
        assert lm.observation_count == 4
        assert w.p2p_block_count() == 4

    def test_retired_landmarks_leave_the_problem(self):
        w = SlidingWindow(EstimatorConfig(mode=Mode.P2P_IMU, window_size=3))
        w.advance(dummy_frame(0), static_state(0))
        w.advance(dummy_frame(1), static_state(1))
        w.manage_landmarks([Correspondence(2, 2, 9.0, True)], nonkey=False)
        assert len(w.landmarks) == 1
        for k in (2, 3, 4):
            w.advance(dummy_frame(k), static_state(k))
        assert w.landmarks == {}
        assert len(w.problem().landmarks) == 0

    def test_nonkey_points_promote_after_more_than_three_matches(self):
        w = SlidingWindow(EstimatorConfig(mode=Mode.P2P_IMU, window_size=10))
        counts = []
        for k in range(6):
            f = dummy_frame(k)
            f.keypoints = KeypointCloud(f.scan, np.array([0]))  # rows 1.. are non-key
            w.advance(f, static_state(k))
            w.manage_landmarks([])
            track = [lm for lm in w.landmarks.values() if lm.observations[0] == (0, 1)]
            assert len(track) == 1
            counts.append((track[0].observation_count, track[0].source, track[0] in w.active_landmarks()))
        assert [c for c, _, _ in counts] == [1, 2, 3, 4, 5, 6]
        assert [a for _, _, a in counts] == [False, False, False, True, True, True]
        assert counts[3][1] is Source.PROMOTED_NONKEY

    def test_nonkey_radius(self):
        w = SlidingWindow(EstimatorConfig(mode=Mode.P2P_IMU, nonkey_radius=0.3))
        f0 = dummy_frame(0)
        f0.keypoints = KeypointCloud(f0.scan, np.array([0]))
        w.advance(f0, static_state(0))
        w.manage_landmarks([])
        f1 = dummy_frame(1)
        f1.keypoints = KeypointCloud(f1.scan, np.array([0]))
        w.advance(f1, NavState(1.0, [0.0, 0.5, 0.0], np.zeros(3), Quaternion.identity()))
        stats = w.manage_landmarks([])
        assert stats["nonkey_associated"] == 0 and stats["nonkey_new"] == 4
