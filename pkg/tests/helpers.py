from __future__ import annotations

import numpy as np

from rio4d.geom import Quaternion, so3_exp
from rio4d.imu_preint import gravity_vector
from rio4d.state import ImuBias, NavState

ACCEPTANCE: list[str] = []


def random_quat(rng: np.random.Generator) -> Quaternion:
    return Quaternion.from_array(rng.normal(size=4))


def random_state(rng: np.random.Generator, t: float = 0.0, bias_scale: float = 0.05) -> NavState:
    return NavState(
        t,
        rng.normal(size=3) * 5,
        rng.normal(size=3) * 2,
        random_quat(rng),
        ImuBias(rng.normal(size=3) * bias_scale, rng.normal(size=3) * bias_scale * 0.1),
    )


def fd(f, dim: int, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f(delta)`` at ``delta = 0``."""
    y0 = np.atleast_1d(f(np.zeros(dim)))
    J = np.zeros((len(y0), dim))
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = eps
        J[:, i] = (np.atleast_1d(f(d)) - np.atleast_1d(f(-d))) / (2 * eps)
    return J


def rel_err(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.max(np.abs(A - B)) / max(1.0, np.max(np.abs(B))))


def integrate_directly(state: NavState, samples, gravity=None) -> NavState:
    """Per-sample midpoint propagation in the world frame (test oracle)."""
    gravity = gravity_vector() if gravity is None else gravity
    p, v = state.position.copy(), state.velocity.copy()
    R = state.rotation.to_matrix()
    ba, bg = state.bias.accel, state.bias.gyro
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        R1 = R @ so3_exp((0.5 * (s0.angular_velocity + s1.angular_velocity) - bg) * dt)
        a = 0.5 * (R @ (s0.linear_acceleration - ba) + R1 @ (s1.linear_acceleration - ba)) - gravity
        p = p + v * dt + 0.5 * a * dt**2
        v = v + a * dt
        R = R1
    return NavState(samples[-1].timestamp, p, v, Quaternion.from_matrix(R), state.bias)


def gt_window(mode="Full", n: int = 10, t0: float = 5.0, seed: int = 0, window_size: int = 10, anchor: str = "full"):
    """Noise-free window whose states are exactly consistent with every residual.

    States are chained through noise-free pre-integration from the simulated
    truth, scans are generated from those states, and keypoint matches come
    from the simulator's landmark labels.  Returns ``(window, states, world)``.
    """
    from rio4d.doppler import compute_interval_weights, point_coefficients
    from rio4d.estimator import EstimatorConfig, Frame, Mode, SlidingWindow
    from rio4d.imu_preint import ImuBuffer, gravity_vector, preintegrate
    from rio4d.lgc import Correspondence, build_histograms, extract_keypoints
    from rio4d.preprocess import divide_cloud
    from rio4d.sim import RadarSimConfig, gen_imu, make_scenario, ring_world, scan_from_state

    sc = make_scenario("circle60")
    traj = sc.trajectory
    world = ring_world(np.random.default_rng(seed), 400)
    buf = ImuBuffer(gen_imu(traj, sc.imu, t_end=t0 + 0.1 * n + 0.5))
    cfg = RadarSimConfig(max_range=60.0)
    mode = Mode.parse(mode)
    window = SlidingWindow(EstimatorConfig(mode=mode, window_size=window_size, anchor=anchor))
    states = []
    labels_prev = None
    state = traj.state(t0)
    for k in range(n):
        t = t0 + 0.1 * k
        pre = None
        if k:
            pre = preintegrate(buf.between(t - 0.1, t), state.bias)
            nxt = pre.predict(state, gravity_vector())
            state = NavState(t, nxt.position, nxt.velocity, nxt.rotation, nxt.bias)
        omega = traj.sample(t).angular_velocity[0]
        scan, lab = scan_from_state(world, state.rotation.to_matrix(), state.position, state.velocity, omega, t, cfg)
        grid = divide_cloud(scan)
        coeff = point_coefficients(scan, grid, compute_interval_weights(grid))
        kp = build_histograms(extract_keypoints(scan, grid))
        frame = Frame(k, t, scan, coeff, preint=pre, keypoints=kp)
        matches = []
        if labels_prev is not None:
            prev_kp, prev_lab = labels_prev
            row_of = {int(prev_lab.landmark[r]): int(r) for r in prev_kp.indices}
            for r in kp.indices:
                a = row_of.get(int(lab.landmark[r]))
                if a is not None:
                    matches.append(Correspondence(a, int(r), 10.0, True))
        window.advance(frame, state)
        if mode.uses_p2p:
            window.manage_landmarks(matches)
        states.append(state)
        labels_prev = (kp, lab)
    return window, states, world
