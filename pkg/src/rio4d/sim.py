"""Synthetic scenarios: RCS-tagged landmark worlds, analytic trajectories, IMU
streams and Doppler radar scans with per-point ground-truth labels.

Trajectories start with a static hold, then ease into motion through a time
warp whose first and second derivatives vanish at the start, so position,
velocity, acceleration and angular rate are all analytic and continuous.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .geom import GRAVITY, Pose, Quaternion
from .imu_preint import ImuNoise, ImuSample
from .preprocess import RadarScan
from .state import ImuBias, NavState

STATIC, DYNAMIC, CLUTTER = 0, 1, 2
KIND_NAMES = {STATIC: "static", DYNAMIC: "dynamic", CLUTTER: "clutter"}


# -- trajectories ------------------------------------------------------------


class PathSample(NamedTuple):
    """Derivatives are with respect to the path parameter, not time."""

    pos: np.ndarray
    dpos: np.ndarray
    ddpos: np.ndarray
    euler: np.ndarray  # roll, pitch, yaw (ZYX)
    deuler: np.ndarray


class TrajSample(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    rotation: np.ndarray  # (N, 3, 3) body-to-world
    angular_velocity: np.ndarray  # body frame


def _sin(amp, freq, tau, phase=0.0):
    w = 2 * np.pi * freq
    arg = w * tau + phase
    return amp * np.sin(arg), amp * w * np.cos(arg), -amp * w * w * np.sin(arg)


def circle_path(
    radius: float = 15.0,
    period: float = 57.5,
    center=(0.0, 0.0, 0.0),
    z_amp: float = 0.5,
    z_freq: float = 0.1,
    roll_amp: float = 0.03,
    roll_freq: float = 0.23,
    pitch_amp: float = 0.04,
    pitch_freq: float = 0.17,
) -> Callable[[np.ndarray], PathSample]:
    c = np.asarray(center, dtype=float)
    w = 2 * np.pi / period

    def path(tau: np.ndarray) -> PathSample:
        ang = w * tau
        z, dz, ddz = _sin(z_amp, z_freq, tau)
        pos = np.column_stack([c[0] + radius * np.cos(ang), c[1] + radius * np.sin(ang), c[2] + z])
        dpos = np.column_stack([-radius * w * np.sin(ang), radius * w * np.cos(ang), dz])
        ddpos = np.column_stack([-radius * w * w * np.cos(ang), -radius * w * w * np.sin(ang), ddz])
        r, dr, _ = _sin(roll_amp, roll_freq, tau, 0.3)
        p, dp, _ = _sin(pitch_amp, pitch_freq, tau, 1.1)
        yaw = ang + np.pi / 2
        euler = np.column_stack([r, p, yaw])
        deuler = np.column_stack([dr, dp, np.full_like(tau, w)])
        return PathSample(pos, dpos, ddpos, euler, deuler)

    return path


def wiggle_path(
    speed: float = 1.5,
    y_amp: float = 0.8,
    y_freq: float = 0.15,
    z_amp: float = 0.3,
    z_freq: float = 0.2,
    yaw_amp: float = 0.06,
    yaw_freq: float = 0.1,
    roll_amp: float = 0.03,
    roll_freq: float = 0.3,
    pitch_amp: float = 0.03,
    pitch_freq: float = 0.25,
) -> Callable[[np.ndarray], PathSample]:
    """Mostly straight run along +x with lateral/vertical sway."""

    def path(tau: np.ndarray) -> PathSample:
        y, dy, ddy = _sin(y_amp, y_freq, tau)
        z, dz, ddz = _sin(z_amp, z_freq, tau)
        pos = np.column_stack([speed * tau, y, z])
        dpos = np.column_stack([np.full_like(tau, speed), dy, dz])
        ddpos = np.column_stack([np.zeros_like(tau), ddy, ddz])
        r, dr, _ = _sin(roll_amp, roll_freq, tau, 0.5)
        p, dp, _ = _sin(pitch_amp, pitch_freq, tau, 0.9)
        yw, dyw, _ = _sin(yaw_amp, yaw_freq, tau, 0.2)
        return PathSample(pos, dpos, ddpos, np.column_stack([r, p, yw]), np.column_stack([dr, dp, dyw]))

    return path


def time_warp(t: np.ndarray, hold: float, ramp: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Path parameter tau(t) and its first two time derivatives.

    tau is 0 during the hold, then its rate follows a smoothstep up to 1.
    """
    t = np.asarray(t, dtype=float)
    s = t - hold
    tau = np.zeros_like(s)
    d1 = np.zeros_like(s)
    d2 = np.zeros_like(s)
    if ramp <= 0:
        m = s > 0
        tau[m], d1[m] = s[m], 1.0
        return tau, d1, d2
    u = np.clip(s / ramp, 0.0, 1.0)
    in_ramp = (s > 0) & (s < ramp)
    tau[in_ramp] = ramp * (u[in_ramp] ** 3 - 0.5 * u[in_ramp] ** 4)
    d1[in_ramp] = 3 * u[in_ramp] ** 2 - 2 * u[in_ramp] ** 3
    d2[in_ramp] = (6 * u[in_ramp] - 6 * u[in_ramp] ** 2) / ramp
    after = s >= ramp
    tau[after] = 0.5 * ramp + (s[after] - ramp)
    d1[after] = 1.0
    return tau, d1, d2


def euler_to_matrix(e: np.ndarray) -> np.ndarray:
    r, p, y = e[:, 0], e[:, 1], e[:, 2]
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    R = np.empty((len(e), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


def euler_rates_to_body(e: np.ndarray, de: np.ndarray) -> np.ndarray:
    r, p = e[:, 0], e[:, 1]
    dr, dp, dy = de[:, 0], de[:, 1], de[:, 2]
    return np.column_stack(
        [
            dr - dy * np.sin(p),
            dp * np.cos(r) + dy * np.sin(r) * np.cos(p),
            -dp * np.sin(r) + dy * np.cos(r) * np.cos(p),
        ]
    )


@dataclass(frozen=True)
class SimTrajectory:
    path: Callable[[np.ndarray], PathSample]
    hold: float = 1.0
    ramp: float = 3.0
    duration: float = 60.0

    def sample(self, t) -> TrajSample:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tau, d1, d2 = time_warp(t, self.hold, self.ramp)
        ps = self.path(tau)
        vel = ps.dpos * d1[:, None]
        acc = ps.ddpos * (d1**2)[:, None] + ps.dpos * d2[:, None]
        R = euler_to_matrix(ps.euler)
        omega = euler_rates_to_body(ps.euler, ps.deuler * d1[:, None])
        return TrajSample(ps.pos, vel, acc, R, omega)

    def state(self, t: float, bias: ImuBias | None = None) -> NavState:
        s = self.sample(t)
        return NavState(float(t), s.position[0], s.velocity[0], Quaternion.from_matrix(s.rotation[0]), bias or ImuBias())

    def pose(self, t: float) -> Pose:
        s = self.sample(t)
        return Pose(Quaternion.from_matrix(s.rotation[0]), s.position[0])


# -- world -------------------------------------------------------------------


@dataclass(frozen=True)
class SimWorld:
    positions: np.ndarray  # (M, 3) at t = 0
    rcs: np.ndarray
    velocities: np.ndarray  # zero rows for static landmarks
    seed: int = 0

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def is_static(self) -> np.ndarray:
        return ~np.any(self.velocities != 0.0, axis=1)

    def positions_at(self, t: float) -> np.ndarray:
        return self.positions + self.velocities * t

    def with_movers(self, positions, velocities, rcs) -> SimWorld:
        return SimWorld(
            np.vstack([self.positions, positions]),
            np.concatenate([self.rcs, rcs]),
            np.vstack([self.velocities, velocities]),
            self.seed,
        )


def ring_world(
    rng: np.random.Generator,
    n: int = 500,
    center=(0.0, 0.0),
    r_in: float = 4.0,
    r_out: float = 45.0,
    z_range=(-2.0, 5.0),
    rcs_range=(0.0, 40.0),
    seed: int = 0,
) -> SimWorld:
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = np.sqrt(rng.uniform(r_in**2, r_out**2, n))
    pos = np.column_stack(
        [center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang), rng.uniform(*z_range, n)]
    )
    return SimWorld(pos, rng.uniform(*rcs_range, n), np.zeros((n, 3)), seed)


def aniso_world(
    rng: np.random.Generator,
    n_cluster: int = 450,
    n_sparse: int = 50,
    cluster_azimuth_deg: float = 2.0,
    cluster_range=(70.0, 95.0),
    cluster_width: float = 1.2,
    cluster_z=(-1.0, 4.0),
    sparse_x=(3.0, 60.0),
    sparse_y=(-35.0, 35.0),
    z_range=(-2.0, 4.0),
    rcs_range=(0.0, 40.0),
    seed: int = 0,
) -> SimWorld:
    """Dense far cluster inside one azimuth interval plus a sparse spread."""
    a = np.deg2rad(cluster_azimuth_deg)
    d = rng.uniform(*cluster_range, n_cluster)
    lateral = rng.uniform(-0.5, 0.5, n_cluster) * cluster_width
    cluster = np.column_stack(
        [d * np.cos(a) - lateral * np.sin(a), d * np.sin(a) + lateral * np.cos(a), rng.uniform(*cluster_z, n_cluster)]
    )
    sparse = np.column_stack(
        [rng.uniform(*sparse_x, n_sparse), rng.uniform(*sparse_y, n_sparse), rng.uniform(*z_range, n_sparse)]
    )
    pos = np.vstack([cluster, sparse])
    n = len(pos)
    return SimWorld(pos, rng.uniform(*rcs_range, n), np.zeros((n, 3)), seed)


# -- sensors -----------------------------------------------------------------


@dataclass(frozen=True)
class ImuSimConfig:
    rate: float = 200.0
    noise: ImuNoise = field(default_factory=ImuNoise)
    noisy: bool = False
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    bias_random_walk: bool = False
    gravity: float = GRAVITY


def gen_imu(traj: SimTrajectory, config: ImuSimConfig | None = None, seed: int = 0,
            t_end: float | None = None) -> list[ImuSample]:
    """Body-frame gyro and specific force ``R^T (a - g_true)``, ``g_true = [0, 0, -g]``."""
    cfg = config or ImuSimConfig()
    if cfg.rate <= 0:
        raise ValueError("IMU rate must be positive")
    t_end = traj.duration if t_end is None else t_end
    n = int(np.floor(t_end * cfg.rate + 1e-9)) + 1
    t = np.arange(n) / cfg.rate
    s = traj.sample(t)
    g_true = np.array([0.0, 0.0, -cfg.gravity])
    acc = np.einsum("nji,nj->ni", s.rotation, s.acceleration - g_true)
    gyro = s.angular_velocity.copy()
    ba = np.tile(np.asarray(cfg.accel_bias, dtype=float), (n, 1))
    bg = np.tile(np.asarray(cfg.gyro_bias, dtype=float), (n, 1))
    if cfg.noisy:
        rng = np.random.default_rng([seed, 1])
        dt = 1.0 / cfg.rate
        acc += rng.normal(0, cfg.noise.accel_noise_density / np.sqrt(dt), (n, 3))
        gyro += rng.normal(0, cfg.noise.gyro_noise_density / np.sqrt(dt), (n, 3))
        if cfg.bias_random_walk:
            ba += np.cumsum(rng.normal(0, cfg.noise.accel_bias_random_walk * np.sqrt(dt), (n, 3)), axis=0)
            bg += np.cumsum(rng.normal(0, cfg.noise.gyro_bias_random_walk * np.sqrt(dt), (n, 3)), axis=0)
    acc += ba
    gyro += bg
    return [ImuSample(float(t[i]), gyro[i], acc[i]) for i in range(n)]


@dataclass(frozen=True)
class RadarSimConfig:
    rate: float = 10.0
    azimuth_fov_deg: float = 60.0  # half-angle
    elevation_fov_deg: float = 15.0
    min_range: float = 1.0
    max_range: float = 100.0
    extrinsic: Pose = field(default_factory=Pose)  # radar-to-body (R_r^b, t_rb)
    position_noise: float = 0.0
    doppler_noise: float = 0.0
    rcs_jitter: float = 0.0  # uniform in [-j, j] per scan
    detection_prob: float = 1.0
    clutter_fraction: float = 0.0
    clutter_doppler: float = 3.0
    rcs_range: tuple = (0.0, 40.0)
    # per-scan Doppler offset shared by all points of one azimuth interval
    # (extended-target micro-motion / multipath); 0 disables
    interval_doppler_noise: float = 0.0
    interval_width_deg: float = 4.0


class ScanLabels(NamedTuple):
    kind: np.ndarray  # STATIC / DYNAMIC / CLUTTER
    landmark: np.ndarray  # source landmark id, -1 for clutter


def radar_state(traj: SimTrajectory, t: float, extrinsic: Pose):
    """Radar-to-world rotation, radar origin, and radar velocity in world."""
    s = traj.sample(t)
    return _radar_kinematics(s.rotation[0], s.position[0], s.velocity[0], s.angular_velocity[0], extrinsic)


def _radar_kinematics(R_wb, p_wb, v_wb, omega_b, extrinsic: Pose):
    R_br = extrinsic.rotation.to_matrix()  # radar -> body
    origin = p_wb + R_wb @ extrinsic.translation
    vel = v_wb + R_wb @ np.cross(omega_b, extrinsic.translation)
    return R_wb @ R_br, origin, vel


def gen_radar_scan(
    world: SimWorld,
    traj: SimTrajectory,
    timestamp: float,
    config: RadarSimConfig | None = None,
    seed: int = 0,
    frame: int = 0,
) -> tuple[RadarScan, ScanLabels]:
    """Radar detections of every visible landmark plus optional clutter.

    Doppler is the radial component of the landmark velocity relative to the
    radar, negative when closing.
    """
    s = traj.sample(timestamp)
    return scan_from_state(
        world, s.rotation[0], s.position[0], s.velocity[0], s.angular_velocity[0],
        timestamp, config, seed, frame,
    )


def scan_from_state(
    world: SimWorld,
    R_wb: np.ndarray,
    p_wb: np.ndarray,
    v_wb: np.ndarray,
    omega_b: np.ndarray,
    timestamp: float,
    config: RadarSimConfig | None = None,
    seed: int = 0,
    frame: int = 0,
) -> tuple[RadarScan, ScanLabels]:
    """Scan seen from an explicit body state (see :func:`gen_radar_scan`)."""
    cfg = config or RadarSimConfig()
    rng = np.random.default_rng([seed, 2, frame])
    R_wr, origin, v_radar = _radar_kinematics(
        np.asarray(R_wb, dtype=float), np.asarray(p_wb, dtype=float), np.asarray(v_wb, dtype=float),
        np.asarray(omega_b, dtype=float), cfg.extrinsic,
    )
    R_rw = R_wr.T
    lm = world.positions_at(timestamp)
    p_r = (lm - origin) @ R_rw.T
    rng_ = np.linalg.norm(p_r, axis=1)
    az = np.arctan2(p_r[:, 1], p_r[:, 0])
    el = np.arctan2(p_r[:, 2], np.hypot(p_r[:, 0], p_r[:, 1]))
    vis = (
        (rng_ >= cfg.min_range)
        & (rng_ <= cfg.max_range)
        & (np.abs(az) < np.deg2rad(cfg.azimuth_fov_deg))
        & (np.abs(el) < np.deg2rad(cfg.elevation_fov_deg))
    )
    if cfg.detection_prob < 1.0:
        vis &= rng.random(len(lm)) < cfg.detection_prob
    ids = np.nonzero(vis)[0]
    pts = p_r[ids]
    dirs = pts / rng_[ids, None]
    rel_v = (world.velocities[ids] - v_radar) @ R_rw.T
    doppler = np.einsum("ij,ij->i", dirs, rel_v)
    rcs = world.rcs[ids].copy()
    kind = np.where(world.is_static[ids], STATIC, DYNAMIC)

    n = len(ids)
    if cfg.doppler_noise > 0:
        doppler = doppler + rng.normal(0, cfg.doppler_noise, n)
    if cfg.interval_doppler_noise > 0 and n:
        width = np.deg2rad(cfg.interval_width_deg)
        cell = np.floor((az[ids] + np.deg2rad(cfg.azimuth_fov_deg)) / width).astype(int)
        offsets = rng.normal(0, cfg.interval_doppler_noise, int(cell.max()) + 1)
        doppler = doppler + offsets[cell]
    if cfg.position_noise > 0:
        pts = pts + rng.normal(0, cfg.position_noise, pts.shape)
    if cfg.rcs_jitter > 0:
        rcs = rcs + rng.uniform(-cfg.rcs_jitter, cfg.rcs_jitter, n)

    n_clutter = int(round(cfg.clutter_fraction * n / max(1e-12, 1.0 - cfg.clutter_fraction))) if cfg.clutter_fraction > 0 else 0
    if n_clutter:
        ca = rng.uniform(-1, 1, n_clutter) * np.deg2rad(cfg.azimuth_fov_deg) * 0.999
        ce = rng.uniform(-1, 1, n_clutter) * np.deg2rad(cfg.elevation_fov_deg) * 0.999
        cr = rng.uniform(max(cfg.min_range, 2.0), cfg.max_range, n_clutter)
        cpts = np.column_stack([cr * np.cos(ce) * np.cos(ca), cr * np.cos(ce) * np.sin(ca), cr * np.sin(ce)])
        pts = np.vstack([pts, cpts])
        doppler = np.concatenate([doppler, rng.uniform(-cfg.clutter_doppler, cfg.clutter_doppler, n_clutter)])
        rcs = np.concatenate([rcs, rng.uniform(*cfg.rcs_range, n_clutter)])
        kind = np.concatenate([kind, np.full(n_clutter, CLUTTER)])
        ids = np.concatenate([ids, np.full(n_clutter, -1)])
    return RadarScan(float(timestamp), pts, doppler, rcs), ScanLabels(kind, ids)


# -- scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    trajectory: SimTrajectory
    world_factory: Callable[[np.random.Generator], SimWorld]
    radar: RadarSimConfig = field(default_factory=RadarSimConfig)
    imu: ImuSimConfig = field(default_factory=ImuSimConfig)
    movers: int = 0
    mover_speed: tuple = (1.0, 3.0)


@dataclass
class SimDataset:
    scenario: Scenario
    world: SimWorld
    imu: list[ImuSample]
    scans: list[RadarScan]
    labels: list[ScanLabels]
    ground_truth: list[NavState]
    seed: int

    @property
    def extrinsic(self) -> Pose:
        return self.scenario.radar.extrinsic


def _add_movers(world: SimWorld, traj: SimTrajectory, count: int, speed, rng) -> SimWorld:
    """Movers that stay near the path inside the sensor's view."""
    if count <= 0:
        return world
    ts = rng.uniform(traj.hold, traj.duration, count)
    pos = []
    vel = []
    for t in ts:
        s = traj.sample(t)
        fwd = s.rotation[0][:, 0]
        ahead = s.position[0] + fwd * rng.uniform(8, 30) + s.rotation[0][:, 1] * rng.uniform(-6, 6)
        ahead[2] = s.position[0][2] + rng.uniform(-0.5, 1.5)
        heading = rng.uniform(0, 2 * np.pi)
        v = rng.uniform(*speed) * np.array([np.cos(heading), np.sin(heading), 0.0])
        pos.append(ahead - v * t)
        vel.append(v)
    rcs = rng.uniform(*world_rcs_range(world), count)
    return world.with_movers(np.array(pos), np.array(vel), rcs)


def world_rcs_range(world: SimWorld) -> tuple[float, float]:
    return float(world.rcs.min()), float(world.rcs.max())


def simulate(scenario: Scenario, seed: int = 0) -> SimDataset:
    rng = np.random.default_rng([seed, 0])
    world = replace(scenario.world_factory(rng), seed=seed)
    world = _add_movers(world, scenario.trajectory, scenario.movers, scenario.mover_speed, rng)
    traj = scenario.trajectory
    imu = gen_imu(traj, scenario.imu, seed)
    n_frames = int(np.floor((traj.duration - traj.hold) * scenario.radar.rate + 1e-9)) + 1
    k0 = int(round(traj.hold * scenario.radar.rate))
    scans, labels, gt = [], [], []
    bias = ImuBias(scenario.imu.accel_bias, scenario.imu.gyro_bias)
    for i in range(n_frames):
        t = (k0 + i) / scenario.radar.rate
        scan, lab = gen_radar_scan(world, traj, t, scenario.radar, seed, i)
        scans.append(scan)
        labels.append(lab)
        gt.append(traj.state(t, bias))
    return SimDataset(scenario, world, imu, scans, labels, gt, seed)


PRESETS = ("circle60", "aniso", "sparse", "movers")


def make_scenario(name: str, noise: float = 0.0) -> Scenario:
    """Named scenario; ``noise`` scales the nominal sensor noise (0 = noise-free)."""
    imu_noise = ImuNoise()
    imu = ImuSimConfig(noise=imu_noise, noisy=noise > 0)
    if noise > 0:
        imu = replace(
            imu,
            noise=ImuNoise(
                imu_noise.accel_noise_density * noise,
                imu_noise.gyro_noise_density * noise,
                imu_noise.accel_bias_random_walk,
                imu_noise.gyro_bias_random_walk,
            ),
        )
    radar = RadarSimConfig(
        position_noise=0.05 * noise,
        doppler_noise=0.05 * noise,
        rcs_jitter=0.5 * noise,
    )
    if name == "circle60":
        traj = SimTrajectory(circle_path(), hold=1.0, ramp=3.0, duration=60.0)
        return Scenario(name, traj, lambda rng: ring_world(rng, 500), replace(radar, max_range=60.0), imu)
    if name == "aniso":
        traj = SimTrajectory(wiggle_path(), hold=1.0, ramp=2.0, duration=12.0)
        radar = replace(radar, interval_doppler_noise=0.1 * noise)
        return Scenario(name, traj, lambda rng: aniso_world(rng), radar, imu)
    if name == "sparse":
        traj = SimTrajectory(wiggle_path(), hold=1.0, ramp=2.0, duration=8.0)
        return Scenario(name, traj, lambda rng: aniso_world(rng, n_cluster=0, n_sparse=6, sparse_y=(-20, 20)), radar, imu)
    if name == "movers":
        traj = SimTrajectory(circle_path(), hold=1.0, ramp=3.0, duration=15.0)
        return Scenario(name, traj, lambda rng: ring_world(rng, 400), replace(radar, max_range=60.0), imu, movers=40)
    raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")


def make_preset(name: str, seed: int = 0, noise: float = 0.0) -> SimDataset:
    return simulate(make_scenario(name, noise), seed)
