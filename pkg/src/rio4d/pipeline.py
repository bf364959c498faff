"""Per-frame driver: preprocessing, Doppler weighting, keypoint matching and
the sliding-window solve, producing one pose per radar frame."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .doppler import compute_interval_weights, least_squares_velocity, point_coefficients
from .estimator import Frame, SlidingWindow
from .geom import Pose, Quaternion
from .imu_preint import ImuBuffer, ImuSample, preintegrate
from .lgc import build_histograms, extract_keypoints, match_keypoints, ransac_filter
from .preprocess import RadarScan, divide_cloud, filter_dynamic, remove_outliers
from .state import ImuBias, NavState

log = logging.getLogger(__name__)

_MIN_P2P = 3


class PipelineError(RuntimeError):
    """Module error raised while processing a particular frame."""

    def __init__(self, frame: int, cause: Exception):
        self.frame = frame
        self.cause = cause
        super().__init__(f"frame {frame}: {type(cause).__name__}: {cause}")


class EmptyStream(ValueError):
    pass


@dataclass
class FrameDiagnostics:
    frame: int
    timestamp: float
    points: int = 0
    outliers: int = 0
    static: int = 0
    dynamic: int = 0
    keypoints: int = 0
    matches: int = 0
    verified_matches: int = 0
    landmarks: int = 0
    iterations: int = 0
    termination: str = ""
    diverged: bool = False
    degraded: bool = False
    notes: list[str] = field(default_factory=list)
    costs: dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineResult:
    states: list[NavState]
    diagnostics: list[FrameDiagnostics]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.states])

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.states]).reshape(-1, 3)

    @property
    def any_diverged(self) -> bool:
        return any(d.diverged for d in self.diagnostics)

    def diagnostics_dict(self) -> dict:
        return {
            "frames": [asdict(d) for d in self.diagnostics],
            "degraded_frames": sum(d.degraded for d in self.diagnostics),
            "diverged_frames": sum(d.diverged for d in self.diagnostics),
        }


def _level_rotation(accel: np.ndarray) -> Quaternion:
    """Zero-yaw attitude whose gravity direction matches the mean specific force."""
    fx, fy, fz = accel
    roll = np.arctan2(fy, fz)
    pitch = np.arctan2(-fx, np.hypot(fy, fz))
    cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Quaternion.from_matrix(Ry @ Rx)


def initial_state(scan: RadarScan, imu: Sequence[ImuSample], config: RunConfig) -> NavState:
    """Attitude from gravity, velocity zero at standstill or from Doppler otherwise.

    IMU samples up to the first radar timestamp give roll/pitch (yaw is zero).
    Standstill needs both sensors to agree: specific force close to gravity
    with little rotation, and a median Doppler magnitude under the noise
    floor.  At standstill the mean gyro seeds the gyro bias.
    """
    t0 = scan.timestamp
    pre = [s for s in imu if s.timestamp <= t0] or [imu[0]]
    acc = np.mean([s.linear_acceleration for s in pre], axis=0)
    gyr = np.mean([s.angular_velocity for s in pre], axis=0)
    q = _level_rotation(acc)
    R_rb = config.extrinsic.rotation.to_matrix()
    imu_still = abs(np.linalg.norm(acc) - config.gravity) < 0.3 and np.linalg.norm(gyr) < 0.1
    radar_still = len(scan) == 0 or float(np.median(np.abs(scan.doppler))) <= config.doppler_floor
    if imu_still and radar_still:
        return NavState(t0, np.zeros(3), np.zeros(3), q, ImuBias(np.zeros(3), gyr))
    v = np.zeros(3)
    if len(scan) >= 3:
        Rbw = q.to_matrix().T
        v = least_squares_velocity(scan, R_rb.T, Rbw)
        static, _ = filter_dynamic(scan, R_rb.T, Rbw, v, config.v_thr, config.p_thr, config.doppler_floor)
        if len(static) >= 3:
            v = least_squares_velocity(static, R_rb.T, Rbw)
    return NavState(t0, np.zeros(3), v, q, ImuBias(np.zeros(3), np.zeros(3)))


class Pipeline:
    """Incremental pipeline; feed scans in time order with :meth:`step`."""

    def __init__(self, config: RunConfig, imu: Sequence[ImuSample]):
        if len(imu) == 0:
            raise EmptyStream("empty IMU stream")
        self.config = config
        self.mode = config.estimator_mode
        self.imu = ImuBuffer(imu)
        self.noise = config.imu_noise()
        self.grid_config = config.grid()
        self.lgc_config = config.lgc()
        self.extrinsic = config.extrinsic
        self.window = SlidingWindow(config.estimator())
        self.output: list[NavState] = []
        self.diagnostics: list[FrameDiagnostics] = []
        self._prev_raw: RadarScan | None = None
        self._frame = 0
        self._rng = np.random.default_rng(config.seed)

    def _predict(self, t: float) -> tuple[NavState, object]:
        last = self.window.states[-1]
        samples = self.imu.between(last.timestamp, t)
        pre = preintegrate(samples, last.bias, self.noise)
        guess = pre.predict(last, self.window.gravity)
        return NavState(t, guess.position, guess.velocity, guess.rotation, guess.bias), pre

    def step(self, scan: RadarScan) -> list[NavState]:
        """Process one scan; returns the states that left the window."""
        k = self._frame
        diag = FrameDiagnostics(k, scan.timestamp, points=len(scan))
        try:
            finished = self._step(scan, diag)
        except Exception as e:  # noqa: BLE001 - re-raised with frame context
            raise PipelineError(k, e) from e
        self.diagnostics.append(diag)
        self._frame += 1
        self._prev_raw = scan
        self.output.extend(finished)
        return finished

    def _step(self, scan: RadarScan, diag: FrameDiagnostics) -> list[NavState]:
        cfg = self.config
        T_br = self.extrinsic
        R_rb = T_br.rotation.to_matrix()
        if not self.window.states:
            guess, pre = initial_state(scan, self.imu.samples, cfg), None
        else:
            if scan.timestamp <= self.window.states[-1].timestamp:
                raise ValueError("radar timestamps must be strictly increasing")
            guess, pre = self._predict(scan.timestamp)

        # consistency with the previous frame
        cloud = scan
        if cfg.outlier_removal and self._prev_raw is not None:
            prev = self.window.states[-1]
            T_cur = guess.pose @ T_br
            T_prev = prev.pose @ T_br
            res = remove_outliers(scan, self._prev_raw, T_cur.inverse() @ T_prev, cfg.outlier_radius)
            cloud = res.scan
            diag.outliers = int((~res.keep).sum())

        static, dynamic = filter_dynamic(
            cloud, R_rb.T, guess.rotation.to_matrix().T, guess.velocity, cfg.v_thr, cfg.p_thr, cfg.doppler_floor
        )
        diag.static, diag.dynamic = len(static), len(dynamic)

        if len(static):
            grid = divide_cloud(static, self.grid_config)
            coeff = point_coefficients(static, grid, compute_interval_weights(grid), cfg.doppler_pairing)
        else:
            grid = None
            coeff = np.zeros((0, 2))
            diag.notes.append("no static points")
            diag.degraded = True

        frame = Frame(self._frame, scan.timestamp, static, coeff, preint=pre)
        matches = []
        if self.mode.uses_p2p and grid is not None:
            kp = extract_keypoints(static, grid, self.lgc_config.keypoints_per_cell)
            kp = build_histograms(kp, self.lgc_config)
            frame.keypoints = kp
            diag.keypoints = len(kp)
            prev_frame = self.window.frames[-1] if self.window.frames else None
            if prev_frame is not None and prev_frame.keypoints is not None and len(kp) and len(prev_frame.keypoints):
                cand = match_keypoints(prev_frame.keypoints, kp)
                diag.matches = len(cand)
                verified = ransac_filter(
                    cand, prev_frame.scan, static, cfg.ransac_inlier_dist, cfg.ransac_iterations, self._rng
                )
                matches = [m for m in verified if m.inlier]
            diag.verified_matches = len(matches)
            if len(kp) < _MIN_P2P or (self._frame > 0 and len(matches) < _MIN_P2P):
                diag.degraded = True
                diag.notes.append("too few keypoint matches for registration")

        finished = [s for s, _ in self.window.advance(frame, guess)]
        if self.mode.uses_p2p:
            self.window.manage_landmarks(matches)
        diag.landmarks = len(self.window.active_landmarks()) if self.mode.uses_p2p else 0
        if len(self.window) >= 2:
            rep = self.window.solve()
            diag.iterations = rep.iterations
            diag.termination = rep.termination
            diag.diverged = rep.diverged
            diag.costs = rep.family_costs
            if rep.diverged:
                diag.degraded = True
                diag.notes.append("solver diverged; kept last accepted iterate")
        return finished

    def finish(self) -> PipelineResult:
        """Flush the window; every frame ends up with exactly one output state."""
        self.output.extend(self.window.states)
        self.window.states = []
        self.window.frames = []
        return PipelineResult(self.output, self.diagnostics)


def run_pipeline(config: RunConfig, scans: Sequence[RadarScan], imu: Sequence[ImuSample]) -> PipelineResult:
    """Run the full estimator over a radar and an IMU stream."""
    if len(scans) == 0:
        raise EmptyStream("empty radar stream")
    pipe = Pipeline(config, imu)
    t_imu = (imu[0].timestamp, imu[-1].timestamp)
    for scan in scans:
        if not (t_imu[0] <= scan.timestamp <= t_imu[1]):
            log.warning("radar scan at t=%.6f lies outside the IMU stream; skipped", scan.timestamp)
            continue
        pipe.step(scan)
    if not pipe.diagnostics:
        raise EmptyStream("radar and IMU streams do not overlap")
    return pipe.finish()
