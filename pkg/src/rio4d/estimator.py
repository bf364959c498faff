"""Sliding-window estimator: IMU, Doppler and point-to-point residual families
over a fixed-lag window of NavStates and world-frame landmarks.

Cost minimized per window::

    sum ||r_I||^2_{P^-1} + sum rho(||w_D r_D||^2) + sum w_P rho(||r_P||^2)

with ``rho`` the Huber loss on the squared norm.  Error states are
``[dp, dv, dtheta, dba, dbg]`` per NavState and ``dl`` per landmark; the
first state's position and attitude are always held fixed (gauge); by
default its velocity and biases are held too.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import GRAVITY, Pose, Quaternion, skew, skew_batch
from .imu_preint import PreintegratedImu, gravity_vector, imu_residual, residual_jacobians
from .lgc import Correspondence, KeypointCloud
from .preprocess import RadarScan
from .solver import Linearization, SolverOptions, SolverReport, levenberg_marquardt
from .state import BA, BG, P, STATE_DIM, TH, V, ImuBias, NavState

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    D_IMU = "D-IMU"
    WD_IMU = "WD-IMU"
    P2P_IMU = "P2P-IMU"
    FULL = "Full"

    @classmethod
    def parse(cls, s: str | Mode) -> Mode:
        if isinstance(s, Mode):
            return s
        for m in cls:
            if s.lower() in (m.value.lower(), m.name.lower()):
                return m
        raise ValueError(f"unknown mode {s!r}; choose from {[m.value for m in cls]}")

    @property
    def uses_doppler(self) -> bool:
        return self is not Mode.P2P_IMU

    @property
    def weighted(self) -> bool:
        return self in (Mode.WD_IMU, Mode.FULL)

    @property
    def uses_p2p(self) -> bool:
        return self in (Mode.P2P_IMU, Mode.FULL)


# -- robust loss ---------------------------------------------------------------


def huber(s: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber loss on the squared norm ``s``: value and derivative d rho / d s."""
    s = np.asarray(s, dtype=float)
    d2 = delta * delta
    inside = s <= d2
    root = np.sqrt(np.where(inside, 1.0, s))
    rho = np.where(inside, s, 2.0 * delta * root - d2)
    drho = np.where(inside, 1.0, delta / root)
    return rho, drho


# -- P2P residual --------------------------------------------------------------


def p2p_residual(landmark: Sequence[float], point: Sequence[float], state: NavState, extrinsic: Pose) -> np.ndarray:
    """``l^w - (R_b^w (R_r^b p^r + t_rb) + p_b^w)``."""
    x_b = extrinsic.apply(np.asarray(point, dtype=float))
    return np.asarray(landmark, dtype=float) - (state.rotation.to_matrix() @ x_b + state.position)


def p2p_jacobians(point: Sequence[float], state: NavState, extrinsic: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobians w.r.t. ``dp``, ``dtheta`` (right perturbation) and the landmark."""
    x_b = extrinsic.apply(np.asarray(point, dtype=float))
    R = state.rotation.to_matrix()
    return -np.eye(3), R @ skew(x_b), np.eye(3)


# -- window contents -----------------------------------------------------------


class Source(str, enum.Enum):
    KEYPOINT = "keypoint"
    PROMOTED_NONKEY = "promoted-nonkey"
    NONKEY = "nonkey"  # tentative track, not yet in the state


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    source: Source = Source.KEYPOINT
    observation_count: int = 1
    observations: list[tuple[int, int]] = field(default_factory=list)  # (frame_id, point row)

    def observed_in(self, frame_id: int) -> bool:
        return any(f == frame_id for f, _ in self.observations)

    def active(self, min_matches: int) -> bool:
        if self.source is Source.KEYPOINT:
            return True
        return self.observation_count > min_matches


@dataclass
class Frame:
    """Preprocessed radar frame as held in the window.

    ``scan`` holds only the static points; rows of the per-point arrays and
    landmark observations refer to it.
    """

    frame_id: int
    timestamp: float
    scan: RadarScan
    coefficients: np.ndarray  # (N, 2) Doppler weight factors, or (N, 1) of ones
    preint: PreintegratedImu | None = None
    keypoints: KeypointCloud | None = None
    landmark_of: dict[int, int] = field(default_factory=dict)
    body_points: np.ndarray | None = None
    body_dirs: np.ndarray | None = None

    def prepare(self, extrinsic: Pose) -> None:
        self.body_points = extrinsic.apply(self.scan.positions) if len(self.scan) else np.zeros((0, 3))
        R_rb = extrinsic.rotation.to_matrix()
        self.body_dirs = self.scan.directions @ R_rb.T if len(self.scan) else np.zeros((0, 3))


@dataclass(frozen=True)
class EstimatorConfig:
    mode: Mode = Mode.FULL
    window_size: int = 10
    huber_delta: float = 0.1
    p2p_weight: float = 1.0
    gravity: float = GRAVITY
    extrinsic: Pose = field(default_factory=Pose)  # radar-to-body
    relinearize_threshold: float = 1e-2
    nonkey_radius: float = 0.3
    nonkey_min_matches: int = 3
    # "pose" fixes the oldest state's position and attitude; "full" also its
    # velocity and biases, conditioning the window on their current estimate
    anchor: str = "full"
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class SolveReport(SolverReport):
    family_costs: dict[str, float] = field(default_factory=dict)
    active_landmarks: int = 0


class SlidingWindow:
    def __init__(self, config: EstimatorConfig | None = None):
        self.config = config or EstimatorConfig()
        self.states: list[NavState] = []
        self.frames: list[Frame] = []
        self.landmarks: dict[int, Landmark] = {}
        self._next_landmark = 0

    def __len__(self) -> int:
        return len(self.states)

    @property
    def gravity(self) -> np.ndarray:
        return gravity_vector(self.config.gravity)

    def imu_block_count(self) -> int:
        return sum(1 for f in self.frames[1:] if f.preint is not None)

    def frame_index(self, frame_id: int) -> int:
        for i, f in enumerate(self.frames):
            if f.frame_id == frame_id:
                return i
        raise KeyError(frame_id)

    # -- window management ---------------------------------------------------

    def advance(self, frame: Frame, state: NavState) -> list[tuple[NavState, Frame]]:
        """Append a frame with its initial state guess; returns any dropped pairs."""
        if frame.body_points is None:
            frame.prepare(self.config.extrinsic)
        if not self.frames:
            frame.preint = None
        self.states.append(state)
        self.frames.append(frame)
        dropped = []
        while len(self.states) > self.config.window_size:
            dropped.append((self.states.pop(0), self.frames.pop(0)))
            self.frames[0].preint = None
        if dropped:
            self._retire([f.frame_id for _, f in dropped])
        return dropped

    def _retire(self, frame_ids: Iterable[int]) -> None:
        gone = set(frame_ids)
        for lid in list(self.landmarks):
            lm = self.landmarks[lid]
            lm.observations = [o for o in lm.observations if o[0] not in gone]
            if not lm.observations:
                del self.landmarks[lid]

    def _new_landmark(self, position: np.ndarray, source: Source, observations: list[tuple[int, int]]) -> Landmark:
        lm = Landmark(self._next_landmark, np.array(position, dtype=float), source, len(observations), list(observations))
        self.landmarks[lm.id] = lm
        self._next_landmark += 1
        for fid, row in observations:
            self.frames[self.frame_index(fid)].landmark_of[row] = lm.id
        return lm

    def world_point(self, frame_index: int, row: int) -> np.ndarray:
        s = self.states[frame_index]
        return s.rotation.to_matrix() @ self.frames[frame_index].body_points[row] + s.position

    def manage_landmarks(self, matches: Sequence[Correspondence], nonkey: bool = True) -> dict[str, int]:
        """Fold verified matches between the last two frames into landmarks.

        Matches carry point rows of the previous (``index_a``) and newest
        (``index_b``) frames.  Non-key points of the newest frame are then
        associated by nearest neighbor to existing landmarks and tracks.
        """
        stats = {"new": 0, "extended": 0, "nonkey_associated": 0, "nonkey_new": 0, "promoted": 0}
        if not self.frames:
            return stats
        cur = self.frames[-1]
        if len(self.frames) >= 2:
            prev = self.frames[-2]
            for m in matches:
                if m.index_b in cur.landmark_of:
                    continue
                lid = prev.landmark_of.get(m.index_a)
                if lid is not None and lid in self.landmarks:
                    lm = self.landmarks[lid]
                    if lm.observed_in(cur.frame_id):
                        continue
                    lm.observations.append((cur.frame_id, m.index_b))
                    lm.observation_count += 1
                    if lm.source is Source.NONKEY:
                        lm.source = Source.KEYPOINT
                    cur.landmark_of[m.index_b] = lid
                    stats["extended"] += 1
                else:
                    pos = self.world_point(len(self.frames) - 2, m.index_a)
                    self._new_landmark(
                        pos, Source.KEYPOINT, [(prev.frame_id, m.index_a), (cur.frame_id, m.index_b)]
                    )
                    stats["new"] += 1
        if nonkey and cur.keypoints is not None:
            self._associate_nonkey(cur, stats)
        return stats

    def _associate_nonkey(self, cur: Frame, stats: dict[str, int]) -> None:
        is_key = np.zeros(len(cur.scan), dtype=bool)
        is_key[cur.keypoints.indices] = True
        rows = [r for r in np.nonzero(~is_key)[0] if r not in cur.landmark_of]
        if not rows:
            return
        k = len(self.frames) - 1
        S = self.states[k]
        pts = cur.body_points[rows] @ S.rotation.to_matrix().T + S.position
        candidates = [lm for lm in self.landmarks.values() if not lm.observed_in(cur.frame_id)]
        taken: set[int] = set()
        if candidates:
            tree = cKDTree(np.array([lm.position for lm in candidates]))
            dist, idx = tree.query(pts, k=1, distance_upper_bound=self.config.nonkey_radius)
        else:
            dist = np.full(len(rows), np.inf)
            idx = np.zeros(len(rows), dtype=int)
        for row, d, i, p in zip(rows, dist, idx, pts):
            if np.isfinite(d) and i not in taken:
                taken.add(int(i))
                lm = candidates[i]
                lm.observations.append((cur.frame_id, int(row)))
                lm.observation_count += 1
                cur.landmark_of[int(row)] = lm.id
                stats["nonkey_associated"] += 1
                if lm.source is Source.NONKEY and lm.observation_count > self.config.nonkey_min_matches:
                    lm.source = Source.PROMOTED_NONKEY
                    stats["promoted"] += 1
            else:
                self._new_landmark(p, Source.NONKEY, [(cur.frame_id, int(row))])
                stats["nonkey_new"] += 1

    def active_landmarks(self) -> list[Landmark]:
        m = self.config.nonkey_min_matches
        return [lm for lm in self.landmarks.values() if lm.active(m) and lm.observations]

    def p2p_block_count(self) -> int:
        return sum(len(lm.observations) for lm in self.active_landmarks())

    # -- solving ---------------------------------------------------------------

    def relinearize(self) -> int:
        n = 0
        for k in range(1, len(self.frames)):
            pre = self.frames[k].preint
            if pre is not None and pre.bias_deviation(self.states[k - 1].bias) > self.config.relinearize_threshold:
                self.frames[k].preint = pre.reintegrate(self.states[k - 1].bias)
                n += 1
        return n

    def problem(self, mode: Mode | None = None) -> WindowProblem:
        return WindowProblem(self, Mode.parse(mode or self.config.mode))

    def solve(self, mode: Mode | None = None) -> SolveReport:
        """Optimize all states and active landmarks in place."""
        if len(self.states) < 2:
            return SolveReport(termination="trivial")
        self.relinearize()
        prob = self.problem(mode)
        x0 = (list(self.states), prob.landmark_positions())
        x, rep = levenberg_marquardt(prob, x0, self.config.solver)
        states, lpos = x
        self.states = list(states)
        for lm, p in zip(prob.landmarks, lpos):
            lm.position = p.copy()
        out = SolveReport(**vars(rep))
        out.family_costs = prob.family_costs(x)
        out.active_landmarks = len(prob.landmarks)
        return out


def solve_window(window: SlidingWindow, mode: Mode | str | None = None) -> SolveReport:
    return window.solve(Mode.parse(mode) if mode is not None else None)


def advance_window(window: SlidingWindow, frame: Frame, state: NavState) -> SlidingWindow:
    window.advance(frame, state)
    return window


class WindowProblem:
    """Least-squares view of a window for :func:`levenberg_marquardt`."""

    def __init__(self, window: SlidingWindow, mode: Mode):
        self.window = window
        self.mode = mode
        cfg = window.config
        self.delta = cfg.huber_delta
        self.w_p = cfg.p2p_weight
        self.g = window.gravity
        n = len(window.states)
        self.n = n
        free = np.ones(STATE_DIM * n, dtype=bool)
        if cfg.anchor == "full":
            free[:STATE_DIM] = False
        else:
            free[P] = False
            free[TH] = False
        self.free = free

        self.imu = []
        for k in range(1, n):
            pre = window.frames[k].preint
            if pre is not None:
                self.imu.append((k, pre, pre.sqrt_information()))

        self.doppler = []
        if mode.uses_doppler:
            for k, f in enumerate(window.frames):
                if len(f.scan) == 0:
                    continue
                if mode.weighted:
                    c2 = np.sum(f.coefficients**2, axis=1)
                else:
                    c2 = np.ones(len(f.scan))
                self.doppler.append((k, f.body_dirs, f.scan.doppler, c2))

        self.landmarks: list[Landmark] = []
        obs_state, obs_lm, obs_x = [], [], []
        if mode.uses_p2p:
            fid_to_k = {f.frame_id: k for k, f in enumerate(window.frames)}
            self.landmarks = window.active_landmarks()
            for j, lm in enumerate(self.landmarks):
                for fid, row in lm.observations:
                    k = fid_to_k[fid]
                    obs_state.append(k)
                    obs_lm.append(j)
                    obs_x.append(window.frames[k].body_points[row])
        order = np.argsort(np.array(obs_state, dtype=np.int64), kind="stable")
        self.obs_state = np.array(obs_state, dtype=np.int64)[order]
        self.obs_lm = np.array(obs_lm, dtype=np.int64)[order]
        self.obs_x = np.array(obs_x, dtype=float).reshape(-1, 3)[order]
        self.obs_states_present, self.obs_starts = np.unique(self.obs_state, return_index=True)
        self._pt = np.r_[0:3, 6:9]
        self._skew_x = skew_batch(self.obs_x)

    def landmark_positions(self) -> np.ndarray:
        return np.array([lm.position for lm in self.landmarks], dtype=float).reshape(-1, 3)

    def retract(self, x, ds: np.ndarray, dl: np.ndarray):
        states, lpos = x
        new_states = []
        for k, s in enumerate(states):
            d = ds[STATE_DIM * k : STATE_DIM * (k + 1)]
            if k == 0:
                # gauge: position and attitude of the first state stay bit-identical
                new_states.append(
                    NavState(s.timestamp, s.position, s.velocity + d[V], s.rotation,
                             ImuBias(s.bias.accel + d[BA], s.bias.gyro + d[BG]))
                )
            else:
                new_states.append(s.retract(d))
        return new_states, lpos + dl.reshape(-1, 3)

    # -- evaluation ------------------------------------------------------------

    def _doppler_terms(self, states, k, dirs, dop, c2, jac):
        s = states[k]
        RT = s.rotation.to_matrix().T
        vb = RT @ s.velocity
        r = dirs @ vb + dop
        rho, drho = huber(c2 * r * r, self.delta)
        if not jac:
            return rho.sum(), None
        J = np.empty((len(r), 6))
        J[:, 0:3] = dirs @ RT
        J[:, 3:6] = dirs @ skew(vb)
        w = drho * c2
        return rho.sum(), (J, w, r)

    def _p2p_terms(self, states, lpos, jac):
        if len(self.obs_state) == 0:
            return 0.0, None
        Rs = np.stack([s.rotation.to_matrix() for s in states])
        ps = np.stack([s.position for s in states])
        R = Rs[self.obs_state]
        Rx = (R @ self.obs_x[:, :, None])[:, :, 0]
        r = lpos[self.obs_lm] - (Rx + ps[self.obs_state])
        rho, drho = huber(np.einsum("mi,mi->m", r, r), self.delta)
        if not jac:
            return self.w_p * rho.sum(), None
        Js = np.empty((len(r), 3, 6))
        Js[:, :, 0:3] = -np.eye(3)
        Js[:, :, 3:6] = R @ self._skew_x
        return self.w_p * rho.sum(), (Js, self.w_p * drho, r)

    def family_costs(self, x) -> dict[str, float]:
        states, lpos = x
        imu = 0.0
        for k, pre, S in self.imu:
            r = S @ imu_residual(pre, states[k - 1], states[k], self.g)
            imu += float(r @ r)
        dop = sum(self._doppler_terms(states, *d, jac=False)[0] for d in self.doppler)
        p2p = self._p2p_terms(states, lpos, jac=False)[0]
        return {"imu": imu, "doppler": float(dop), "p2p": float(p2p)}

    def cost(self, x) -> float:
        return sum(self.family_costs(x).values())

    def linearize(self, x) -> Linearization:
        states, lpos = x
        n, L = self.n, len(lpos)
        ns = STATE_DIM * n
        H = np.zeros((ns, ns))
        g = np.zeros(ns)
        cost = 0.0

        for k, pre, S in self.imu:
            s0, s1 = states[k - 1], states[k]
            r = S @ imu_residual(pre, s0, s1, self.g)
            J0, J1 = residual_jacobians(pre, s0, s1, self.g)
            J = np.hstack([S @ J0, S @ J1])
            sl = slice(STATE_DIM * (k - 1), STATE_DIM * (k + 1))
            H[sl, sl] += J.T @ J
            g[sl] += J.T @ r
            cost += float(r @ r)

        vt = np.r_[3:6, 6:9]
        for d in self.doppler:
            k = d[0]
            c, (J, w, r) = self._doppler_terms(states, *d, jac=True)
            cost += c
            Jw = J * w[:, None]
            idx = STATE_DIM * k + vt
            H[np.ix_(idx, idx)] += Jw.T @ J
            g[idx] += Jw.T @ r

        Hsl = np.zeros((ns, 3 * L))
        Hll = np.zeros((L, 3, 3))
        gl = np.zeros(3 * L)
        c, terms = self._p2p_terms(states, lpos, jac=True)
        cost += c
        if terms is not None:
            Js, w, r = terms
            JsT_w = np.transpose(Js, (0, 2, 1)) * w[:, None, None]
            # observations are sorted by state, so per-state sums are segment sums
            Hss_blocks = np.add.reduceat(JsT_w @ Js, self.obs_starts, axis=0)
            gs_blocks = np.add.reduceat((JsT_w @ r[:, :, None])[:, :, 0], self.obs_starts, axis=0)
            # a landmark is seen at most once per frame: (state, landmark) pairs are unique
            Hsl4 = np.zeros((n, 6, L, 3))
            Hsl4[self.obs_state, :, self.obs_lm, :] = JsT_w
            Hsl.reshape(n, STATE_DIM, 3 * L)[:, self._pt, :] = Hsl4.reshape(n, 6, 3 * L)
            for k, blk, gb in zip(self.obs_states_present, Hss_blocks, gs_blocks):
                idx = STATE_DIM * k + self._pt
                H[np.ix_(idx, idx)] += blk
                g[idx] += gb
            wl = np.bincount(self.obs_lm, weights=w, minlength=L)
            Hll = wl[:, None, None] * np.eye(3)[None]
            wr = w[:, None] * r
            gl = np.stack([np.bincount(self.obs_lm, weights=wr[:, a], minlength=L) for a in range(3)], axis=1).ravel()
        return Linearization(cost, H, g, Hsl, Hll, gl)
