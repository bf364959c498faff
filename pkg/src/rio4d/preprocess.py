"""Radar scan cleaning: random-point removal, IMU-aided dynamic removal and
azimuth/elevation interval division."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import Pose, Quaternion

log = logging.getLogger(__name__)

_ZERO_DOPPLER = 1e-9
_EDGE_DECIMALS = 9


class EmptyScan(ValueError):
    pass


class ZeroRangePoint(ValueError):
    pass


def _ro(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RadarPoint:
    position: np.ndarray
    doppler: float
    rcs: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _ro(np.reshape(self.position, 3)))
        if not np.linalg.norm(self.position) > 0:
            raise ZeroRangePoint(f"point at the sensor origin: {self.position}")

    @property
    def azimuth(self) -> float:
        return float(np.arctan2(self.position[1], self.position[0]))

    @property
    def elevation(self) -> float:
        x, y, z = self.position
        return float(np.arctan2(z, np.hypot(x, y)))

    @property
    def direction(self) -> np.ndarray:
        return self.position / np.linalg.norm(self.position)


@dataclass(frozen=True)
class RadarScan:
    """One radar frame as column arrays.

    ``ids`` carries each point's row index in the originally loaded scan, so
    subsets produced by the filters stay traceable.
    """

    timestamp: float
    positions: np.ndarray
    doppler: np.ndarray
    rcs: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(pos)
        object.__setattr__(self, "positions", _ro(pos))
        object.__setattr__(self, "doppler", _ro(np.reshape(self.doppler, n)))
        object.__setattr__(self, "rcs", _ro(np.reshape(self.rcs, n)))
        ids = np.arange(n) if self.ids is None else np.reshape(self.ids, n)
        object.__setattr__(self, "ids", _ro(ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_points(cls, timestamp: float, points: Sequence[RadarPoint]) -> RadarScan:
        if not points:
            return cls.empty(timestamp)
        return cls(
            timestamp,
            np.array([p.position for p in points]),
            np.array([p.doppler for p in points]),
            np.array([p.rcs for p in points]),
        )

    @classmethod
    def empty(cls, timestamp: float) -> RadarScan:
        return cls(timestamp, np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def point(self, i: int) -> RadarPoint:
        return RadarPoint(self.positions[i], float(self.doppler[i]), float(self.rcs[i]))

    def subset(self, index) -> RadarScan:
        return RadarScan(
            self.timestamp, self.positions[index], self.doppler[index], self.rcs[index], self.ids[index]
        )

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)

    @property
    def directions(self) -> np.ndarray:
        r = self.ranges
        if np.any(r == 0):
            raise ZeroRangePoint(f"{int(np.sum(r == 0))} point(s) at the sensor origin")
        return self.positions / r[:, None]

    @property
    def azimuth(self) -> np.ndarray:
        return np.arctan2(self.positions[:, 1], self.positions[:, 0])

    @property
    def elevation(self) -> np.ndarray:
        p = self.positions
        return np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))


# -- outlier removal ---------------------------------------------------------


class OutlierResult(NamedTuple):
    scan: RadarScan
    keep: np.ndarray
    skipped: bool


def remove_outliers(
    current: RadarScan, previous: RadarScan | None, predicted_transform: Pose, radius: float = 0.5
) -> OutlierResult:
    """Keep current points that have a transformed previous point within ``radius``.

    ``predicted_transform`` maps previous-frame radar coordinates into the
    current radar frame.  With nothing to compare against, the current scan
    passes through unchanged and ``skipped`` is set.
    """
    if previous is None or len(previous) == 0 or len(current) == 0:
        log.debug("outlier removal skipped at t=%s: empty scan", current.timestamp)
        return OutlierResult(current, np.ones(len(current), dtype=bool), True)
    moved = predicted_transform.apply(previous.positions)
    dist, _ = cKDTree(moved).query(current.positions, k=1, distance_upper_bound=radius * (1 + 1e-12))
    keep = dist <= radius
    return OutlierResult(current.subset(keep), keep, False)


# -- dynamic removal ---------------------------------------------------------


def _as_matrix(rot) -> np.ndarray:
    return rot.to_matrix() if isinstance(rot, Quaternion) else np.asarray(rot, dtype=float)


def doppler_error(
    point: RadarPoint, radar_from_body, body_from_world, velocity_world: Sequence[float]
) -> float:
    """``(p/|p|)^T R_b^r R_w^b v^w + doppler``; zero for a static point."""
    if not np.linalg.norm(point.position) > 0:
        raise ZeroRangePoint("zero-range point")
    v_r = _as_matrix(radar_from_body) @ (_as_matrix(body_from_world) @ np.asarray(velocity_world))
    return float(point.direction @ v_r + point.doppler)


def doppler_errors(scan: RadarScan, radar_from_body, body_from_world, velocity_world) -> np.ndarray:
    v_r = _as_matrix(radar_from_body) @ (_as_matrix(body_from_world) @ np.asarray(velocity_world))
    return scan.directions @ v_r + scan.doppler


def static_mask(
    scan: RadarScan,
    radar_from_body,
    body_from_world,
    velocity_world,
    v_thr: float = 0.4,
    p_thr: float = 0.25,
    doppler_floor: float = _ZERO_DOPPLER,
) -> np.ndarray:
    if v_thr <= 0 or p_thr <= 0:
        raise ValueError("thresholds must be positive")
    if len(scan) == 0:
        return np.zeros(0, dtype=bool)
    err = doppler_errors(scan, radar_from_body, body_from_world, velocity_world)
    d = scan.doppler
    zero = np.abs(d) <= doppler_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_ok = np.where(zero, True, np.abs(err) < p_thr * np.abs(d))
    return (np.abs(err) < v_thr) & ratio_ok


def filter_dynamic(
    scan: RadarScan,
    radar_from_body,
    body_from_world,
    velocity_world,
    v_thr: float = 0.4,
    p_thr: float = 0.25,
    doppler_floor: float = _ZERO_DOPPLER,
) -> tuple[RadarScan, RadarScan]:
    """Split into ``(static, dynamic)``.

    Static needs ``|err| < v_thr`` and ``|err / doppler| < p_thr``.  A point
    whose ``|doppler|`` is at most ``doppler_floor`` (default 1e-9, i.e. zero)
    is judged on the first test alone; raising the floor to the Doppler noise
    level keeps the ratio test from rejecting every point near standstill.
    """
    m = static_mask(scan, radar_from_body, body_from_world, velocity_world, v_thr, p_thr, doppler_floor)
    return scan.subset(m), scan.subset(~m)


# -- cloud division ----------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    theta_start: float = np.deg2rad(-60.0)
    theta_res: float = np.deg2rad(4.0)
    s: int = 30
    phi_start: float = np.deg2rad(-15.0)
    phi_res: float = np.deg2rad(3.0)
    t: int = 10

    def __post_init__(self) -> None:
        if self.s < 1 or self.t < 1:
            raise ValueError("interval counts must be >= 1")
        if not (self.theta_res > 0 and self.phi_res > 0):
            raise ValueError("interval resolutions must be positive")

    @classmethod
    def from_degrees(cls, theta_start, theta_res, s, phi_start, phi_res, t) -> GridConfig:
        return cls(
            float(np.deg2rad(theta_start)), float(np.deg2rad(theta_res)), int(s),
            float(np.deg2rad(phi_start)), float(np.deg2rad(phi_res)), int(t),
        )


@dataclass(frozen=True)
class IntervalGrid:
    config: GridConfig
    azimuth_idx: np.ndarray
    elevation_idx: np.ndarray
    azimuth_counts: np.ndarray
    elevation_counts: np.ndarray
    out_of_fov: np.ndarray  # per-point flag, clamped into an edge interval

    @property
    def n_points(self) -> int:
        return len(self.azimuth_idx)

    @property
    def cell_idx(self) -> np.ndarray:
        return self.azimuth_idx * self.config.t + self.elevation_idx


def _bin(values: np.ndarray, start: float, res: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    # rounding snaps values within 1e-9 of an edge onto it (half-open lower edge)
    u = np.floor(np.round((values - start) / res, _EDGE_DECIMALS)).astype(np.int64)
    out = (u < 0) | (u >= n)
    return np.clip(u, 0, n - 1), out


def divide_cloud(scan: RadarScan, config: GridConfig | None = None) -> IntervalGrid:
    """Assign each point an azimuth and an elevation interval (range ignored)."""
    config = config or GridConfig()
    az, az_out = _bin(scan.azimuth, config.theta_start, config.theta_res, config.s)
    el, el_out = _bin(scan.elevation, config.phi_start, config.phi_res, config.t)
    out = az_out | el_out
    if out.any():
        log.debug("%d point(s) outside the interval grid clamped to edge intervals", int(out.sum()))
    return IntervalGrid(
        config=config,
        azimuth_idx=az,
        elevation_idx=el,
        azimuth_counts=np.bincount(az, minlength=config.s),
        elevation_counts=np.bincount(el, minlength=config.t),
        out_of_fov=out,
    )
