"""Direction-balanced Doppler weights and Doppler velocity residuals.

Each azimuth and elevation interval gets raw weight ``1/sqrt(n)`` so that
every occupied direction contributes the same total constraint; the raw
weights are then mapped affinely onto ``[1, 10]`` per axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Quaternion, skew
from .preprocess import IntervalGrid, RadarPoint, RadarScan, ZeroRangePoint, _as_matrix

WEIGHT_RANGE = (1.0, 10.0)
PAIRINGS = ("literal", "swapped")


class EmptyGrid(ValueError):
    pass


@dataclass(frozen=True)
class IntervalWeights:
    """Per-interval weights. Empty intervals hold 0 in every variant."""

    raw_azimuth: np.ndarray
    raw_elevation: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray


def raw_weights(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts)
    out = np.zeros(len(counts))
    nz = counts > 0
    out[nz] = 1.0 / np.sqrt(counts[nz])
    return out


def normalize_weights(raw: np.ndarray, lo: float = WEIGHT_RANGE[0], hi: float = WEIGHT_RANGE[1]) -> np.ndarray:
    out = np.zeros_like(raw)
    nz = raw > 0
    if not nz.any():
        return out
    w = raw[nz]
    span = w.max() - w.min()
    if span <= 0:
        out[nz] = lo
    else:
        out[nz] = (w - w.min()) / span * (hi - lo) + lo
    return out


def compute_interval_weights(grid: IntervalGrid) -> IntervalWeights:
    if grid.n_points == 0:
        raise EmptyGrid("no points in the interval grid")
    ra = raw_weights(grid.azimuth_counts)
    re = raw_weights(grid.elevation_counts)
    return IntervalWeights(ra, re, normalize_weights(ra), normalize_weights(re))


def point_coefficients(
    scan: RadarScan, grid: IntervalGrid, weights: IntervalWeights, pairing: str = "literal"
) -> np.ndarray:
    """(N, 2) factors ``[w_i sin(theta), w_j cos(theta)]`` that scale each point's residual.

    ``i``/``j`` are the point's azimuth/elevation intervals and ``theta`` its
    elevation.  ``pairing="swapped"`` puts the azimuth weight on ``cos``.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    el = scan.elevation
    wi = weights.azimuth[grid.azimuth_idx]
    wj = weights.elevation[grid.elevation_idx]
    if pairing == "swapped":
        wi, wj = wj, wi
    return np.column_stack([wi * np.sin(el), wj * np.cos(el)])


def doppler_residual(
    point: RadarPoint, radar_from_body, body_from_world, velocity_world
) -> float:
    """Unweighted residual ``(p/|p|)^T R_b^r R_w^b v^w + doppler``."""
    if not np.linalg.norm(point.position) > 0:
        raise ZeroRangePoint("zero-range point")
    v_r = _as_matrix(radar_from_body) @ (_as_matrix(body_from_world) @ np.asarray(velocity_world, dtype=float))
    return float(point.direction @ v_r + point.doppler)


def weighted_doppler_residual(
    point: RadarPoint,
    weights: IntervalWeights,
    grid: IntervalGrid,
    point_index: int,
    radar_from_body,
    body_from_world,
    velocity_world,
    pairing: str = "literal",
) -> np.ndarray:
    """2-vector residual for the grid point ``point_index``."""
    r = doppler_residual(point, radar_from_body, body_from_world, velocity_world)
    wi = weights.azimuth[grid.azimuth_idx[point_index]]
    wj = weights.elevation[grid.elevation_idx[point_index]]
    if pairing == "swapped":
        wi, wj = wj, wi
    theta = point.elevation
    return np.array([wi * np.sin(theta), wj * np.cos(theta)]) * r


def doppler_jacobians(
    point: RadarPoint, radar_from_body, rotation: Quaternion, velocity_world
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the unweighted residual w.r.t. ``v^w`` and the attitude error.

    ``rotation`` is the body-to-world attitude ``q_b^w``, perturbed on the
    right.  Multiply by the weight coefficients for the weighted form.
    """
    R_br = _as_matrix(radar_from_body)
    RT = rotation.to_matrix().T
    a = point.direction @ R_br
    J_v = a @ RT
    J_th = a @ skew(RT @ np.asarray(velocity_world, dtype=float))
    return J_v, J_th


def least_squares_velocity(
    scan: RadarScan, radar_from_body, body_from_world, weights: np.ndarray | None = None
) -> np.ndarray:
    """World-frame velocity minimizing the (optionally weighted) Doppler residuals
    of one scan at a fixed attitude."""
    A = scan.directions @ _as_matrix(radar_from_body) @ _as_matrix(body_from_world)
    b = -scan.doppler
    if weights is not None:
        s = np.sqrt(np.asarray(weights, dtype=float))
        A = A * s[:, None]
        b = b * s
    v, *_ = np.linalg.lstsq(A, b, rcond=None)
    return v
