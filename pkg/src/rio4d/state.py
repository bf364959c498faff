"""Navigation state and IMU bias value types shared by the estimator modules."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geom import Pose, Quaternion

STATE_DIM = 15
P, V, TH, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


def _frozen(a: Sequence[float]) -> np.ndarray:
    out = np.array(a, dtype=float).reshape(3)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "accel", _frozen(self.accel))
        object.__setattr__(self, "gyro", _frozen(self.gyro))
        if not (np.all(np.isfinite(self.accel)) and np.all(np.isfinite(self.gyro))):
            raise ValueError("IMU bias must be finite")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.accel, self.gyro])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> ImuBias:
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:6])


@dataclass(frozen=True)
class NavState:
    """IMU state at a radar frame: world position, velocity, attitude, biases."""

    timestamp: float
    position: np.ndarray
    velocity: np.ndarray
    rotation: Quaternion
    bias: ImuBias = field(default_factory=ImuBias)

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "velocity", _frozen(self.velocity))

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)

    def retract(self, delta: Sequence[float]) -> NavState:
        """Apply a 15-dim error-state step ``[dp, dv, dtheta, dba, dbg]``."""
        d = np.asarray(delta, dtype=float)
        return NavState(
            self.timestamp,
            self.position + d[P],
            self.velocity + d[V],
            self.rotation.retract(d[TH]),
            ImuBias(self.bias.accel + d[BA], self.bias.gyro + d[BG]),
        )

    def with_pose(self, pose: Pose) -> NavState:
        return replace(self, rotation=pose.rotation, position=pose.translation)
