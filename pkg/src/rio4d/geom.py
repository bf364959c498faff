"""Rotation, quaternion and rigid-pose algebra.

Conventions
-----------
* Hamilton quaternions stored as ``[w, x, y, z]``.
* ``q_b^w`` rotates body-frame vectors into the world frame: ``v_w = R(q) v_b``.
* Right-handed frames, world z-up, gravity ``g^w = [0, 0, g]`` (the
  accelerometer measures ``R^T (a^w + g^w)``).
* Rotation error states live in the 3-dim tangent space and are applied on
  the right: ``q <- q (x) Exp(dtheta)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

GRAVITY = 9.81
_RENORM_TOL = 1e-6


class DegenerateGeometry(ValueError):
    """Point sets without enough spread to determine a rigid transform."""


class FrameTag(enum.Enum):
    WORLD = "world"
    BODY = "body"
    RADAR = "radar"


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stacked skew-symmetric matrices for an (N, 3) array."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi: Sequence[float]) -> np.ndarray:
    """Rodrigues formula, series-expanded near zero."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + s * K + c * (K @ K)


def right_jacobian(phi: Sequence[float]) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(angle)) / angle**2
    b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) - a * K + b * (K @ K)


@dataclass(frozen=True)
class Quaternion:
    """Unit Hamilton quaternion ``w + xi + yj + zk``."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def identity(cls) -> Quaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a: Sequence[float], normalize: bool = True) -> Quaternion:
        a = np.asarray(a, dtype=float)
        if normalize:
            n = float(np.linalg.norm(a))
            if n == 0.0:
                raise ValueError("zero-norm quaternion")
            a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_rotvec(cls, phi: Sequence[float]) -> Quaternion:
        """Exponential map: rotation vector (axis * angle) to quaternion."""
        phi = np.asarray(phi, dtype=float)
        angle = float(np.linalg.norm(phi))
        if angle < 1e-8:
            # second-order series keeps unit norm to ~1e-17
            half = 0.5 * phi
            w = 1.0 - 0.125 * angle**2
            return cls.from_array([w, *half])
        s = np.sin(0.5 * angle) / angle
        return cls(float(np.cos(0.5 * angle)), *(float(c) for c in s * phi))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> Quaternion:
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> Quaternion:
        # Shepperd's method
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls.from_array(q).canonical()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))

    def normalized(self) -> Quaternion:
        return Quaternion.from_array(self.as_array())

    def canonical(self) -> Quaternion:
        """Pick the representative with ``w >= 0``."""
        if self.w < 0.0:
            return Quaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def conjugate(self) -> Quaternion:
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def __mul__(self, other: Quaternion) -> Quaternion:
        return quat_multiply(self, other)

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def rotate(self, v: Sequence[float]) -> np.ndarray:
        return rotate_vector(self, v)

    def log(self) -> np.ndarray:
        """Rotation vector of the canonical representative (angle in [0, pi])."""
        q = self.canonical()
        v = q.vec
        s = float(np.linalg.norm(v))
        if s < 1e-12:
            return 2.0 * v
        angle = 2.0 * np.arctan2(s, q.w)
        return v / s * angle

    def angle_to(self, other: Quaternion) -> float:
        """Geodesic angle (rad) between two rotations."""
        return float(np.linalg.norm((self.conjugate() * other).log()))

    def retract(self, dtheta: Sequence[float]) -> Quaternion:
        """Right-multiplicative update ``q (x) Exp(dtheta)``, renormalized."""
        return (self * Quaternion.from_rotvec(dtheta)).normalized()


def _maybe_renormalize(q: Quaternion) -> Quaternion:
    if abs(q.norm() - 1.0) > _RENORM_TOL:
        return q.normalized()
    return q


def quat_multiply(a: Quaternion, b: Quaternion) -> Quaternion:
    a = _maybe_renormalize(a)
    b = _maybe_renormalize(b)
    w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z
    x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y
    y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x
    z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w
    return Quaternion(w, x, y, z)


def rotate_vector(q: Quaternion, v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    u = q.vec
    # v' = v + 2w (u x v) + 2 u x (u x v)
    t = 2.0 * np.cross(u, v)
    return v + q.w * t + np.cross(u, t)


def vec_part(q: Quaternion) -> np.ndarray:
    """``[x, y, z]`` of the canonical (``w >= 0``) representative."""
    return q.canonical().vec


def quat_left_matrix(q: Quaternion) -> np.ndarray:
    """L(q) such that ``q (x) p = L(q) p`` for array-form ``p``."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def quat_right_matrix(q: Quaternion) -> np.ndarray:
    """R(q) such that ``p (x) q = R(q) p`` for array-form ``p``."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` (maps the child frame into the parent)."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        return cls(Quaternion.from_matrix(T[:3, :3]), T[:3, 3])

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.to_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation * other.rotation, self.apply(other.translation))

    __matmul__ = compose

    def inverse(self) -> Pose:
        qi = self.rotation.conjugate()
        return Pose(qi, -rotate_vector(qi, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=float)
        R = self.rotation.to_matrix()
        return points @ R.T + self.translation


def umeyama_align(est: np.ndarray, ref: np.ndarray) -> Pose:
    """Least-squares rigid transform (no scale) mapping ``est`` onto ``ref``.

    Raises DegenerateGeometry for coincident or collinear inputs, where the
    rotation is not unique.
    """
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {est.shape} and {ref.shape}")
    if len(est) < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {len(est)}")
    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    E = est - mu_e
    F = ref - mu_r
    for name, X in (("est", E), ("ref", F)):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[0] < 1e-12 or sv[1] < 1e-9 * max(1.0, sv[0]):
            raise DegenerateGeometry(f"{name} points are coincident or collinear")
    C = F.T @ E / len(est)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_r - R @ mu_e
    return Pose(Quaternion.from_matrix(R), t)


def rotation_matrices(quats: Sequence[Quaternion]) -> np.ndarray:
    return np.stack([q.to_matrix() for q in quats])
