"""IMU pre-integration between consecutive radar frames.

Samples are integrated with the midpoint rule in the frame of the first
sample, gravity excluded.  Alongside the deltas we propagate the exact
linearization of the discrete scheme, which gives both the 15x15 covariance
and the first-order bias sensitivities used to correct the deltas when the
bias estimate moves.

Error-state ordering everywhere is ``[alpha, beta, theta, b_a, b_g]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import GRAVITY, Quaternion, right_jacobian, skew, so3_exp
from .state import BA, BG, P, TH, V, ImuBias, NavState

ALPHA, BETA, THETA = slice(0, 3), slice(3, 6), slice(6, 9)


class EmptyStream(ValueError):
    pass


class NonMonotonicTimestamps(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray
    linear_acceleration: np.ndarray

    def __post_init__(self) -> None:
        for name in ("angular_velocity", "linear_acceleration"):
            a = np.array(getattr(self, name), dtype=float).reshape(3)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities.

    White noise in units/sqrt(Hz), bias random walk in units/s/sqrt(Hz).
    """

    accel_noise_density: float = 0.02
    gyro_noise_density: float = 0.002
    accel_bias_random_walk: float = 4e-4
    gyro_bias_random_walk: float = 4e-5


def gravity_vector(g: float = GRAVITY) -> np.ndarray:
    return np.array([0.0, 0.0, g])


@dataclass(frozen=True)
class PreintegratedImu:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Quaternion
    dt: float
    linearization_bias: ImuBias
    bias_jacobians: np.ndarray  # (15, 6): d[alpha, beta, theta, ba, bg] / d[ba, bg]
    covariance: np.ndarray  # (15, 15)
    samples: tuple[ImuSample, ...] = field(repr=False, default=())
    noise: ImuNoise = field(default_factory=ImuNoise, repr=False)

    @property
    def start_time(self) -> float:
        return self.samples[0].timestamp if self.samples else float("nan")

    def corrected(self, bias: ImuBias) -> tuple[np.ndarray, np.ndarray, Quaternion]:
        """First-order bias-corrected ``(alpha, beta, gamma)``."""
        db = bias.as_array() - self.linearization_bias.as_array()
        J = self.bias_jacobians
        alpha = self.alpha + J[ALPHA] @ db
        beta = self.beta + J[BETA] @ db
        gamma = self.gamma * Quaternion.from_rotvec(J[THETA, 3:] @ db[3:])
        return alpha, beta, gamma

    def bias_deviation(self, bias: ImuBias) -> float:
        return float(np.max(np.abs(bias.as_array() - self.linearization_bias.as_array())))

    def reintegrate(self, bias: ImuBias) -> PreintegratedImu:
        return preintegrate(self.samples, bias, self.noise)

    def predict(self, state: NavState, gravity: np.ndarray) -> NavState:
        """Propagate ``state`` across the interval using the corrected deltas."""
        alpha, beta, gamma = self.corrected(state.bias)
        R = state.rotation.to_matrix()
        dt = self.dt
        p = state.position + state.velocity * dt - 0.5 * gravity * dt**2 + R @ alpha
        v = state.velocity - gravity * dt + R @ beta
        q = (state.rotation * gamma).normalized()
        return NavState(state.timestamp + dt, p, v, q, state.bias)

    def sqrt_information(self) -> np.ndarray:
        """Upper factor S with ``S^T S = covariance^-1``."""
        L = np.linalg.cholesky(self.covariance)
        return np.linalg.inv(L)


def _check_samples(samples: Sequence[ImuSample]) -> None:
    if len(samples) < 2:
        raise EmptyStream(f"need at least 2 IMU samples, got {len(samples)}")
    ts = np.array([s.timestamp for s in samples])
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if bad.size:
        i = int(bad[0])
        raise NonMonotonicTimestamps(
            f"sample {i + 1} at t={ts[i + 1]!r} does not follow sample {i} at t={ts[i]!r}"
        )


def preintegrate(
    samples: Sequence[ImuSample], bias: ImuBias | None = None, noise: ImuNoise | None = None
) -> PreintegratedImu:
    """Midpoint pre-integration of ``samples`` at a fixed bias linearization point."""
    samples = tuple(samples)
    _check_samples(samples)
    bias = bias or ImuBias()
    noise = noise or ImuNoise()
    ba, bg = bias.accel, bias.gyro

    alpha = np.zeros(3)
    beta = np.zeros(3)
    R = np.eye(3)
    q = Quaternion.identity()
    cov = np.zeros((15, 15))
    phi = np.eye(15)
    I3 = np.eye(3)

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.timestamp - s0.timestamp
        w = 0.5 * (s0.angular_velocity + s1.angular_velocity) - bg
        dq = Quaternion.from_rotvec(w * dt)
        E = so3_exp(w * dt)
        Jr = right_jacobian(w * dt)
        R1 = R @ E
        a0 = s0.linear_acceleration - ba
        a1 = s1.linear_acceleration - ba
        acc = 0.5 * (R @ a0 + R1 @ a1)

        da_dth = -0.5 * (R @ skew(a0) + R1 @ skew(a1) @ E.T)
        da_dba = -0.5 * (R + R1)
        da_dbg = 0.5 * R1 @ skew(a1) @ Jr * dt

        F = np.eye(15)
        F[ALPHA, BETA] = I3 * dt
        F[ALPHA, THETA] = 0.5 * dt**2 * da_dth
        F[ALPHA, BA] = 0.5 * dt**2 * da_dba
        F[ALPHA, BG] = 0.5 * dt**2 * da_dbg
        F[BETA, THETA] = dt * da_dth
        F[BETA, BA] = dt * da_dba
        F[BETA, BG] = dt * da_dbg
        F[THETA, THETA] = E.T
        F[THETA, BG] = -Jr * dt

        G = np.zeros((15, 12))
        Ravg = 0.5 * (R + R1)
        G[ALPHA, 0:3] = 0.5 * dt**2 * Ravg
        G[BETA, 0:3] = dt * Ravg
        G[ALPHA, 3:6] = -0.5 * dt**2 * da_dbg
        G[BETA, 3:6] = -dt * da_dbg
        G[THETA, 3:6] = Jr * dt
        G[BA, 6:9] = I3
        G[BG, 9:12] = I3
        Q = np.diag(
            np.repeat(
                [
                    noise.accel_noise_density**2 / dt,
                    noise.gyro_noise_density**2 / dt,
                    noise.accel_bias_random_walk**2 * dt,
                    noise.gyro_bias_random_walk**2 * dt,
                ],
                3,
            )
        )
        cov = F @ cov @ F.T + G @ Q @ G.T
        phi = F @ phi

        alpha = alpha + beta * dt + 0.5 * acc * dt**2
        beta = beta + acc * dt
        q = q * dq
        R = R1

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(
        alpha=alpha,
        beta=beta,
        gamma=q.normalized(),
        dt=samples[-1].timestamp - samples[0].timestamp,
        linearization_bias=bias,
        bias_jacobians=phi[:, 9:15].copy(),
        covariance=cov,
        samples=samples,
        noise=noise,
    )


def _rotation_error(pre: PreintegratedImu, s0: NavState, s1: NavState):
    _, _, gamma = pre.corrected(s0.bias)
    E = s0.rotation.conjugate() * s1.rotation * gamma.conjugate()
    return E.canonical(), gamma


def imu_residual(
    pre: PreintegratedImu, state_k: NavState, state_k1: NavState, gravity: np.ndarray | None = None
) -> np.ndarray:
    """15-vector ``[d_alpha, d_beta, d_theta, d_ba, d_bg]`` between two states."""
    g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=float)
    dt = pre.dt
    alpha, beta, _ = pre.corrected(state_k.bias)
    RT = state_k.rotation.to_matrix().T
    E, _ = _rotation_error(pre, state_k, state_k1)
    r = np.empty(15)
    r[ALPHA] = (
        RT @ (state_k1.position - state_k.position + 0.5 * g * dt**2 - state_k.velocity * dt)
        - alpha
    )
    r[BETA] = RT @ (state_k1.velocity + g * dt - state_k.velocity) - beta
    r[THETA] = 2.0 * E.vec
    r[BA] = state_k1.bias.accel - state_k.bias.accel
    r[BG] = state_k1.bias.gyro - state_k.bias.gyro
    return r


def residual_jacobians(
    pre: PreintegratedImu, state_k: NavState, state_k1: NavState, gravity: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic 15x15 Jacobians of :func:`imu_residual` w.r.t. both error states."""
    g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=float)
    dt = pre.dt
    J = pre.bias_jacobians
    RT = state_k.rotation.to_matrix().T
    E, gamma = _rotation_error(pre, state_k, state_k1)
    w, e = E.w, E.vec
    Rg = gamma.to_matrix()
    dbg = state_k.bias.gyro - pre.linearization_bias.gyro
    Jth_bg = right_jacobian(J[THETA, 3:] @ dbg) @ J[THETA, 3:]

    x_alpha = RT @ (state_k1.position - state_k.position + 0.5 * g * dt**2 - state_k.velocity * dt)
    x_beta = RT @ (state_k1.velocity + g * dt - state_k.velocity)
    right = w * np.eye(3) + skew(e)

    J0 = np.zeros((15, 15))
    J0[ALPHA, P] = -RT
    J0[ALPHA, V] = -RT * dt
    J0[ALPHA, TH] = skew(x_alpha)
    J0[ALPHA, BA] = -J[ALPHA, 0:3]
    J0[ALPHA, BG] = -J[ALPHA, 3:6]
    J0[BETA, V] = -RT
    J0[BETA, TH] = skew(x_beta)
    J0[BETA, BA] = -J[BETA, 0:3]
    J0[BETA, BG] = -J[BETA, 3:6]
    J0[THETA, TH] = -(w * np.eye(3) - skew(e))
    J0[THETA, BG] = -right @ Rg @ Jth_bg
    J0[BA, BA] = -np.eye(3)
    J0[BG, BG] = -np.eye(3)

    J1 = np.zeros((15, 15))
    J1[ALPHA, P] = RT
    J1[BETA, V] = RT
    J1[THETA, TH] = right @ Rg
    J1[BA, BA] = np.eye(3)
    J1[BG, BG] = np.eye(3)
    return J0, J1


def interpolate_sample(a: ImuSample, b: ImuSample, t: float) -> ImuSample:
    if not a.timestamp <= t <= b.timestamp:
        raise ValueError(f"t={t} outside [{a.timestamp}, {b.timestamp}]")
    if t == a.timestamp:
        return a
    if t == b.timestamp:
        return b
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    return ImuSample(
        t,
        (1 - u) * a.angular_velocity + u * b.angular_velocity,
        (1 - u) * a.linear_acceleration + u * b.linear_acceleration,
    )


class ImuBuffer:
    """Time-indexed IMU stream that slices sample runs between radar stamps."""

    def __init__(self, samples: Sequence[ImuSample]):
        self.samples = list(samples)
        _check_samples(self.samples)
        self.times = np.array([s.timestamp for s in self.samples])

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def between(self, t0: float, t1: float) -> list[ImuSample]:
        """Samples covering ``[t0, t1]`` with interpolated end points."""
        if t1 <= t0:
            raise NonMonotonicTimestamps(f"interval end {t1!r} not after start {t0!r}")
        if t0 < self.times[0] or t1 > self.times[-1]:
            raise EmptyStream(f"IMU stream [{self.start}, {self.end}] does not cover [{t0}, {t1}]")
        i0 = int(np.searchsorted(self.times, t0, side="right"))  # first strictly after t0
        i1 = int(np.searchsorted(self.times, t1, side="left"))  # first at/after t1
        out: list[ImuSample] = []
        if self.times[i0 - 1] == t0:
            out.append(self.samples[i0 - 1])
        else:
            out.append(interpolate_sample(self.samples[i0 - 1], self.samples[i0], t0))
        out.extend(self.samples[i0:i1])
        if self.times[i1] == t1:
            out.append(self.samples[i1])
        else:
            out.append(interpolate_sample(self.samples[i1 - 1], self.samples[i1], t1))
        return out

    def until(self, t: float) -> list[ImuSample]:
        return [s for s in self.samples if s.timestamp <= t]
