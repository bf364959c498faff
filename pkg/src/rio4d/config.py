"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored.  Unknown keys, repeated keys
and values that fail validation raise :class:`ConfigError` naming the line.
Histogram keys left unset inherit from the selected radar profile.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .estimator import EstimatorConfig, Mode
from .geom import GRAVITY, Pose, Quaternion
from .imu_preint import ImuNoise
from .lgc import RADAR_PROFILES, LgcConfig
from .preprocess import GridConfig
from .solver import SolverOptions


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "Full"
    seed: int = 0
    window_size: int = 10
    huber_delta: float = 0.1
    p2p_weight: float = 1.0
    gravity: float = GRAVITY
    max_iterations: int = 50
    anchor: str = "full"  # or "pose"
    relinearize_threshold: float = 1e-2

    # preprocessing
    outlier_radius: float = 0.5
    outlier_removal: bool = True
    v_thr: float = 0.4
    p_thr: float = 0.25
    doppler_floor: float = 0.2  # |doppler| at or below this skips the ratio test
    azimuth_start_deg: float = -60.0
    azimuth_res_deg: float = 4.0
    azimuth_intervals: int = 30
    elevation_start_deg: float = -15.0
    elevation_res_deg: float = 3.0
    elevation_intervals: int = 10
    doppler_pairing: str = "literal"

    # descriptors and matching; None means "take from the profile"
    radar_profile: str = "ars548"
    keypoints_per_cell: int | None = None
    neighbors: int | None = None
    distance_bin_width: float | None = None
    rcs_bin_width: float | None = None
    distance_bins: int | None = None
    rcs_bins: int | None = None
    nhi_threshold: float | None = None
    nhi_radius: int | None = None
    rcs_screen: float | None = None
    ransac_iterations: int = 200
    ransac_inlier_dist: float = 0.5
    nonkey_radius: float = 0.3
    nonkey_min_matches: int = 3

    # IMU noise densities
    accel_noise_density: float = ImuNoise.accel_noise_density
    gyro_noise_density: float = ImuNoise.gyro_noise_density
    accel_bias_random_walk: float = ImuNoise.accel_bias_random_walk
    gyro_bias_random_walk: float = ImuNoise.gyro_bias_random_walk

    # radar-to-body extrinsic
    extrinsic_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extrinsic_quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)  # w, x, y, z

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        Mode.parse(self.mode)
        if self.radar_profile not in RADAR_PROFILES:
            raise ConfigError(f"radar_profile must be one of {sorted(RADAR_PROFILES)}")
        if self.anchor not in ("full", "pose"):
            raise ConfigError("anchor must be 'full' or 'pose'")
        if self.doppler_pairing not in ("literal", "swapped"):
            raise ConfigError("doppler_pairing must be 'literal' or 'swapped'")
        positive = [
            "window_size", "huber_delta", "gravity", "max_iterations", "outlier_radius", "v_thr", "p_thr",
            "azimuth_res_deg", "azimuth_intervals", "elevation_res_deg", "elevation_intervals",
            "ransac_iterations", "ransac_inlier_dist", "nonkey_radius",
            "keypoints_per_cell", "neighbors", "distance_bin_width", "rcs_bin_width", "distance_bins",
            "rcs_bins", "accel_noise_density", "gyro_noise_density",
        ]
        for name in positive:
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        nonneg = [
            "p2p_weight", "doppler_floor", "relinearize_threshold", "nonkey_min_matches", "nhi_threshold", "nhi_radius",
            "rcs_screen", "accel_bias_random_walk", "gyro_bias_random_walk",
        ]
        for name in nonneg:
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be non-negative, got {v}")
        if self.window_size < 2:
            raise ConfigError("window_size must be at least 2")
        q = np.asarray(self.extrinsic_quaternion, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ConfigError("extrinsic_quaternion must be unit-norm within 1e-6")

    # -- derived module configs --------------------------------------------

    @property
    def estimator_mode(self) -> Mode:
        return Mode.parse(self.mode)

    @property
    def extrinsic(self) -> Pose:
        return Pose(Quaternion.from_array(self.extrinsic_quaternion), np.asarray(self.extrinsic_translation, dtype=float))

    def grid(self) -> GridConfig:
        return GridConfig.from_degrees(
            self.azimuth_start_deg, self.azimuth_res_deg, self.azimuth_intervals,
            self.elevation_start_deg, self.elevation_res_deg, self.elevation_intervals,
        )

    def lgc(self) -> LgcConfig:
        base = RADAR_PROFILES[self.radar_profile]
        overrides = {f.name: getattr(self, f.name) for f in fields(LgcConfig)
                     if hasattr(self, f.name) and getattr(self, f.name) is not None}
        return dataclasses.replace(base, **overrides)

    def imu_noise(self) -> ImuNoise:
        return ImuNoise(self.accel_noise_density, self.gyro_noise_density,
                        self.accel_bias_random_walk, self.gyro_bias_random_walk)

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(
            mode=self.estimator_mode,
            window_size=self.window_size,
            huber_delta=self.huber_delta,
            p2p_weight=self.p2p_weight,
            gravity=self.gravity,
            extrinsic=self.extrinsic,
            relinearize_threshold=self.relinearize_threshold,
            nonkey_radius=self.nonkey_radius,
            nonkey_min_matches=self.nonkey_min_matches,
            anchor=self.anchor,
            solver=SolverOptions(max_iterations=self.max_iterations),
        )

    # -- text form -----------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        lines: dict[str, int] = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown key {key!r}", no)
            if key in values:
                raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", no)
            try:
                values[key] = _convert(val, types[key])
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}", no) from None
            lines[key] = no
        try:
            return cls(**values)
        except ConfigError as e:
            key = next((k for k in lines if k in str(e)), None)
            raise ConfigError(str(e), lines.get(key)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out.append(f"{f.name} = {_format(v)}")
        return "\n".join(out) + "\n"


def _convert(val: str, typ: str):
    typ = str(typ)
    if val == "" :
        raise ValueError("empty value")
    if typ.startswith("tuple"):
        n = typ.count("float")
        parts = [p.strip() for p in val.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    base = typ.replace(" | None", "")
    if val.lower() == "none" and "None" in typ:
        return None
    if base == "bool":
        low = val.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {val!r}")
    if base == "int":
        return int(val)
    if base == "float":
        x = float(val)
        if not np.isfinite(x):
            raise ValueError("must be finite")
        return x
    return val


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
