"""Dataset files: radar and IMU CSV streams, TUM trajectories, labels.

Floats are written with ``repr`` (shortest round-trip form), so save then
load reproduces every value bit for bit.  Every write goes to a temporary
file in the target directory that is then renamed into place.
"""
from __future__ import annotations

import csv
import io as _io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import Pose, Quaternion
from .imu_preint import ImuSample, NonMonotonicTimestamps
from .preprocess import RadarScan
from .state import NavState

RADAR_HEADER = ("timestamp", "x", "y", "z", "doppler", "rcs")
IMU_HEADER = ("timestamp", "wx", "wy", "wz", "ax", "ay", "az")
LABEL_HEADER = ("timestamp", "kind", "landmark")


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class EmptyFile(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows(path: str | Path, header: Sequence[str]) -> Iterable[tuple[int, list[float]]]:
    """Yield ``(line_number, values)`` for every data row, validating the header."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not any(l.strip() for l in lines):
        raise EmptyFile(f"{path}: file is empty")
    got = [h.strip() for h in lines[0].split(",")]
    if got != list(header):
        raise ParseError(path, 1, f"expected header {','.join(header)!r}, got {lines[0]!r}")
    n = len(header)
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n:
            raise ParseError(path, no, f"expected {n} fields, got {len(parts)}")
        vals = []
        for name, p in zip(header, parts):
            try:
                v = float(p)
            except ValueError:
                raise ParseError(path, no, f"{name}: not a number: {p.strip()!r}") from None
            if not math.isfinite(v):
                raise ParseError(path, no, f"{name}: non-finite value {p.strip()!r}")
            vals.append(v)
        yield no, vals


# -- radar -------------------------------------------------------------------


def save_radar_csv(path: str | Path, scans: Sequence[RadarScan]) -> None:
    """One row per detection.  Scans without points leave no trace in the file."""
    out = [",".join(RADAR_HEADER)]
    for s in scans:
        t = _fmt(s.timestamp)
        for p, d, r in zip(s.positions, s.doppler, s.rcs):
            out.append(",".join((t, _fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(d), _fmt(r))))
    atomic_write(path, "\n".join(out) + "\n")


def load_radar_csv(path: str | Path) -> list[RadarScan]:
    groups: list[tuple[float, int, list[list[float]]]] = []
    for no, v in _rows(path, RADAR_HEADER):
        t = v[0]
        if v[1] == 0 and v[2] == 0 and v[3] == 0:
            raise ParseError(path, no, "zero-range point")
        if groups and t == groups[-1][0]:
            groups[-1][2].append(v)
            continue
        if groups and t < groups[-1][0]:
            raise NonMonotonicTimestamps(
                f"{path}: line {no} timestamp {t!r} precedes line {groups[-1][1]} timestamp {groups[-1][0]!r}"
            )
        groups.append((t, no, [v]))
    if not groups:
        raise EmptyFile(f"{path}: no data rows")
    scans = []
    for t, _, rows in groups:
        a = np.array(rows)
        scans.append(RadarScan(t, a[:, 1:4], a[:, 4], a[:, 5]))
    return scans


# -- IMU ---------------------------------------------------------------------


def save_imu_csv(path: str | Path, samples: Sequence[ImuSample]) -> None:
    out = [",".join(IMU_HEADER)]
    for s in samples:
        w, a = s.angular_velocity, s.linear_acceleration
        out.append(",".join(_fmt(x) for x in (s.timestamp, *w, *a)))
    atomic_write(path, "\n".join(out) + "\n")


def load_imu_csv(path: str | Path) -> list[ImuSample]:
    out: list[ImuSample] = []
    prev_line = 0
    for no, v in _rows(path, IMU_HEADER):
        if out and v[0] <= out[-1].timestamp:
            raise NonMonotonicTimestamps(
                f"{path}: line {no} timestamp {v[0]!r} is not after line {prev_line} timestamp {out[-1].timestamp!r}"
            )
        out.append(ImuSample(v[0], v[1:4], v[4:7]))
        prev_line = no
    if not out:
        raise EmptyFile(f"{path}: no data rows")
    return out


# -- trajectories ------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Timestamped poses (TUM convention: body-to-world)."""

    timestamps: np.ndarray
    positions: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4) as w, x, y, z

    def __post_init__(self) -> None:
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not (len(t) == len(p) == len(q)):
            raise ValueError("timestamps, positions and quaternions differ in length")
        if np.any(np.diff(t) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must be strictly increasing")
        if len(q) and np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) > 1e-6:
            raise ValueError("trajectory quaternions must be unit-norm within 1e-6")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quaternions", q)

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_states(cls, states: Sequence[NavState]) -> Trajectory:
        return cls(
            np.array([s.timestamp for s in states]),
            np.array([s.position for s in states]).reshape(-1, 3),
            np.array([s.rotation.as_array() for s in states]).reshape(-1, 4),
        )

    def pose(self, i: int) -> Pose:
        return Pose(Quaternion.from_array(self.quaternions[i]), self.positions[i])


def save_tum(path: str | Path, traj: Trajectory) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    out = []
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        out.append(" ".join(_fmt(x) for x in (t, *p, q[1], q[2], q[3], q[0])))
    atomic_write(path, "\n".join(out) + ("\n" if out else ""))


def load_tum(path: str | Path) -> Trajectory:
    path = Path(path)
    text = path.read_text()
    rows = []
    lines = []
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise ParseError(path, no, f"expected 8 fields, got {len(parts)}")
        try:
            v = [float(x) for x in parts]
        except ValueError:
            raise ParseError(path, no, "non-numeric field") from None
        if not all(math.isfinite(x) for x in v):
            raise ParseError(path, no, "non-finite value")
        if rows and v[0] <= rows[-1][0]:
            raise NonMonotonicTimestamps(
                f"{path}: line {no} timestamp {v[0]!r} is not after line {lines[-1]} timestamp {rows[-1][0]!r}"
            )
        if abs(math.sqrt(sum(x * x for x in v[4:8])) - 1.0) > 1e-6:
            raise ParseError(path, no, "quaternion is not unit-norm within 1e-6")
        rows.append(v)
        lines.append(no)
    if not rows:
        raise EmptyFile(f"{path}: no poses")
    a = np.array(rows)
    return Trajectory(a[:, 0], a[:, 1:4], a[:, [7, 4, 5, 6]])


# -- simulator labels --------------------------------------------------------


def save_labels_csv(path: str | Path, scans: Sequence[RadarScan], labels) -> None:
    """Per-detection ground-truth labels, row-aligned with :func:`save_radar_csv`."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for s, lab in zip(scans, labels):
        for k, lm in zip(lab.kind, lab.landmark):
            w.writerow((_fmt(s.timestamp), int(k), int(lm)))
    atomic_write(path, buf.getvalue())
