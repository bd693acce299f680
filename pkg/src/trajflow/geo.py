"""Trajectory data model, per-trajectory normalization and path statistics."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088
N_DEPARTURE_BINS = 288  # 5-minute bins


class InvalidTrajectoryError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """A dataset record failed validation; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TransportMode(enum.IntEnum):
    TRAIN = 0
    CAR = 1
    WALK = 2
    BIKE = 3
    OTHER = 4

    @classmethod
    def parse(cls, value) -> "TransportMode":
        if isinstance(value, TransportMode):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown transport mode {value!r}") from None
        return cls(int(value))


class GeoPoint(NamedTuple):
    lat: float
    lon: float
    t: float


@dataclass
class Trajectory:
    id: str
    points: np.ndarray  # (N, 3): lat, lon, seconds since start
    mode: TransportMode
    departure_bin: int
    od_zone: tuple[int, int]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.mode = TransportMode.parse(self.mode)
        self.od_zone = (int(self.od_zone[0]), int(self.od_zone[1]))
        self.departure_bin = int(self.departure_bin)
        validate_trajectory(self)

    def __len__(self):
        return len(self.points)

    @property
    def latlon(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def times(self) -> np.ndarray:
        return self.points[:, 2]

    def geo_points(self) -> list[GeoPoint]:
        return [GeoPoint(*map(float, p)) for p in self.points]


def validate_trajectory(traj: Trajectory) -> None:
    pts = traj.points
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidTrajectoryError(f"points must be (N, 3), got {pts.shape}")
    if len(pts) < 2:
        raise InvalidTrajectoryError("a trajectory needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise InvalidTrajectoryError("non-finite coordinate or timestamp")
    if np.any(np.abs(pts[:, 0]) > 90) or np.any(np.abs(pts[:, 1]) > 180):
        raise InvalidTrajectoryError("latitude/longitude out of range")
    t = pts[:, 2]
    if t[0] < 0 or np.any(np.diff(t) < 0):
        raise InvalidTrajectoryError("timestamps must be non-negative and non-decreasing")
    if not 0 <= traj.departure_bin < N_DEPARTURE_BINS:
        raise InvalidTrajectoryError(f"departure_bin {traj.departure_bin} outside [0, 287]")


@dataclass(frozen=True)
class NormalizationFrame:
    offset: np.ndarray  # (2,) degrees, lat/lon
    scale: np.ndarray  # (2,) degrees per unit

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        if self.offset.shape != (2,) or self.scale.shape != (2,):
            raise ValueError("offset and scale must be 2-vectors")
        if np.any(self.scale <= 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


def normalize_trajectory(traj: Trajectory | np.ndarray) -> tuple[np.ndarray, NormalizationFrame]:
    """Map a trajectory into [-1, 1]^2 by per-axis min-max.

    Accepts a :class:`Trajectory` or a raw ``(N, 2)`` lat/lon array. An axis
    with zero extent maps to 0 with scale 1.
    """
    xy = traj.latlon if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)[:, :2]
    if len(xy) < 2:
        raise InvalidTrajectoryError("a trajectory needs at least 2 points")
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    offset = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    scale = np.where(half > 0, half, 1.0)
    path = (xy - offset) / scale
    return np.clip(path, -1.0, 1.0), NormalizationFrame(offset, scale)


def denormalize(path: np.ndarray, frame: NormalizationFrame) -> np.ndarray:
    """Inverse of :func:`normalize_trajectory`; returns ``(N, 2)`` lat/lon."""
    path = np.asarray(path, dtype=np.float64)
    if not np.all(np.isfinite(path)):
        raise FloatingPointError("non-finite normalized coordinates")
    return path * frame.scale + frame.offset


def arc_length(path: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex, starting at 0."""
    seg = np.sqrt(np.sum(np.diff(path, axis=0) ** 2, axis=1))
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_uniform(path: np.ndarray, n: int) -> np.ndarray:
    """Resample a polyline to ``n`` points equally spaced in arc length."""
    path = np.asarray(path, dtype=np.float64)
    if n < 2:
        raise ValueError("n must be >= 2")
    if len(path) < 2:
        raise InvalidTrajectoryError("path needs at least 2 points")
    s = arc_length(path)
    total = s[-1]
    if total == 0:  # also reached when subnormal steps underflow
        out = np.repeat(path[:1], n, axis=0)
        out[-1] = path[-1]
        return out
    targets = np.linspace(0.0, total, n)
    # duplicate vertices give zero-length segments; searchsorted on the
    # strictly increasing subset keeps interpolation well defined
    keep = np.concatenate([[True], np.diff(s) > 0])
    s_k, p_k = s[keep], path[keep]
    out = np.empty((n, path.shape[1]))
    for d in range(path.shape[1]):
        out[:, d] = np.interp(targets, s_k, p_k[:, d])
    out[0] = path[0]
    out[-1] = path[-1]
    return out


def uniform_polyline(path: np.ndarray, n: int, tol: float = 1e-13, max_iter: int = 500) -> np.ndarray:
    """``n`` points with equal consecutive spacing along their own polyline.

    One :func:`resample_uniform` pass spaces points evenly along the *input*,
    but chords cut corners so a second pass moves them again. Iterating to
    the fixed point gives a working path that further resampling at the same
    ``n`` leaves unchanged (up to ``tol`` relative to the path extent).
    """
    out = resample_uniform(path, n)
    extent = max(float(np.ptp(out, axis=0).max()), 1e-300)
    for _ in range(max_iter):
        nxt = resample_uniform(out, n)
        if np.max(np.abs(nxt - out)) <= tol * extent:
            return nxt
        out = nxt
    return out


def haversine_km(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle distance in km between broadcastable lat/lon arrays."""
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    dlat = b[..., 0] - a[..., 0]
    dlon = b[..., 1] - a[..., 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[..., 0]) * np.cos(b[..., 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def polyline_length_km(latlon: np.ndarray) -> float:
    latlon = np.asarray(latlon, dtype=np.float64)
    return float(np.sum(haversine_km(latlon[:-1], latlon[1:])))


FEATURE_NAMES = ("avg_speed", "avg_step_distance", "elapsed_time", "cumulative_distance", "step_count")


@dataclass(frozen=True)
class NumericFeatures:
    avg_speed: float  # km/h
    avg_step_distance: float  # km
    elapsed_time: float  # s
    cumulative_distance: float  # km
    step_count: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "NumericFeatures":
        return cls(*map(float, values))


def path_stats(traj: Trajectory) -> NumericFeatures:
    pts = traj.points
    if len(pts) < 2:
        raise InvalidTrajectoryError("a trajectory needs at least 2 points")
    elapsed = float(pts[-1, 2] - pts[0, 2])
    if elapsed <= 0:
        raise ZeroDivisionError("trajectory has zero elapsed time")
    dist = polyline_length_km(pts[:, :2])
    n = len(pts)
    return NumericFeatures(
        avg_speed=dist / (elapsed / 3600.0),
        avg_step_distance=dist / (n - 1),
        elapsed_time=elapsed,
        cumulative_distance=dist,
        step_count=float(n),
    )


class FeatureScaler:
    """Z-score standardizer fitted on dataset-level numeric features."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, values: np.ndarray) -> "FeatureScaler":
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(d["mean"], d["std"])


# --- JSON Lines dataset -----------------------------------------------------

def trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "id": traj.id,
        "mode": traj.mode.name,
        "departure_bin": traj.departure_bin,
        "od": list(traj.od_zone),
        "points": traj.points.tolist(),
    }


def record_to_trajectory(rec: dict, line: int = 0) -> Trajectory:
    try:
        if not isinstance(rec, dict):
            raise TypeError("record must be a JSON object")
        for key, kind in (("id", str), ("mode", str), ("departure_bin", int), ("od", list), ("points", list)):
            if key not in rec:
                raise KeyError(f"missing field {key!r}")
            if not isinstance(rec[key], kind) or (kind is int and isinstance(rec[key], bool)):
                raise TypeError(f"field {key!r} must be {kind.__name__}")
        od = rec["od"]
        if len(od) != 2 or not all(isinstance(z, int) and not isinstance(z, bool) for z in od):
            raise TypeError("od must be two integer zone ids")
        pts = rec["points"]
        if not all(isinstance(p, list) and len(p) == 3 for p in pts):
            raise TypeError("points must be [lat, lon, t] triples")
        return Trajectory(rec["id"], np.array(pts, dtype=np.float64), rec["mode"], rec["departure_bin"], tuple(od))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(line, str(exc).strip("'\"")) from exc


def write_jsonl(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_record(traj), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(i, f"invalid JSON ({exc.msg})") from exc
            out.append(record_to_trajectory(rec, i))
    return out


def departure_bin(seconds_of_day: float) -> int:
    return int(math.floor(seconds_of_day / 300.0)) % N_DEPARTURE_BINS


@dataclass(frozen=True)
class ZoneGrid:
    """Regular rows x cols grid of OD zones over a lat/lon box; ids are row-major."""

    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    rows: int
    cols: int

    @property
    def n_zones(self) -> int:
        return self.rows * self.cols

    @property
    def cell_size(self) -> np.ndarray:
        lat0, lat1, lon0, lon1 = self.bbox
        return np.array([(lat1 - lat0) / self.rows, (lon1 - lon0) / self.cols])

    def zone_of(self, latlon) -> np.ndarray:
        p = np.atleast_2d(np.asarray(latlon, dtype=np.float64))
        lat0, _, lon0, _ = self.bbox
        size = self.cell_size
        r = np.clip(np.floor((p[:, 0] - lat0) / size[0]).astype(int), 0, self.rows - 1)
        c = np.clip(np.floor((p[:, 1] - lon0) / size[1]).astype(int), 0, self.cols - 1)
        return r * self.cols + c

    def cell_bounds(self, zone: int) -> tuple[float, float, float, float]:
        if not 0 <= zone < self.n_zones:
            raise ValueError(f"zone {zone} outside [0, {self.n_zones})")
        r, c = divmod(int(zone), self.cols)
        lat0, _, lon0, _ = self.bbox
        h, w = self.cell_size
        return lat0 + r * h, lat0 + (r + 1) * h, lon0 + c * w, lon0 + (c + 1) * w

    def center(self, zone) -> np.ndarray:
        zone = np.atleast_1d(np.asarray(zone, dtype=int))
        r, c = np.divmod(zone, self.cols)
        lat0, _, lon0, _ = self.bbox
        h, w = self.cell_size
        return np.stack([lat0 + (r + 0.5) * h, lon0 + (c + 0.5) * w], axis=-1)

    def to_local(self, zone, latlon) -> np.ndarray:
        """Position inside the zone cell, mapped to [-1, 1]^2."""
        return (np.atleast_2d(latlon) - self.center(zone)) / (0.5 * self.cell_size)

    def from_local(self, zone, local) -> np.ndarray:
        return self.center(zone) + np.atleast_2d(local) * (0.5 * self.cell_size)

    def contains(self, zone: int, latlon) -> bool:
        lat_lo, lat_hi, lon_lo, lon_hi = self.cell_bounds(zone)
        lat, lon = latlon[0], latlon[1]
        return lat_lo <= lat <= lat_hi and lon_lo <= lon <= lon_hi

    def clamp(self, latlon) -> np.ndarray:
        lat0, lat1, lon0, lon1 = self.bbox
        p = np.array(latlon, dtype=np.float64)
        p[..., 0] = np.clip(p[..., 0], lat0, lat1)
        p[..., 1] = np.clip(p[..., 1], lon0, lon1)
        return p

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d: dict) -> "ZoneGrid":
        return cls(tuple(float(x) for x in d["bbox"]), int(d["rows"]), int(d["cols"]))
