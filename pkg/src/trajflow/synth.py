"""Synthetic multi-scale trajectory world: zones, mode profiles, path sampling and dataset files."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import N_DEPARTURE_BINS, Trajectory, TransportMode, ZoneGrid, haversine_km, resample_uniform, write_jsonl

KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON_EQ = 111.320


class Scale(str, enum.Enum):
    URBAN = "urban"
    METRO = "metro"
    NATIONWIDE = "nationwide"

    @classmethod
    def parse(cls, value) -> "Scale":
        if isinstance(value, Scale):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown scale {value!r}; expected one of "
                             f"{', '.join(s.value for s in cls)}") from None


# bbox extent in degrees (lat, lon), hotspot count, hotspot spread range in km
SCALE_LAYOUT = {
    Scale.URBAN: ((0.6, 0.75), 6, (2.0, 6.0)),
    Scale.METRO: ((1.5, 1.8), 10, (3.0, 12.0)),
    Scale.NATIONWIDE: ((10.0, 12.0), 8, (3.0, 40.0)),
}


@dataclass(frozen=True)
class ModeProfile:
    speed_kmh: float
    speed_sd: float
    trip_km: float
    trip_sd: float
    jitter_km: float
    bend: float  # lateral control-point spread relative to chord length
    corridor: bool = False


DEFAULT_PROFILES = {
    TransportMode.WALK: ModeProfile(4.5, 0.8, 1.5, 0.7, 0.004, 0.25),
    TransportMode.BIKE: ModeProfile(14.0, 3.0, 4.0, 1.8, 0.012, 0.22),
    TransportMode.CAR: ModeProfile(35.0, 8.0, 12.0, 5.0, 0.03, 0.2),
    TransportMode.TRAIN: ModeProfile(60.0, 10.0, 30.0, 10.0, 0.05, 0.04, corridor=True),
    TransportMode.OTHER: ModeProfile(20.0, 6.0, 6.0, 3.0, 0.02, 0.2),
}
DEFAULT_MODE_WEIGHTS = {TransportMode.TRAIN: 0.15, TransportMode.CAR: 0.3, TransportMode.WALK: 0.25,
                        TransportMode.BIKE: 0.2, TransportMode.OTHER: 0.1}


@dataclass(frozen=True)
class World:
    seed: int
    scale: Scale
    grid: ZoneGrid
    hotspots: np.ndarray  # (H, 3): lat, lon, spread km
    corridors: np.ndarray  # (C, 3): lat, lon of an anchor point, heading in radians
    curvature: float = 1.0
    profiles: tuple = tuple(sorted(DEFAULT_PROFILES.items()))
    mode_weights: tuple = tuple(sorted(DEFAULT_MODE_WEIGHTS.items()))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return self.grid.bbox

    @property
    def extent_deg(self) -> tuple[float, float]:
        lat0, lat1, lon0, lon1 = self.bbox
        return lat1 - lat0, lon1 - lon0

    def profile(self, mode) -> ModeProfile:
        return dict(self.profiles)[TransportMode(mode)]

    # local tangent plane (km) around the bbox centre
    @property
    def _origin(self) -> np.ndarray:
        lat0, lat1, lon0, lon1 = self.bbox
        return np.array([(lat0 + lat1) / 2, (lon0 + lon1) / 2])

    def _km_per_deg(self) -> np.ndarray:
        return np.array([KM_PER_DEG_LAT, KM_PER_DEG_LON_EQ * np.cos(np.radians(self._origin[0]))])

    def to_km(self, latlon) -> np.ndarray:
        return (np.asarray(latlon) - self._origin) * self._km_per_deg()

    def to_latlon(self, km) -> np.ndarray:
        return np.asarray(km) / self._km_per_deg() + self._origin

    def inside(self, latlon) -> bool:
        lat0, lat1, lon0, lon1 = self.bbox
        return lat0 <= latlon[0] <= lat1 and lon0 <= latlon[1] <= lon1

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "scale": self.scale.value, "grid": self.grid.to_dict(),
            "hotspots": self.hotspots.tolist(), "corridors": self.corridors.tolist(),
            "curvature": self.curvature,
            "profiles": {TransportMode(m).name: vars(p) for m, p in self.profiles},
            "mode_weights": {TransportMode(m).name: w for m, w in self.mode_weights},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(int(d["seed"]), Scale.parse(d["scale"]), ZoneGrid.from_dict(d["grid"]),
                   np.array(d["hotspots"], dtype=np.float64), np.array(d["corridors"], dtype=np.float64),
                   float(d["curvature"]),
                   tuple(sorted((TransportMode[k], ModeProfile(**v)) for k, v in d["profiles"].items())),
                   tuple(sorted((TransportMode[k], float(v)) for k, v in d["mode_weights"].items())))


def make_world(seed: int, scale=Scale.URBAN, curvature: float = 1.0, rows: int = 8, cols: int = 8) -> World:
    """Deterministic world for ``(seed, scale)``."""
    scale = Scale.parse(scale)
    if curvature < 0:
        raise ValueError("curvature must be >= 0")
    rng = np.random.default_rng([seed, 101])
    (h, w), n_hot, (s_lo, s_hi) = SCALE_LAYOUT[scale]
    lat_c = rng.uniform(25.0, 45.0)
    lon_c = rng.uniform(100.0, 140.0)
    grid = ZoneGrid((lat_c - h / 2, lat_c + h / 2, lon_c - w / 2, lon_c + w / 2), rows, cols)
    # hotspots stay away from the border so most trips fit inside the box
    hot = np.column_stack([
        rng.uniform(lat_c - 0.35 * h, lat_c + 0.35 * h, n_hot),
        rng.uniform(lon_c - 0.35 * w, lon_c + 0.35 * w, n_hot),
        np.exp(rng.uniform(np.log(s_lo), np.log(s_hi), n_hot)),
    ])
    n_corr = 3 if scale != Scale.NATIONWIDE else 5
    anchors = hot[rng.choice(n_hot, n_corr, replace=False), :2]
    corridors = np.column_stack([anchors, rng.uniform(0, np.pi, n_corr)])
    return World(int(seed), scale, grid, hot, corridors, float(curvature))


def _lognormal(rng, mean: float, sd: float) -> float:
    s2 = np.log1p((sd / mean) ** 2)
    return float(rng.lognormal(np.log(mean) - s2 / 2, np.sqrt(s2)))


def _departure(rng, mode: TransportMode) -> int:
    if rng.random() < 0.2:
        return int(rng.integers(N_DEPARTURE_BINS))
    peak = 96 if rng.random() < 0.55 else 216  # 08:00 or 18:00
    spread = 12 if mode in (TransportMode.TRAIN, TransportMode.CAR) else 20
    return int(round(rng.normal(peak, spread))) % N_DEPARTURE_BINS


def _pick(rng, weights) -> TransportMode:
    modes = [m for m, _ in weights]
    p = np.array([w for _, w in weights], dtype=np.float64)
    return TransportMode(modes[rng.choice(len(modes), p=p / p.sum())])


def _endpoints(world: World, prof: ModeProfile, rng) -> tuple[np.ndarray, np.ndarray]:
    """Origin and destination in the km plane, both inside the bbox."""
    for _ in range(50):
        length = _lognormal(rng, prof.trip_km, prof.trip_sd)
        if prof.corridor:
            lat, lon, heading = world.corridors[rng.integers(len(world.corridors))]
            direction = np.array([np.sin(heading), np.cos(heading)])
            anchor = world.to_km([lat, lon])
            lateral = np.array([-direction[1], direction[0]]) * rng.normal(0, 0.3)
            o = anchor + direction * rng.normal(0, 0.4 * prof.trip_km) + lateral
            d = o + direction * length * rng.choice([-1.0, 1.0]) + lateral * 0.2
        else:
            lat, lon, spread = world.hotspots[rng.integers(len(world.hotspots))]
            o = world.to_km([lat, lon]) + rng.normal(0, spread, 2)
            angle = rng.uniform(0, 2 * np.pi)
            d = o + length * np.array([np.sin(angle), np.cos(angle)])
        if world.inside(world.to_latlon(o)) and world.inside(world.to_latlon(d)):
            return o, d
    # fall back to a short trip around the centre of the world
    o = rng.normal(0, 0.5, 2)
    return o, o + rng.normal(0, 0.5 * prof.trip_km / np.sqrt(2), 2)


def _shape(o: np.ndarray, d: np.ndarray, bend: float, curvature: float, rng, n: int) -> np.ndarray:
    chord = d - o
    length = np.linalg.norm(chord)
    normal = np.array([-chord[1], chord[0]]) / max(length, 1e-12)
    a1, a2 = rng.normal(0, curvature * bend * length, 2)
    p1 = o + chord / 3 + normal * a1
    p2 = o + 2 * chord / 3 + normal * a2
    u = np.linspace(0.0, 1.0, 400)[:, None]
    curve = (1 - u) ** 3 * o + 3 * (1 - u) ** 2 * u * p1 + 3 * (1 - u) * u ** 2 * p2 + u ** 3 * d
    k = np.arange(1, 4)
    amp = rng.normal(0, curvature * 0.2 * bend * length / k)
    meander = np.sin(np.pi * u * k) @ amp
    curve = curve + meander[:, None] * normal
    return resample_uniform(curve, n)


def sample_trajectory(world: World, rng: np.random.Generator, traj_id: str = "t0", mode=None) -> Trajectory:
    mode = _pick(rng, world.mode_weights) if mode is None else TransportMode.parse(mode)
    prof = world.profile(mode)
    o, d = _endpoints(world, prof, rng)
    n = int(rng.integers(40, 121))
    km = _shape(o, d, prof.bend, world.curvature, rng, n)
    km[1:-1] += rng.normal(0, prof.jitter_km, (n - 2, 2))
    latlon = world.grid.clamp(world.to_latlon(km))
    latlon[0], latlon[-1] = world.to_latlon(o), world.to_latlon(d)
    speed = max(rng.normal(prof.speed_kmh, prof.speed_sd), 0.3 * prof.speed_kmh)
    step_km = haversine_km(latlon[:-1], latlon[1:])
    times = np.concatenate([[0.0], np.cumsum(step_km) / speed * 3600.0])
    zones = world.grid.zone_of(latlon[[0, -1]])
    return Trajectory(traj_id, np.column_stack([latlon, times]), mode, _departure(rng, mode),
                      (int(zones[0]), int(zones[1])))


def sample_dataset(world: World, n: int, rng: np.random.Generator, prefix: str = "t") -> list[Trajectory]:
    if n < 1:
        raise ValueError("n must be >= 1")
    width = max(6, len(str(n)))
    return [sample_trajectory(world, rng, f"{prefix}{i:0{width}d}") for i in range(n)]


def split_ids(ids: list[str], rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[str]]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    perm = rng.permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    pick = lambda idx: [ids[i] for i in sorted(idx)]
    return {"train": pick(perm[:n_train]), "val": pick(perm[n_train:n_train + n_val]),
            "test": pick(perm[n_train + n_val:])}


def split_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".split.json")


def world_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".world.json")


def make_dataset(world: World, n: int, rng: np.random.Generator, path, fractions=(0.8, 0.1, 0.1)):
    """Write ``n`` trajectories to ``path`` (JSONL) plus the split manifest and world description.

    Returns ``(trajectories, split)``.
    """
    trajs = sample_dataset(world, n, rng)
    split = split_ids([t.id for t in trajs], rng, fractions)
    write_jsonl(path, trajs)
    split_path(path).write_text(json.dumps(split, indent=1) + "\n", encoding="utf-8")
    world_path(path).write_text(json.dumps(world.to_dict(), indent=1) + "\n", encoding="utf-8")
    return trajs, split


def load_split(path, trajectories: list[Trajectory]) -> dict[str, list[Trajectory]]:
    """Partition ``trajectories`` by the split manifest next to ``path``; everything is train if absent."""
    manifest = split_path(path)
    if not manifest.exists():
        return {"train": list(trajectories), "val": [], "test": []}
    split = json.loads(manifest.read_text(encoding="utf-8"))
    by_id = {t.id: t for t in trajectories}
    try:
        return {k: [by_id[i] for i in split.get(k, [])] for k in ("train", "val", "test")}
    except KeyError as exc:
        raise ValueError(f"split manifest {manifest} references unknown id {exc}") from None


def load_world(path) -> World | None:
    p = world_path(path)
    if not p.exists():
        return None
    return World.from_dict(json.loads(p.read_text(encoding="utf-8")))
