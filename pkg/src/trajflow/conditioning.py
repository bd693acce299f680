"""Generation conditions, the Wide&Deep condition encoder and the flow-time embedding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geo import FEATURE_NAMES, N_DEPARTURE_BINS, FeatureScaler, Trajectory, TransportMode, path_stats

N_MODES = len(TransportMode)
N_FREQS = 64
DEFAULT_DROPOUT = 0.1


@dataclass
class ConditionSpec:
    departure_bin: int
    origin_zone: int
    destination_zone: int
    mode: TransportMode
    numeric: dict = field(default_factory=dict)  # raw values keyed by FEATURE_NAMES

    def __post_init__(self):
        self.mode = TransportMode.parse(self.mode)
        unknown = set(self.numeric) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown numeric condition(s): {sorted(unknown)}")
        self.numeric = {k: float(v) for k, v in self.numeric.items()}

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ConditionSpec":
        stats = path_stats(traj)
        return cls(traj.departure_bin, traj.od_zone[0], traj.od_zone[1], traj.mode,
                   {k: getattr(stats, k) for k in FEATURE_NAMES})

    def to_dict(self) -> dict:
        return {"departure_bin": self.departure_bin, "origin_zone": self.origin_zone,
                "destination_zone": self.destination_zone, "mode": self.mode.name,
                "numeric": dict(self.numeric)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSpec":
        try:
            return cls(int(d["departure_bin"]), int(d["origin_zone"]), int(d["destination_zone"]),
                       d["mode"], dict(d.get("numeric", {})))
        except KeyError as exc:
            raise ValueError(f"condition missing field {exc}") from None

    def validate(self, n_zones: int) -> None:
        if not 0 <= self.departure_bin < N_DEPARTURE_BINS:
            raise ValueError(f"departure_bin {self.departure_bin} outside [0, {N_DEPARTURE_BINS})")
        for z in (self.origin_zone, self.destination_zone):
            if not 0 <= z < n_zones:
                raise ValueError(f"zone {z} outside vocabulary [0, {n_zones})")


def read_conditions(path) -> list[ConditionSpec]:
    """Conditions file: a JSON list or JSON Lines of ConditionSpec objects."""
    text = open(path, encoding="utf-8").read().strip()
    if text.startswith("["):
        return [ConditionSpec.from_dict(d) for d in json.loads(text)]
    return [ConditionSpec.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


class NumericSampler:
    """Fills missing numeric conditions from the empirical per-mode training pool.

    A whole feature vector is drawn from one training trajectory of the same
    mode so the scalars stay mutually consistent; user overrides win.
    """

    def __init__(self, values: np.ndarray, modes: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)
        self.modes = np.asarray(modes, dtype=np.int64)

    def resolve(self, spec: ConditionSpec, rng: np.random.Generator) -> np.ndarray:
        if all(k in spec.numeric for k in FEATURE_NAMES):
            return np.array([spec.numeric[k] for k in FEATURE_NAMES])
        pool = np.flatnonzero(self.modes == int(spec.mode))
        if pool.size == 0:
            pool = np.arange(len(self.values))
        out = self.values[rng.choice(pool)].copy()
        for i, k in enumerate(FEATURE_NAMES):
            if k in spec.numeric:
                out[i] = spec.numeric[k]
        return out


@dataclass
class ConditionBatch:
    """Array form of a batch of conditions; ``null`` rows are the unconditional token."""

    numeric: np.ndarray  # (B, 5) standardized
    departure: np.ndarray
    origin: np.ndarray
    destination: np.ndarray
    mode: np.ndarray
    null: np.ndarray  # (B,) bool

    def __len__(self):
        return len(self.mode)

    def subset(self, idx) -> "ConditionBatch":
        return ConditionBatch(self.numeric[idx], self.departure[idx], self.origin[idx],
                              self.destination[idx], self.mode[idx], self.null[idx])

    def with_null(self, null) -> "ConditionBatch":
        return ConditionBatch(self.numeric, self.departure, self.origin, self.destination,
                              self.mode, np.asarray(null, dtype=bool))

    def all_null(self) -> "ConditionBatch":
        return self.with_null(np.ones(len(self), dtype=bool))

    @classmethod
    def from_specs(cls, specs, scaler: FeatureScaler, sampler: NumericSampler | None = None,
                   rng: np.random.Generator | None = None) -> tuple["ConditionBatch", np.ndarray]:
        """Returns the batch and the raw (unstandardized) numeric matrix."""
        raw = []
        for s in specs:
            if sampler is None:
                missing = [k for k in FEATURE_NAMES if k not in s.numeric]
                if missing:
                    raise ValueError(f"numeric conditions {missing} missing and no sampler given")
                raw.append([s.numeric[k] for k in FEATURE_NAMES])
            else:
                raw.append(sampler.resolve(s, rng))
        raw = np.array(raw, dtype=np.float64).reshape(len(specs), len(FEATURE_NAMES))
        ints = lambda attr: np.array([int(getattr(s, attr)) for s in specs], dtype=np.int64)
        batch = cls(scaler.transform(raw), ints("departure_bin"), ints("origin_zone"),
                    ints("destination_zone"), ints("mode"), np.zeros(len(specs), dtype=bool))
        return batch, raw


NULL = None  # condition_dropout's unconditional token


def condition_dropout(spec, p: float, rng: np.random.Generator):
    """Return the null token with probability ``p``, else ``spec`` unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    return NULL if rng.random() < p else spec


def dropout_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    return rng.random(n) < p


class ConditionEncoder(nn.Module):
    """Wide&Deep fusion: LayerNorm(linear(numeric) + MLP(concat(embeddings)))."""

    def __init__(self, n_zones: int, dim: int, hidden: int, rng: np.random.Generator,
                 n_numeric: int = len(FEATURE_NAMES)):
        self.n_zones = n_zones
        self.wide = nn.Dense(n_numeric, dim, rng)
        # last row of every table is the null token
        self.emb_departure = nn.Embedding(N_DEPARTURE_BINS + 1, dim, rng)
        self.emb_origin = nn.Embedding(n_zones + 1, dim, rng)
        self.emb_destination = nn.Embedding(n_zones + 1, dim, rng)
        self.emb_mode = nn.Embedding(N_MODES + 1, dim, rng)
        self.deep1 = nn.Dense(4 * dim, hidden, rng)
        self.deep2 = nn.Dense(hidden, dim, rng)
        self.norm = nn.LayerNorm(dim)

    def _check(self, c: ConditionBatch):
        for arr, n, what in ((c.departure, N_DEPARTURE_BINS, "departure_bin"),
                             (c.origin, self.n_zones, "origin_zone"),
                             (c.destination, self.n_zones, "destination_zone"),
                             (c.mode, N_MODES, "mode")):
            live = arr[~c.null]
            if live.size and (live.min() < 0 or live.max() >= n):
                raise ValueError(f"{what} outside vocabulary [0, {n})")

    def wide_deep(self, c: ConditionBatch) -> tuple[nn.Tensor, nn.Tensor]:
        self._check(c)
        keep = (~c.null).astype(np.float64)[:, None]
        e_wide = nn.mul(self.wide(c.numeric), keep)
        pick = lambda arr, n: np.where(c.null, n, arr)
        emb = nn.concat([
            self.emb_departure(pick(c.departure, N_DEPARTURE_BINS)),
            self.emb_origin(pick(c.origin, self.n_zones)),
            self.emb_destination(pick(c.destination, self.n_zones)),
            self.emb_mode(pick(c.mode, N_MODES)),
        ])
        e_deep = self.deep2(nn.silu(self.deep1(emb)))
        return e_wide, e_deep

    def __call__(self, c: ConditionBatch) -> nn.Tensor:
        e_wide, e_deep = self.wide_deep(c)
        return self.norm(e_wide + e_deep)


def fourier_features(t, n_freqs: int = N_FREQS) -> np.ndarray:
    """``[sin(w t), cos(w t)]`` with ``n_freqs`` log-spaced frequencies in [1, 1e4]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError("flow time must lie in [0, 1]")
    freqs = np.exp(np.linspace(0.0, np.log(1e4), n_freqs))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, rng: np.random.Generator, n_freqs: int = N_FREQS):
        self.n_freqs = n_freqs
        self.fc1 = nn.Dense(2 * n_freqs, dim, rng)
        self.fc2 = nn.Dense(dim, dim, rng)

    def __call__(self, t) -> nn.Tensor:
        return self.fc2(nn.silu(self.fc1(fourier_features(t, self.n_freqs))))
