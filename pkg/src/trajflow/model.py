"""The conditional vector-field network, training configuration, data preparation and checkpoints."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .conditioning import ConditionBatch, ConditionEncoder, NumericSampler, TimeEmbedding
from .geo import FEATURE_NAMES, FeatureScaler, Trajectory, ZoneGrid, normalize_trajectory, path_stats
from .harmonize import rdp_to_k

# --- configuration ------------------------------------------------------------

PARADIGMS = ("flow", "ddpm")


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    epochs: int = 500
    K: int = 10
    L: int = 120
    blocks: int = 6
    width: int = 256
    control_dim: int = 128
    lambda_od: float = 1.0
    cond_dropout: float = 0.1
    smooth_w: float = 0.0
    bound_w: float = 0.0
    seed: int = 0
    early_stop_patience: int = 5000
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    paradigm: str = "flow"
    T: int = 300
    sample_steps: int = 10

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        for k in ("batch_size", "epochs", "K", "L", "blocks", "width", "control_dim", "T", "sample_steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must be in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
            except ValueError:
                raise ValueError(f"config line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


@dataclass(frozen=True)
class Architecture:
    K: int
    width: int
    blocks: int
    control_dim: int
    n_zones: int
    cond_hidden: int = 512

    @classmethod
    def from_config(cls, cfg: TrainConfig, n_zones: int) -> "Architecture":
        return cls(cfg.K, cfg.width, cfg.blocks, cfg.control_dim, n_zones)


# --- network --------------------------------------------------------------------

OD_DIM = 6  # origin (2) and destination (2) inside their zones, log frame scale (2)


class ResBlock(nn.Module):
    def __init__(self, width: int, control_dim: int, rng):
        self.fc1 = nn.Dense(width, width, rng)
        self.fc2 = nn.Dense(width, width, rng)
        self.A = nn.Dense(control_dim, width, rng, bias=False)

    def __call__(self, h, control):
        f = h + self.fc2(nn.silu(self.fc1(h)))
        return f + self.A(control)


class VectorFieldModel(nn.Module):
    """v(x, t, condition) over flattened K x 2 keypoints, plus the fine-OD head."""

    def __init__(self, arch: Architecture, rng: np.random.Generator):
        self.arch = arch
        dim = 2 * arch.K
        self.encoder = ConditionEncoder(arch.n_zones, arch.control_dim, arch.cond_hidden, rng)
        self.time = TimeEmbedding(arch.control_dim, rng)
        self.inp = nn.Dense(dim, arch.width, rng)
        self.blocks = [ResBlock(arch.width, arch.control_dim, rng) for _ in range(arch.blocks)]
        self.out = nn.Dense(arch.width, dim, rng)
        self.od_hidden = nn.Dense(arch.control_dim, arch.control_dim, rng)
        self.od_pos = nn.Dense(arch.control_dim, 4, rng)
        self.od_scale = nn.Dense(arch.control_dim, 2, rng)

    @property
    def dim(self) -> int:
        return 2 * self.arch.K

    def shapes(self) -> dict:
        return {k: p.shape for k, p in self.named_parameters()}

    def architecture_hash(self) -> str:
        return nn.architecture_hash(dataclasses.asdict(self.arch), self.shapes())

    def forward(self, x, t, cond: ConditionBatch, e_c: nn.Tensor | None = None) -> nn.Tensor:
        x = nn.as_tensor(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        if e_c is None:
            e_c = self.encoder(cond)
        control = e_c + self.time(t)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, control)
        return self.out(nn.silu(h))

    __call__ = forward

    def od_head(self, e_c: nn.Tensor) -> nn.Tensor:
        h = nn.silu(self.od_hidden(e_c))
        return nn.concat([nn.tanh(self.od_pos(h)), self.od_scale(h)])


# --- data preparation --------------------------------------------------------

@dataclass
class DataStats:
    """Dataset-level quantities a trained model needs at generation time."""

    numeric: FeatureScaler
    log_scale: FeatureScaler
    grid: ZoneGrid
    pool_numeric: np.ndarray  # raw training features, for NumericSampler
    pool_mode: np.ndarray

    @property
    def sampler(self) -> NumericSampler:
        return NumericSampler(self.pool_numeric, self.pool_mode)

    def header(self) -> dict:
        return {"numeric": self.numeric.to_dict(), "log_scale": self.log_scale.to_dict(),
                "grid": self.grid.to_dict()}

    def arrays(self) -> dict:
        return {"stats.pool_numeric": self.pool_numeric, "stats.pool_mode": self.pool_mode}

    @classmethod
    def restore(cls, header: dict, arrays: dict) -> "DataStats":
        return cls(FeatureScaler.from_dict(header["numeric"]), FeatureScaler.from_dict(header["log_scale"]),
                   ZoneGrid.from_dict(header["grid"]), arrays["stats.pool_numeric"],
                   arrays["stats.pool_mode"].astype(np.int64))


@dataclass
class PreparedData:
    x1: np.ndarray  # (N, 2K) normalized keypoints
    mask: np.ndarray  # (N, K) token validity
    cond: ConditionBatch
    od_target: np.ndarray  # (N, 6)
    raw_numeric: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.x1)

    def subset(self, idx) -> "PreparedData":
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedData(self.x1[idx], self.mask[idx], self.cond.subset(idx), self.od_target[idx],
                            self.raw_numeric[idx], [self.ids[i] for i in idx] if self.ids else [])


def keypoints(traj: Trajectory, K: int) -> tuple[np.ndarray, np.ndarray]:
    """RDP keypoints (K, 2) in the trajectory's own normalized frame, plus log frame scale."""
    path, frame = normalize_trajectory(traj)
    return rdp_to_k(path, K), np.log(frame.scale)


def prepare(trajectories, K: int, grid: ZoneGrid, stats: DataStats | None = None) -> tuple[PreparedData, DataStats]:
    """Harmonize trajectories into training tensors; fits :class:`DataStats` when not given."""
    if not trajectories:
        raise ValueError("empty dataset")
    x1, logs, raw, od_local, cats = [], [], [], [], []
    for traj in trajectories:
        kp, log_scale = keypoints(traj, K)
        x1.append(kp.reshape(-1))
        logs.append(log_scale)
        raw.append(path_stats(traj).as_array())
        o, d = traj.od_zone
        od_local.append(np.concatenate([grid.to_local(o, traj.latlon[0])[0], grid.to_local(d, traj.latlon[-1])[0]]))
        cats.append((traj.departure_bin, o, d, int(traj.mode)))
    x1, logs, raw, od_local = map(np.array, (x1, logs, raw, od_local))
    cats = np.array(cats, dtype=np.int64)
    if stats is None:
        stats = DataStats(FeatureScaler.fit(raw), FeatureScaler.fit(logs), grid, raw.copy(), cats[:, 3].copy())
    cond = ConditionBatch(stats.numeric.transform(raw), cats[:, 0], cats[:, 1], cats[:, 2], cats[:, 3],
                          np.zeros(len(cats), dtype=bool))
    od_target = np.concatenate([np.clip(od_local, -1.0, 1.0), stats.log_scale.transform(logs)], axis=1)
    mask = np.ones((len(x1), K))
    return PreparedData(x1, mask, cond, od_target, raw, [t.id for t in trajectories]), stats


# --- checkpoints ---------------------------------------------------------------

def save_model(path, model: VectorFieldModel, stats: DataStats, config: TrainConfig, step: int,
               epoch: int = 0, optimizer: nn.Adam | None = None, extra: dict | None = None) -> None:
    header = {
        "architecture_hash": model.architecture_hash(),
        "architecture": dataclasses.asdict(model.arch),
        "rng_seed": config.seed,
        "step": int(step),
        "epoch": int(epoch),
        "config": dataclasses.asdict(config),
        "stats": stats.header(),
        **(extra or {}),
    }
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    arrays.update(stats.arrays())
    if optimizer is not None:
        header["lr"] = optimizer.lr
        arrays.update(optimizer.state_dict())
    nn.save_checkpoint(path, header, arrays)


def load_model(path, expect_hash: str | None = None):
    """Returns ``(model, stats, config, header, arrays)``."""
    header, arrays = nn.load_checkpoint(path, expect_hash)
    arch = Architecture(**header["architecture"])
    model = VectorFieldModel(arch, np.random.default_rng(0))
    if model.architecture_hash() != header["architecture_hash"]:
        raise nn.CheckpointError(f"{path}: architecture hash does not match its parameters")
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    stats = DataStats.restore(header["stats"], arrays)
    config = TrainConfig(**header["config"])
    return model, stats, config, header, arrays


