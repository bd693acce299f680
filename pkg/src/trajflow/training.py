"""Mini-batch training loop shared by the flow and DDPM paradigms."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import NoiseSchedule, ddpm_loss
from .flow import cfm_loss
from .model import Architecture, DataStats, PreparedData, TrainConfig, VectorFieldModel

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class DivergenceError(nn.TrainingAbort):
    pass


@dataclass
class TrainResult:
    model: VectorFieldModel
    optimizer: nn.Adam
    history: list = field(default_factory=list)  # dicts: epoch, step, train_loss, val_loss, lr, ...
    step: int = 0
    epoch: int = 0
    stopped_early: bool = False


def make_loss(cfg: TrainConfig):
    if cfg.paradigm == "flow":
        return lambda model, batch, rng: cfm_loss(model, batch, rng, cfg)
    schedule = NoiseSchedule.linear(cfg.T)
    return lambda model, batch, rng: ddpm_loss(model, batch, rng, cfg, schedule)


def validation_loss(model, data: PreparedData, cfg: TrainConfig, loss_fn, batch_size: int = 1024) -> float:
    rng = np.random.default_rng([cfg.seed, 2])  # same draws every evaluation
    total, n = 0.0, 0
    with nn.no_grad():
        for lo in range(0, len(data), batch_size):
            batch = data.subset(np.arange(lo, min(lo + batch_size, len(data))))
            loss, _ = loss_fn(model, batch, rng)
            total += float(loss.data) * len(batch)
            n += len(batch)
    return total / max(n, 1)


def od_validation_error(model, data: PreparedData) -> float:
    """Mean squared error of the fine-OD head on ``data`` (all samples conditioned)."""
    with nn.no_grad():
        pred = model.od_head(model.encoder(data.cond)).data
    return float(np.mean(np.sum((pred - data.od_target) ** 2, axis=1)))


def train(train_data: PreparedData, val_data: PreparedData | None, cfg: TrainConfig, n_zones: int,
          resume: dict | None = None, progress=None) -> TrainResult:
    """Train a vector-field model.

    ``resume`` may carry ``model``, ``optimizer_state``, ``step``, ``epoch``,
    ``lr`` and ``rng_state`` from a checkpoint; training then continues the
    step counter and random stream where they stopped.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    init_rng = np.random.default_rng([cfg.seed, 0])
    rng = np.random.default_rng([cfg.seed, 1])
    model = VectorFieldModel(Architecture.from_config(cfg, n_zones), init_rng)
    opt = nn.Adam(model.named_parameters(), lr=cfg.lr)
    step = epoch = 0
    if resume:
        model.load_state_dict(resume["model"])
        opt = nn.Adam(model.named_parameters(), lr=resume.get("lr", cfg.lr))
        step, epoch = int(resume["step"]), int(resume.get("epoch", 0))
        if resume.get("optimizer_state"):
            opt.load_state_dict(resume["optimizer_state"], step)
        if resume.get("rng_state"):
            rng.bit_generator.state = resume["rng_state"]
    sched = nn.PlateauScheduler(opt, factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    stopper = nn.EarlyStopping(cfg.early_stop_patience)
    loss_fn = make_loss(cfg)
    result = TrainResult(model, opt, [], step, epoch)
    n = len(train_data)
    t_start = time.perf_counter()
    while epoch < cfg.epochs:
        perm = rng.permutation(n)
        run, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            batch = train_data.subset(perm[lo:lo + cfg.batch_size])
            loss, parts = loss_fn(model, batch, rng)
            value = float(loss.data)
            if value > DIVERGENCE_LOSS:
                raise DivergenceError(f"loss {value:.3g} at step {step} ({parts})")
            loss.backward()
            opt.step()
            step += 1
            run += value * len(batch)
            count += len(batch)
        epoch += 1
        record = {"epoch": epoch, "step": step, "train_loss": run / count, "lr": opt.lr,
                  "seconds": time.perf_counter() - t_start}
        monitored = record["train_loss"]
        if val_data is not None and len(val_data):
            monitored = record["val_loss"] = validation_loss(model, val_data, cfg, loss_fn)
        sched.step(monitored)
        result.history.append(record)
        if progress:
            progress(record)
        if stopper.update(monitored, step):
            result.stopped_early = True
            log.info("early stop at epoch %d (step %d)", epoch, step)
            break
    result.step, result.epoch = step, epoch
    result.rng_state = rng.bit_generator.state
    return result


def write_history_csv(path, history: list[dict]) -> None:
    # wall-clock time stays out so reruns give identical files
    keys = ["epoch", "step", "train_loss", "val_loss", "lr"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for rec in history:
            fh.write(",".join("" if rec.get(k) is None else f"{rec[k]:.10g}" if isinstance(rec[k], float)
                              else str(rec[k]) for k in keys) + "\n")
