"""Conditional flow matching: straight-path targets, the training loss, Euler sampling and generation."""

from __future__ import annotations

import numpy as np

from . import nn
from .conditioning import ConditionBatch, ConditionSpec, dropout_mask
from .geo import Trajectory, ZoneGrid, arc_length, resample_uniform
from .model import DataStats, PreparedData, TrainConfig, VectorFieldModel


class DegenerateSampleError(RuntimeError):
    pass


def straight_path_point(x0, x1, t):
    """Point on the straight path at time ``t`` and the (constant) target field ``x1 - x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1, x1 - x0


def masked_sq_error(pred: nn.Tensor, target: np.ndarray, mask: np.ndarray) -> nn.Tensor:
    """Mean over valid tokens of the squared 2-d error; ``mask`` is (B, K)."""
    coord_mask = np.repeat(mask, 2, axis=1)
    n_valid = max(float(mask.sum()), 1.0)
    diff = pred - target
    return nn.mul(nn.total(nn.mul(nn.square(diff), coord_mask)), 1.0 / n_valid)


def od_loss(model: VectorFieldModel, e_c: nn.Tensor, target: np.ndarray, keep: np.ndarray) -> nn.Tensor:
    """Mean squared error of the fine-OD head over conditioned (non-dropped) samples."""
    n = float(keep.sum())
    if n == 0:
        return nn.Tensor(0.0)
    pred = model.od_head(e_c)
    return nn.mul(nn.total(nn.mul(nn.square(pred - target), keep[:, None].astype(float))), 1.0 / n)


def regularizers(x_hat: nn.Tensor, K: int, smooth_w: float, bound_w: float) -> nn.Tensor | None:
    """Second-difference smoothness and [-1, 1] hinge on predicted keypoints."""
    terms = []
    b = x_hat.shape[0]
    if smooth_w > 0 and K >= 3:
        d2 = nn.cols(x_hat, 4, 2 * K) - nn.mul(nn.cols(x_hat, 2, 2 * K - 2), 2.0) + nn.cols(x_hat, 0, 2 * K - 4)
        terms.append(nn.mul(nn.total(nn.square(d2)), smooth_w / (b * (K - 2))))
    if bound_w > 0:
        over = nn.relu(x_hat - 1.0) + nn.relu(-x_hat - 1.0)
        terms.append(nn.mul(nn.total(over), bound_w / (b * K)))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def cfm_loss(model: VectorFieldModel, batch: PreparedData, rng: np.random.Generator, cfg: TrainConfig,
             noise: tuple | None = None) -> tuple[nn.Tensor, dict]:
    """Flow-matching regression plus the auxiliary fine-OD loss.

    ``noise`` optionally fixes ``(t, x0, dropped)`` instead of drawing them
    from ``rng``.
    """
    b = len(batch)
    if noise is None:
        t = rng.random(b)
        x0 = rng.standard_normal(batch.x1.shape)
        dropped = dropout_mask(b, cfg.cond_dropout, rng)
    else:
        t, x0, dropped = (np.asarray(a) for a in noise)
    xt, u = straight_path_point(x0, batch.x1, t)
    cond = batch.cond.with_null(dropped)
    e_c = model.encoder(cond)
    v = model.forward(xt, t, cond, e_c=e_c)
    fm = masked_sq_error(v, u, batch.mask)
    loss = fm
    parts = {"fm": float(fm.data)}
    if cfg.lambda_od > 0:
        aux = od_loss(model, e_c, batch.od_target, ~np.asarray(dropped, dtype=bool))
        loss = loss + nn.mul(aux, cfg.lambda_od)
        parts["od"] = float(aux.data)
    reg = regularizers(nn.as_tensor(xt) + nn.mul(v, (1.0 - t)[:, None]), cfg.K, cfg.smooth_w, cfg.bound_w)
    if reg is not None:
        loss = loss + reg
        parts["reg"] = float(reg.data)
    if not np.isfinite(loss.data):
        raise nn.TrainingAbort(f"non-finite loss {parts}")
    return loss, parts


# --- sampling -------------------------------------------------------------------

def guided_field(v_cond: np.ndarray, v_uncond: np.ndarray | None, w: float) -> np.ndarray:
    """Classifier-free guidance: ``(1 + w) v_cond - w v_uncond``."""
    if w == 0 or v_uncond is None:
        return v_cond
    return (1.0 + w) * v_cond - w * v_uncond


def euler_integrate(field, x0: np.ndarray, steps: int, guidance_w: float = 0.0) -> np.ndarray:
    """Integrate dx/dt = field(x, t, conditional) from t=0 to 1 with uniform Euler steps.

    ``field(x, t, conditional: bool)`` returns the velocity; the unconditional
    branch is only evaluated when ``guidance_w`` is non-zero.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if guidance_w < 0:
        raise ValueError("guidance weight must be >= 0")
    x = np.array(x0, dtype=np.float64)
    if steps == 0:
        return x
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        v = field(x, t, True)
        if guidance_w:
            v = guided_field(v, field(x, t, False), guidance_w)
        x = x + dt * v
    return x


def model_field(model: VectorFieldModel, cond: ConditionBatch):
    with nn.no_grad():
        e_c = model.encoder(cond)
        e_null = model.encoder(cond.all_null())

    def field(x, t, conditional):
        with nn.no_grad():
            return model.forward(x, t, cond, e_c=e_c if conditional else e_null).data

    return field, e_c


def euler_sample(model: VectorFieldModel, cond: ConditionBatch, steps: int = 10, guidance_w: float = 0.0,
                 rng: np.random.Generator | None = None, x0: np.ndarray | None = None):
    """Sample normalized keypoints for a batch of conditions.

    Returns ``(keypoints (B, K, 2), od_output (B, 6))``.
    """
    rng = rng or np.random.default_rng()
    if x0 is None:
        x0 = rng.standard_normal((len(cond), model.dim))
    field, e_c = model_field(model, cond)
    x1 = euler_integrate(field, x0, steps, guidance_w)
    with nn.no_grad():
        od = model.od_head(e_c).data
    return x1.reshape(len(cond), model.arch.K, 2), od


# --- generation -------------------------------------------------------------------

def place_path(path: np.ndarray, origin: np.ndarray, destination: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Map a normalized path to lat/lon so that its ends land on ``origin``/``destination``.

    The per-axis ``scale`` fixes the shape's size, the offset is the
    least-squares fit of both ends, and a residual correction blended
    linearly along arc length moves the ends exactly onto the targets.
    """
    geo = path * scale
    offset = 0.5 * ((origin - geo[0]) + (destination - geo[-1]))
    geo = geo + offset
    s = arc_length(path)
    lam = (s / s[-1])[:, None] if s[-1] > 0 else np.linspace(0.0, 1.0, len(path))[:, None]
    geo = geo + (1.0 - lam) * (origin - geo[0]) + lam * (destination - geo[-1])
    geo[0], geo[-1] = origin, destination
    return geo


def decode_samples(keypoints: np.ndarray, od: np.ndarray, cond: ConditionBatch, raw_numeric: np.ndarray,
                   stats: DataStats, L: int, ids: list[str]) -> list[Trajectory]:
    """Turn sampled keypoints plus OD-head output into geographic trajectories."""
    grid: ZoneGrid = stats.grid
    out = []
    scales = np.exp(stats.log_scale.inverse(od[:, 4:6]))
    elapsed_idx = 2  # FEATURE_NAMES.index("elapsed_time")
    for i in range(len(keypoints)):
        path = resample_uniform(keypoints[i], L)
        origin = grid.from_local(cond.origin[i], np.clip(od[i, 0:2], -1, 1))[0]
        dest = grid.from_local(cond.destination[i], np.clip(od[i, 2:4], -1, 1))[0]
        geo = grid.clamp(place_path(path, origin, dest, scales[i]))
        elapsed = max(float(raw_numeric[i, elapsed_idx]), 1.0)
        times = np.linspace(0.0, elapsed, L)
        out.append(Trajectory(ids[i], np.column_stack([geo, times]), int(cond.mode[i]),
                              int(cond.departure[i]), (int(cond.origin[i]), int(cond.destination[i]))))
    return out


def _degenerate(kp: np.ndarray) -> np.ndarray:
    return np.all(np.ptp(kp, axis=1) == 0, axis=1)


def generate_batch(model: VectorFieldModel, stats: DataStats, specs: list[ConditionSpec], L: int = 120,
                   steps: int = 10, guidance_w: float = 0.0, rng: np.random.Generator | None = None,
                   numeric_sampler=None, sample=None) -> list[Trajectory]:
    """Generate one trajectory per condition.

    ``sample(model, cond, rng) -> (keypoints, od)`` replaces the Euler flow
    sampler (the diffusion baseline plugs in here).
    """
    rng = rng or np.random.default_rng()
    for s in specs:
        s.validate(stats.grid.n_zones)
    if sample is None:
        sample = lambda m, c, r: euler_sample(m, c, steps, guidance_w, r)
    cond, raw = ConditionBatch.from_specs(specs, stats.numeric, numeric_sampler or stats.sampler, rng)
    kp, od = sample(model, cond, rng)
    bad = _degenerate(kp)
    if bad.any():
        kp2, _ = sample(model, cond.subset(np.flatnonzero(bad)), rng)
        kp[bad] = kp2
        if _degenerate(kp).any():
            raise DegenerateSampleError("sampled path collapsed to a single point twice")
    ids = [rng.bytes(8).hex() for _ in specs]
    return decode_samples(kp, od, cond, raw, stats, L, ids)


def generate(model, stats, spec: ConditionSpec, L: int = 120, steps: int = 10, guidance_w: float = 0.0,
             rng=None) -> Trajectory:
    return generate_batch(model, stats, [spec], L, steps, guidance_w, rng)[0]
