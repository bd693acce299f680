"""Trajectory similarity and distribution metrics.

DTW and discrete Fréchet run on a precomputed pairwise cost matrix: haversine
km for geographic ``(lat, lon)`` inputs, plain Euclidean otherwise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geo import Trajectory, haversine_km

log = logging.getLogger(__name__)

DEFAULT_BINS = (64, 64)
LAPLACE_ALPHA = 1e-9


def _as_points(seq) -> np.ndarray:
    if isinstance(seq, Trajectory):
        return seq.latlon
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0 or len(arr) == 0:
        raise ValueError("sequence must be non-empty")
    return arr[:, :2]


def cost_matrix(a, b, geographic: bool = False) -> np.ndarray:
    a, b = _as_points(a), _as_points(b)
    if geographic:
        return haversine_km(a[:, None, :], b[None, :, :])
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@njit(cache=True)
def _dtw_dp(c):
    m, n = c.shape
    acc = np.empty((m, n))
    acc[0, 0] = c[0, 0]
    for j in range(1, n):
        acc[0, j] = acc[0, j - 1] + c[0, j]
    for i in range(1, m):
        acc[i, 0] = acc[i - 1, 0] + c[i, 0]
        for j in range(1, n):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = c[i, j] + best
    return acc[m - 1, n - 1]


@njit(cache=True)
def _frechet_dp(c):
    m, n = c.shape
    ca = np.empty((m, n))
    ca[0, 0] = c[0, 0]
    for j in range(1, n):
        ca[0, j] = max(ca[0, j - 1], c[0, j])
    for i in range(1, m):
        ca[i, 0] = max(ca[i - 1, 0], c[i, 0])
        for j in range(1, n):
            best = ca[i - 1, j - 1]
            if ca[i - 1, j] < best:
                best = ca[i - 1, j]
            if ca[i, j - 1] < best:
                best = ca[i, j - 1]
            ca[i, j] = max(c[i, j], best)
    return ca[m - 1, n - 1]


def dtw(a, b, geographic: bool = False) -> float:
    """Dynamic time warping: minimum summed point distance over monotone alignments."""
    return float(_dtw_dp(cost_matrix(a, b, geographic)))


def frechet(a, b, geographic: bool = False) -> float:
    """Discrete Fréchet distance (coupling DP)."""
    return float(_frechet_dp(cost_matrix(a, b, geographic)))


# --- density ----------------------------------------------------------------

@dataclass
class DensityMap:
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    bins: tuple[int, int]
    mass: np.ndarray  # (rows * cols + 1,), last cell collects out-of-bbox points
    empty: bool = False

    @property
    def grid(self) -> np.ndarray:
        r, c = self.bins
        return self.mass[: r * c].reshape(r, c)


def dataset_bbox(*datasets) -> tuple[float, float, float, float]:
    pts = np.concatenate([t.latlon for ds in datasets for t in ds])
    lat0, lon0 = pts.min(axis=0)
    lat1, lon1 = pts.max(axis=0)
    return float(lat0), float(lat1), float(lon0), float(lon1)


def _points_of(dataset) -> np.ndarray:
    chunks = [_as_points(t) for t in dataset]
    return np.concatenate(chunks) if chunks else np.empty((0, 2))


def density_histogram(dataset, bbox, bins=DEFAULT_BINS, alpha: float = LAPLACE_ALPHA) -> DensityMap:
    """Mesh-count spatial density of every point in ``dataset``, Laplace smoothed."""
    rows, cols = (bins, bins) if np.isscalar(bins) else bins
    rows, cols = int(rows), int(cols)
    if rows < 1 or cols < 1:
        raise ValueError("bins must be >= 1 per axis")
    lat0, lat1, lon0, lon1 = map(float, bbox)
    if not (lat1 > lat0 and lon1 > lon0):
        raise ValueError("bbox must be non-degenerate")
    pts = _points_of(dataset)
    counts = np.zeros(rows * cols + 1)
    if len(pts):
        fr = (pts[:, 0] - lat0) / (lat1 - lat0)
        fc = (pts[:, 1] - lon0) / (lon1 - lon0)
        inside = (fr >= 0) & (fr <= 1) & (fc >= 0) & (fc <= 1)
        r = np.minimum((fr[inside] * rows).astype(int), rows - 1)
        c = np.minimum((fc[inside] * cols).astype(int), cols - 1)
        counts[: rows * cols] = np.bincount(r * cols + c, minlength=rows * cols)
        counts[-1] = np.count_nonzero(~inside)
    empty = not len(pts)
    if empty:
        log.warning("density_histogram: empty dataset, returning uniform map")
        counts[: rows * cols] = 1.0
    smoothed = counts + alpha
    return DensityMap((lat0, lat1, lon0, lon1), (rows, cols), smoothed / smoothed.sum(), empty)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits (range [0, 1])."""
    if isinstance(p, DensityMap) and isinstance(q, DensityMap):
        if p.bins != q.bins or not np.allclose(p.bbox, q.bbox):
            raise ValueError("density maps must share bbox and bins")
    p = np.asarray(p.mass if isinstance(p, DensityMap) else p, dtype=np.float64).ravel()
    q = np.asarray(q.mass if isinstance(q, DensityMap) else q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q)))


def density_js(real, generated, bbox=None, bins=DEFAULT_BINS) -> float:
    bbox = bbox if bbox is not None else dataset_bbox(real)
    return js_divergence(density_histogram(real, bbox, bins), density_histogram(generated, bbox, bins))


# --- summary statistics -----------------------------------------------------

def distribution_stats(values) -> dict:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("values must be non-empty")
    p10, p25, p50, p75, p90 = np.percentile(v, [10, 25, 50, 75, 90], method="linear")
    return {"median": float(p50), "iqr": float(p75 - p25), "p10": float(p10), "p90": float(p90)}


@dataclass
class MetricReport:
    density_js: float
    dtw: dict
    frechet: dict
    n_pairs: int

    def to_flat(self) -> dict:
        return {
            "density_js": self.density_js,
            "dtw_med": self.dtw["median"],
            "dtw_iqr": self.dtw["iqr"],
            "dtw_p10": self.dtw["p10"],
            "dtw_p90": self.dtw["p90"],
            "fr_med": self.frechet["median"],
            "fr_iqr": self.frechet["iqr"],
            "fr_p10": self.frechet["p10"],
            "fr_p90": self.frechet["p90"],
            "n_pairs": self.n_pairs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2)

    @classmethod
    def from_flat(cls, d: dict) -> "MetricReport":
        pick = lambda pre: {"median": d[f"{pre}_med"], "iqr": d[f"{pre}_iqr"],
                            "p10": d[f"{pre}_p10"], "p90": d[f"{pre}_p90"]}
        return cls(d["density_js"], pick("dtw"), pick("fr"), int(d["n_pairs"]))


def nearest_distance(query, candidates, metric: str, geographic: bool = True) -> float:
    """Distance from ``query`` to its nearest candidate under ``metric``.

    Candidates are visited in order of an endpoint lower bound and the scan
    stops once the bound reaches the best exact distance found, which cannot
    change the result.
    """
    q = _as_points(query)
    cands = [_as_points(c) for c in candidates]
    if not cands:
        raise ValueError("no candidates")
    firsts = np.array([c[0] for c in cands])
    lasts = np.array([c[-1] for c in cands])
    if geographic:
        d0, d1 = haversine_km(q[0], firsts), haversine_km(q[-1], lasts)
    else:
        d0 = np.linalg.norm(firsts - q[0], axis=1)
        d1 = np.linalg.norm(lasts - q[-1], axis=1)
    if metric == "dtw":
        # two single-point sequences share one alignment cell
        single = np.array([len(q) == 1 and len(c) == 1 for c in cands])
        lb = np.where(single, d0, d0 + d1)
        kernel = _dtw_dp
    elif metric == "frechet":
        lb = np.maximum(d0, d1)
        kernel = _frechet_dp
    else:
        raise ValueError(f"unknown metric {metric!r}")
    best = np.inf
    for i in np.argsort(lb, kind="stable"):
        if lb[i] >= best:
            break
        d = float(kernel(cost_matrix(q, cands[i], geographic)))
        if d < best:
            best = d
    return best


def evaluate(real, generated, bbox=None, bins=DEFAULT_BINS, geographic: bool = True) -> MetricReport:
    """Compare a generated set against real trajectories.

    Each generated trajectory contributes its distance to the nearest real one,
    separately for DTW and Fréchet.
    """
    if not len(real) or not len(generated):
        raise ValueError("both datasets must be non-empty")
    bbox = bbox if bbox is not None else dataset_bbox(real)
    d = [nearest_distance(g, real, "dtw", geographic) for g in generated]
    f = [nearest_distance(g, real, "frechet", geographic) for g in generated]
    js = js_divergence(density_histogram(real, bbox, bins), density_histogram(generated, bbox, bins))
    return MetricReport(js, distribution_stats(sorted(d)), distribution_stats(sorted(f)), len(generated))
