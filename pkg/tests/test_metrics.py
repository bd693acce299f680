import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import delannoy, dtw_brute, frechet_brute, js_oracle, percentile_inclusive, warping_paths
from trajflow.geo import Trajectory
from trajflow.metrics import (
    MetricReport,
    density_histogram,
    density_js,
    distribution_stats,
    dtw,
    evaluate,
    frechet,
    js_divergence,
    nearest_distance,
)

seqs = arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-10, 10, width=32))


def traj(latlon, i=0):
    latlon = np.asarray(latlon, float)
    return Trajectory(f"t{i}", np.column_stack([latlon, np.arange(len(latlon), dtype=float)]), "CAR", 0, (0, 0))


def test_warping_path_count():
    for m in range(1, 6):
        for n in range(1, 6):
            assert len(warping_paths(m, n)) == delannoy(m - 1, n - 1)


class TestDistances:
    def test_examples(self):
        assert dtw([(0, 0)], [(3, 4)]) == 5.0
        assert dtw([(0, 0), (1, 0)], [(0, 0), (1, 0), (2, 0)]) == 1.0
        assert frechet([(0, 0), (2, 0)], [(0, 1), (2, 1)]) == 1.0
        a = np.random.default_rng(0).normal(size=(7, 2))
        assert dtw(a, a) == 0.0 and frechet(a, a) == 0.0

    def test_reversed_not_better(self):
        a = np.column_stack([np.linspace(0, 5, 8), np.zeros(8)])
        b = a + [0.0, 0.3]
        assert frechet(a, b[::-1]) >= frechet(a, b)

    def test_empty(self):
        with pytest.raises(ValueError):
            dtw(np.empty((0, 2)), [(0, 0)])
        with pytest.raises(ValueError):
            frechet([(0, 0)], np.empty((0, 2)))

    @settings(max_examples=300, deadline=None)
    @given(seqs, seqs)
    def test_match_brute_force(self, a, b):
        assert dtw(a, b) == dtw_brute(a.tolist(), b.tolist())
        assert frechet(a, b) == frechet_brute(a.tolist(), b.tolist())

    @settings(max_examples=100, deadline=None)
    @given(seqs, seqs)
    def test_symmetry_and_bounds(self, a, b):
        assert dtw(a, b) == pytest.approx(dtw(b, a), rel=1e-12, abs=1e-12)
        assert frechet(a, b) == frechet(b, a)
        ends = max(np.linalg.norm(a[0] - b[0]), np.linalg.norm(a[-1] - b[-1]))
        assert frechet(a, b) >= ends - 1e-12
        assert dtw(a, b) >= frechet(a, b) - 1e-12

    def test_geographic_km(self):
        a = traj([[35.0, 139.0], [35.01, 139.0]])
        b = traj([[35.0, 139.0], [35.0, 139.0]])
        assert frechet(a, b, geographic=True) == pytest.approx(1.11195, rel=1e-4)


class TestDensity:
    bbox = (0.0, 1.0, 0.0, 1.0)

    def test_single_cell(self):
        d = density_histogram([traj([[0.1, 0.1], [0.11, 0.12]])], self.bbox, (4, 4))
        assert d.grid[0, 0] == pytest.approx(1.0, abs=1e-8)
        assert d.mass.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(d.mass >= 0)

    def test_overflow_cell(self):
        d = density_histogram([traj([[0.1, 0.1], [5.0, 5.0]])], self.bbox, (2, 2))
        assert d.mass[-1] == pytest.approx(0.5, abs=1e-8)

    def test_uniform_large_n(self):
        rng = np.random.default_rng(0)
        pts = rng.random((1_000_000, 2))
        d = density_histogram([pts], self.bbox, (8, 8))
        assert d.grid.max() / d.grid.min() < 1.1

    def test_deterministic_and_empty(self):
        data = [traj(np.random.default_rng(1).random((20, 2)))]
        assert np.array_equal(density_histogram(data, self.bbox).mass, density_histogram(data, self.bbox).mass)
        empty = density_histogram([], self.bbox, (2, 2))
        assert empty.empty and np.allclose(empty.grid, 0.25, atol=1e-6)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            density_histogram([], (0, 0, 0, 1))
        with pytest.raises(ValueError):
            density_histogram([], self.bbox, (0, 3))


class TestJs:
    def test_examples(self):
        assert js_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.31128, abs=1e-5)
        assert js_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
        assert js_divergence([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_oracle_and_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p, q = rng.random(10), rng.random(10)
            p[rng.random(10) < 0.3] = 0
            p, q = p / p.sum(), q / q.sum()
            assert js_divergence(p, q) == pytest.approx(js_oracle(p, q), abs=1e-12)
            assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), abs=1e-15)
            assert 0 <= js_divergence(p, q) <= 1

    def test_mismatch(self):
        with pytest.raises(ValueError):
            js_divergence([0.5, 0.5], [1.0])
        a = density_histogram([], (0, 1, 0, 1), (2, 2))
        b = density_histogram([], (0, 1, 0, 1), (3, 3))
        with pytest.raises(ValueError):
            js_divergence(a, b)

    def test_density_js_self(self):
        data = [traj(np.random.default_rng(i).random((30, 2)), i) for i in range(5)]
        assert density_js(data, data) == 0.0


class TestStats:
    def test_examples(self):
        s = distribution_stats([1, 2, 3, 4, 5])
        assert s["median"] == 3 and s["p10"] == pytest.approx(1.4) and s["p90"] == pytest.approx(4.6)
        assert distribution_stats([2.5] * 7) == {"median": 2.5, "iqr": 0.0, "p10": 2.5, "p90": 2.5}
        assert distribution_stats([7.0]) == {"median": 7.0, "iqr": 0.0, "p10": 7.0, "p90": 7.0}
        with pytest.raises(ValueError):
            distribution_stats([])

    def test_oracle(self):
        v = np.random.default_rng(3).exponential(size=37)
        s = distribution_stats(v)
        assert s["p10"] == pytest.approx(percentile_inclusive(v, 10))
        assert s["iqr"] == pytest.approx(percentile_inclusive(v, 75) - percentile_inclusive(v, 25))
        assert s["p10"] <= s["median"] <= s["p90"]


class TestEvaluate:
    def data(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        return [traj(35 + 0.3 * np.cumsum(rng.normal(0, 0.02, (25, 2)), axis=0) + [0, 104], i) for i in range(n)]

    def test_self(self):
        real = self.data()
        r = evaluate(real, real)
        assert r.dtw["median"] == 0 and r.frechet["median"] == 0 and r.density_js == 0 and r.n_pairs == 6

    def test_nearest_is_min(self):
        real = self.data(2)
        g = self.data(1, seed=9)[0]
        for metric, fn in (("dtw", dtw), ("frechet", frechet)):
            want = min(fn(g, r, geographic=True) for r in real)
            assert nearest_distance(g, real, metric) == want

    def test_pruning_is_exact(self):
        real = self.data(40, seed=1)
        gen = self.data(10, seed=2)
        for g in gen:
            for metric, fn in (("dtw", dtw), ("frechet", frechet)):
                assert nearest_distance(g, real, metric) == min(fn(g, r, geographic=True) for r in real)
        with pytest.raises(ValueError):
            nearest_distance(gen[0], real, "euclid")

    def test_shift_increases(self):
        real = self.data()
        shifted = [traj(t.latlon + [1.0, 0.0], i) for i, t in enumerate(real)]
        base, moved = evaluate(real, self.data(6, seed=5)), evaluate(real, shifted)
        assert moved.dtw["median"] > 0 and moved.frechet["p10"] > 0
        same = evaluate(real, real)
        for k in ("median", "iqr", "p10", "p90"):
            if k != "iqr":
                assert moved.dtw[k] > same.dtw[k] and moved.frechet[k] > same.frechet[k]
        assert base.n_pairs == 6

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([], self.data(1))

    def test_report_schema(self):
        r = evaluate(self.data(), self.data(3, seed=4))
        flat = json.loads(r.to_json())
        assert list(flat) == ["density_js", "dtw_med", "dtw_iqr", "dtw_p10", "dtw_p90",
                              "fr_med", "fr_iqr", "fr_p10", "fr_p90", "n_pairs"]
        assert MetricReport.from_flat(flat) == r
