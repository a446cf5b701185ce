import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import cylinder_surface_samples, mesh_distance, stats_oracle
from optiacoustic.errors import ConfigurationError, EmptyMapError
from optiacoustic.evaluation import EvalBounds, summarize, voxel_errors, write_distances_csv
from optiacoustic.gpmap import CellBelief, OccupancyMap
from optiacoustic.simulator import Cylinder, Plane, Scene

WIDE = EvalBounds((-5, -5, -5), (5, 5, 5))
distances = st.lists(st.floats(0.0, 0.5, allow_nan=False), min_size=1, max_size=200)


def occupied_map(indices, resolution=0.025, origin=(0.0, 0.0, 0.0)):
    omap = OccupancyMap(resolution, origin)
    for key in map(tuple, np.asarray(indices, dtype=np.int64).tolist()):
        omap.cells[key] = CellBelief(1.0, 0.001, 1)
    return omap


class TestVoxelErrors:
    def test_single_voxel(self):
        scene = Scene([Plane([0, 0, 0], [0, 0, 1], (10.0, 10.0))])
        omap = occupied_map([[0, 0, 0]], origin=(-0.0125, -0.0125, 0.0875))
        d = voxel_errors(omap, scene, WIDE)
        assert d.shape == (1,) and d[0] == pytest.approx(0.10, abs=1e-15)

    def test_surface_voxels_quantization_bound(self):
        cyl = Cylinder([0.0, 0.0, -0.5], [0, 0, 1], 0.05, 1.0)
        omap = occupied_map(np.unique(OccupancyMap().index_of(cyl.surface_samples(0.002)), axis=0))
        d = voxel_errors(omap, Scene([cyl]), WIDE)
        assert d.max() <= math.sqrt(3) / 2 * 0.025

    def test_mesh_oracle(self):
        pitch = 0.005
        cyl = Cylinder([0.0, 0.0, -0.5], [0, 0, 1], 0.2, 0.3)
        rng = np.random.default_rng(0)
        idx = rng.integers(-16, 16, (2000, 3))
        omap = occupied_map(idx)
        d = voxel_errors(omap, Scene([cyl]), WIDE)
        samples = cylinder_surface_samples(np.array([0, 0, -0.35]), np.array([0, 0, 1.0]), 0.2, 0.15, pitch)
        oracle = mesh_distance(samples, omap.occupied_centers())
        assert np.max(np.abs(d - oracle)) < pitch

    def test_bbox_filters(self):
        scene = Scene([Plane([0, 0, 0], [0, 0, 1], (10.0, 10.0))])
        omap = occupied_map([[0, 0, 0], [100, 0, 0]])
        assert voxel_errors(omap, scene, EvalBounds((-1, -1, -1), (1, 1, 1))).shape == (1,)
        with pytest.raises(EmptyMapError):
            voxel_errors(omap, scene, EvalBounds((3, 3, 3), (4, 4, 4)))
        with pytest.raises(EmptyMapError):
            voxel_errors(OccupancyMap(), scene, WIDE)

    def test_unoccupied_cells_ignored(self):
        omap = occupied_map([[0, 0, 0]])
        omap.cells[(5, 5, 5)] = CellBelief(0.0, 0.1, 1)
        assert voxel_errors(omap, Scene([Plane([0, 0, 0], [0, 0, 1], (1.0, 1.0))]), WIDE).shape == (1,)

    @given(st.floats(0.05, 1.0), st.floats(0.05, 1.0))
    def test_shrinking_bbox_never_adds_voxels(self, outer, shrink):
        rng = np.random.default_rng(1)
        omap = occupied_map(rng.integers(-40, 40, (300, 3)))
        scene = Scene([Plane([0, 0, 0], [0, 0, 1], (1.0, 1.0))])
        inner = outer * shrink

        def count(h):
            try:
                return len(voxel_errors(omap, scene, EvalBounds((-h,) * 3, (h,) * 3)))
            except EmptyMapError:
                return 0

        assert count(inner) <= count(outer)


class TestSummarize:
    def test_zero_distances(self):
        r = summarize([0.0, 0.0, 0.0], EvalBounds())
        assert (r.mae, r.rmse, r.sd, r.precision) == (0.0, 0.0, 0.0, 100.0)

    def test_two_values(self):
        r = summarize([0.01, 0.03], EvalBounds())
        assert r.mae == pytest.approx(2.0, abs=1e-12)
        assert (r.precision, r.inlier_voxels, r.total_voxels) == (100.0, 2, 2)

    def test_statistics_oracle(self):
        d = np.random.default_rng(2).exponential(0.02, 1000)
        r = summarize(d, EvalBounds())
        mae, rmse, sd, precision, inliers = stats_oracle(d, 0.05)
        assert abs(r.mae - mae) < 1e-12 and abs(r.rmse - rmse) < 1e-12 and abs(r.sd - sd) < 1e-12
        assert r.precision == pytest.approx(precision, abs=1e-12) and r.inlier_voxels == inliers

    def test_empty(self):
        with pytest.raises(EmptyMapError):
            summarize([], EvalBounds())

    def test_timings(self):
        r = summarize([0.01], EvalBounds(), timings=[0.1, 0.3])
        assert r.mean_update_time == pytest.approx(0.2) and r.update_time_sd == pytest.approx(0.1)
        assert "mean_update_time" not in summarize([0.01], EvalBounds()).as_text()

    @given(distances)
    def test_report_invariants(self, d):
        r = summarize(d, EvalBounds())
        assert r.mae >= 0 and r.sd >= 0 and r.rmse >= r.mae * (1 - 1e-12)
        assert 0 <= r.precision <= 100 and r.inlier_voxels <= r.total_voxels

    @given(distances, st.floats(0.001, 0.2), st.floats(0.0, 0.2))
    def test_threshold_monotone(self, d, t, extra):
        a = summarize(d, EvalBounds(inlier_threshold=t))
        b = summarize(d, EvalBounds(inlier_threshold=t + extra))
        assert b.precision >= a.precision and b.inlier_voxels >= a.inlier_voxels

    @given(distances, st.randoms())
    def test_permutation_invariant(self, d, rnd):
        shuffled = list(d)
        rnd.shuffle(shuffled)
        assert summarize(d, EvalBounds()) == summarize(shuffled, EvalBounds())

    def test_bounds_invariants(self):
        with pytest.raises(ConfigurationError):
            EvalBounds((0, 0, 0), (1, 0, 1))
        with pytest.raises(ConfigurationError):
            EvalBounds(inlier_threshold=0.0)


class TestOutputs:
    def test_text_and_csv(self):
        r = summarize([0.01, 0.03, 0.07], EvalBounds())
        lines = r.as_text().splitlines()
        assert lines[0].startswith("mae: ") and len(lines) == 6
        assert r.csv_header().split(",") == ["mae", "rmse", "sd", "precision", "inlier_voxels", "total_voxels"]
        assert [float(v) for v in r.csv_row().split(",")][4:] == [2.0, 3.0]

    def test_distances_csv(self, tmp_path):
        scene = Scene([Plane([0, 0, 0], [0, 0, 1], (10.0, 10.0))])
        omap = occupied_map([[0, 0, 0], [0, 0, 4]], origin=(-0.0125, -0.0125, -0.0125))
        write_distances_csv(tmp_path / "d.csv", omap, scene, WIDE)
        rows = (tmp_path / "d.csv").read_text().splitlines()
        assert rows[0] == "x,y,z,distance"
        assert [float(r.split(",")[3]) for r in rows[1:]] == pytest.approx([0.0, 0.1], abs=1e-15)
