import filecmp
import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from optiacoustic.cli import main
from optiacoustic.config import PipelineConfig
from optiacoustic.errors import DataError
from optiacoustic.evaluation import summarize, voxel_errors
from optiacoustic.features import read_sonar_frame, soca_cfar
from optiacoustic.fusion import STEREO, ConfidencePointCloud, read_pgm, stereo_match
from optiacoustic.gpmap import CellBelief, OccupancyMap, export_map, import_map, update_map
from optiacoustic.pipeline import Record, SequenceManifest, map_sequence, read_manifest, write_manifest
from optiacoustic.simulator import load_scene

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TANK = str(CONFIGS / "tank.yaml")
# coarse sensor grids keep the end-to-end runs fast
SMALL = ["sonar.range_bins=160", "sonar.bearing_bins=96", "sim.elevation_samples_per_beam=64",
         "camera.width=320", "camera.height=240", "camera.fx=200", "camera.fy=200",
         "camera.cu=159.5", "camera.cv=119.5", "trajectory.n_steps=6"]


def sets(overrides):
    out = []
    for o in overrides:
        out += ["--set", o]
    return out


def simulate(out, extra=()):
    rc = main(["simulate", "--config", TANK, *sets(SMALL + list(extra)), "--out", str(out)])
    assert rc == 0
    return out


def small_cfg(extra=()):
    return PipelineConfig.load(TANK).with_overrides(SMALL + list(extra))


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    return simulate(tmp_path_factory.mktemp("seq"))


class TestSimulate:
    def test_counts_full_orbit(self, tmp_path):
        over = ["sonar.range_bins=64", "sonar.bearing_bins=16", "sim.elevation_samples_per_beam=2",
                "camera.width=32", "camera.height=24", "camera.cu=15.5", "camera.cv=11.5",
                "camera.fx=20", "camera.fy=20"]
        rc = main(["simulate", "--config", TANK, *sets(over), "--out", str(tmp_path)])
        assert rc == 0
        manifest = read_manifest(tmp_path / "manifest.csv")
        assert len(manifest) == 36
        assert len(list((tmp_path / "frames").glob("*.sfr"))) == 72
        assert len(list((tmp_path / "masks").glob("*.pgm"))) == 36
        assert len((tmp_path / "trajectory.txt").read_text().splitlines()) == 36

    def test_byte_identical(self, seq, tmp_path):
        again = simulate(tmp_path / "again")
        files = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
        assert len(files) == 6 * 3 + 3
        _, mismatch, errors = filecmp.cmpfiles(seq, again, [str(f) for f in files], shallow=False)
        assert not mismatch and not errors

    def test_seed_changes_frames(self, seq, tmp_path):
        other = tmp_path / "other"
        assert main(["simulate", "--config", TANK, *sets(SMALL), "--seed", "7", "--out", str(other)]) == 0
        assert not filecmp.cmp(seq / "frames" / "0000_h.sfr", other / "frames" / "0000_h.sfr", shallow=False)

    def test_dropout_masks_present_but_empty(self, tmp_path):
        out = simulate(tmp_path / "turbid", ["sim.mask_dropout_prob=1.0"])
        manifest = read_manifest(out / "manifest.csv")
        assert all(r.mask is not None and r.mask.is_file() for r in manifest.records)
        assert not any(read_pgm(r.mask).mask.any() for r in manifest.records)

    def test_unwritable_out_dir(self, tmp_path):
        (tmp_path / "file").write_text("")
        rc = main(["simulate", "--config", TANK, *sets(SMALL), "--out", str(tmp_path / "file" / "x")])
        assert rc == 4


class TestMap:
    def test_stationary_poses_one_keyframe(self, seq, tmp_path):
        manifest = read_manifest(seq / "manifest.csv")
        first = manifest.records[0]
        still = SequenceManifest([Record(first.t + k, r.sonar_h, r.sonar_v, r.mask, first.pose)
                                  for k, r in enumerate(manifest.records)], seq)
        write_manifest(seq / "still.csv", still)
        assert map_sequence(read_manifest(seq / "still.csv"), small_cfg()).keyframes == 1

    def test_masks_absent_equals_stereo_only(self, seq):
        cfg = small_cfg()
        manifest = read_manifest(seq / "manifest.csv").without_masks()
        got = map_sequence(manifest, cfg).omap
        # independent route: stereo pairs straight into the map, no mask handling at all
        rig, cfar, fusion = cfg.build_rig(), cfg.build_cfar(), cfg.build_fusion()
        ref = cfg.build_map()
        gate = cfg.build_gate()
        for r in manifest.records:
            if not gate.accept(r.pose):
                continue
            m = stereo_match(soca_cfar(read_sonar_frame(r.sonar_v, r.pose), cfar),
                             soca_cfar(read_sonar_frame(r.sonar_h, r.pose), cfar), rig, fusion.range_match_tol)
            cloud = ConfidencePointCloud(m.points, np.full(len(m), STEREO),
                                         np.full(len(m), 1.0 / fusion.alpha_ss), np.zeros(3))
            update_map(ref, cloud, cfg.build_gp(), cfg.build_tiling(), cfg.build_training(), r.pose)
        assert len(got) > 0 and got == ref

    def test_cli_outputs(self, seq, tmp_path):
        rc = main(["map", "--config", TANK, *sets(SMALL), "--manifest", str(seq / "manifest.csv"),
                   "--out", str(tmp_path / "m.csv"), "--ply", str(tmp_path / "m.ply"),
                   "--timings", str(tmp_path / "t.csv")])
        assert rc == 0
        assert len(import_map(tmp_path / "m.csv")) > 0
        assert (tmp_path / "m.ply").read_text().startswith("ply\n")
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert rows[0] == "keyframe,stereo,seconds" and len(rows) == 7

    def test_empty_manifest(self, tmp_path, caplog):
        (tmp_path / "e.csv").write_text("t,sonar_h,sonar_v,mask,tx,ty,tz,qx,qy,qz,qw\n")
        with caplog.at_level(logging.WARNING):
            rc = main(["map", "--manifest", str(tmp_path / "e.csv"), "--out", str(tmp_path / "m.csv")])
        assert rc == 0 and len(import_map(tmp_path / "m.csv")) == 0
        assert "empty manifest" in caplog.text

    def test_corrupt_frames(self, seq, tmp_path):
        bad = tmp_path / "bad"
        shutil.copytree(seq, bad)
        (bad / "frames" / "0002_h.sfr").write_bytes(b"junk")
        result = map_sequence(read_manifest(bad / "manifest.csv"), small_cfg())
        assert (result.keyframes, result.skipped) == (6, 1)
        for k in (0, 1, 3, 4):
            (bad / "frames" / f"{k:04d}_v.sfr").write_bytes(b"junk")
        with pytest.raises(DataError):
            map_sequence(read_manifest(bad / "manifest.csv"), small_cfg())
        rc = main(["map", "--config", TANK, *sets(SMALL), "--manifest", str(bad / "manifest.csv"),
                   "--out", str(tmp_path / "m.csv")])
        assert rc == 4

    def test_manifest_validation(self, seq, tmp_path):
        lines = (seq / "manifest.csv").read_text().splitlines()
        (seq / "dup.csv").write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
        with pytest.raises(DataError):
            read_manifest(seq / "dup.csv")
        (seq / "gone.csv").write_text("\n".join([lines[0], lines[1].replace("0000_h", "9999_h")]) + "\n")
        with pytest.raises(DataError):
            read_manifest(seq / "gone.csv")
        assert main(["map", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "m.csv")]) == 4


class TestEval:
    def surface_map(self, path):
        scene = load_scene(CONFIGS / "scenes" / "single_disk.yaml")
        omap = OccupancyMap()
        for key in map(tuple, np.unique(omap.index_of(scene.surface_samples(0.002)), axis=0).tolist()):
            omap.cells[key] = CellBelief(1.0, 0.001, 1)
        export_map(omap, path)
        return omap, scene

    def test_perfect_map(self, tmp_path, capsys):
        self.surface_map(tmp_path / "m.csv")
        assert main(["eval", "--config", TANK, "--map", str(tmp_path / "m.csv")]) == 0
        assert "precision: 100.0\n" in capsys.readouterr().out

    def test_report_is_module_output(self, tmp_path, capsys):
        omap, scene = self.surface_map(tmp_path / "m.csv")
        rc = main(["eval", "--config", TANK, "--map", str(tmp_path / "m.csv"), "--report", str(tmp_path / "r.txt"),
                   "--csv", str(tmp_path / "r.csv"), "--distances", str(tmp_path / "d.csv")])
        assert rc == 0
        bounds = PipelineConfig.load(TANK).build_bounds()
        expected = summarize(voxel_errors(omap, scene, bounds), bounds)
        assert capsys.readouterr().out == expected.as_text() == (tmp_path / "r.txt").read_text()
        assert (tmp_path / "r.csv").read_text() == expected.csv_header() + "\n" + expected.csv_row() + "\n"
        assert len((tmp_path / "d.csv").read_text().splitlines()) == expected.total_voxels + 1

    def test_empty_bbox_exit_code(self, tmp_path):
        self.surface_map(tmp_path / "m.csv")
        rc = main(["eval", "--config", TANK, "--set", "eval.bbox_min=[5, 5, 5]", "--set", "eval.bbox_max=[6, 6, 6]",
                   "--map", str(tmp_path / "m.csv")])
        assert rc == 2

    def test_config_error_exit_code(self, tmp_path):
        assert main(["eval", "--config", TANK, "--set", "eval.nope=1", "--map", str(tmp_path / "m.csv")]) == 3
        assert main(["eval", "--map", str(tmp_path / "m.csv")]) == 3

    def test_missing_map_exit_code(self, tmp_path):
        assert main(["eval", "--config", TANK, "--map", str(tmp_path / "absent.csv")]) == 4


def test_info(seq, tmp_path, capsys):
    omap = OccupancyMap()
    omap.cells[(0, 0, 0)] = CellBelief(1.0, 0.001, 1)
    export_map(omap, tmp_path / "m.csv")
    assert main(["info", "--config", TANK, "--manifest", str(seq / "manifest.csv"), "--map", str(tmp_path / "m.csv")]) == 0
    out = capsys.readouterr().out
    assert "cfar:" in out and "# manifest: 6 records, 6 masks" in out and "occupied 1" in out
