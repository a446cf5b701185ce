"""Sequence manifests and the simulate / map / eval stages."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .config import PipelineConfig
from .errors import ConfigurationError, DataError, SyncError
from .evaluation import EvalReport, summarize, voxel_errors
from .features import read_sonar_frame, soca_cfar, write_sonar_frame
from .fusion import fuse_frame, read_pgm, write_pgm
from .geometry import Pose
from .gpmap import OccupancyMap, update_map
from .simulator import Scene, generate_trajectory, render_roi_mask, render_sonar, save_scene, write_trajectory

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["t", "sonar_h", "sonar_v", "mask", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


@dataclass
class Record:
    t: float
    sonar_h: Path
    sonar_v: Path
    mask: Optional[Path]
    pose: Pose


@dataclass
class SequenceManifest:
    records: List[Record] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def without_masks(self) -> "SequenceManifest":
        return SequenceManifest([Record(r.t, r.sonar_h, r.sonar_v, None, r.pose) for r in self.records], self.root)


def write_manifest(path, manifest: SequenceManifest) -> None:
    """CSV with paths relative to the manifest's directory."""
    path = Path(path)
    base = path.parent

    def rel(p):
        return "" if p is None else Path(os.path.relpath(p, base)).as_posix()

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            w.writerow([repr(r.t), rel(r.sonar_h), rel(r.sonar_v), rel(r.mask),
                        *(repr(float(v)) for v in r.pose.translation),
                        *(repr(float(v)) for v in r.pose.quaternion())])


def read_manifest(path) -> SequenceManifest:
    """Parse a manifest; timestamps must increase strictly and referenced files must exist."""
    path = Path(path)
    base = path.parent
    records = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return SequenceManifest([], base)
            missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames)
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                t = float(row["t"])
                pose = Pose.from_quaternion([float(row[k]) for k in ("qx", "qy", "qz", "qw")],
                                            [float(row[k]) for k in ("tx", "ty", "tz")], t)
                mask = base / row["mask"] if row["mask"] else None
                records.append(Record(t, base / row["sonar_h"], base / row["sonar_v"], mask, pose))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    for a, b in zip(records, records[1:]):
        if not b.t > a.t:
            raise DataError(f"{path}: timestamps not strictly increasing at t={b.t}")
    for r in records:
        for p in (r.sonar_h, r.sonar_v, r.mask):
            if p is not None and not p.is_file():
                raise DataError(f"{path}: referenced file {p} not found")
    return SequenceManifest(records, base)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def simulate_sequence(scene: Scene, cfg: PipelineConfig, out_dir) -> SequenceManifest:
    """Render every trajectory pose to ``out_dir`` and write its manifest."""
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: {exc}") from exc
    rig = cfg.build_rig()
    sim = cfg.build_sim()
    poses = generate_trajectory(cfg.build_trajectory())
    records = []
    for k, pose in enumerate(poses):
        h = render_sonar(scene, pose, rig.sonar_h, sim, None, "horizontal", k)
        v = render_sonar(scene, pose, rig.sonar_v, sim, rig.vertical_in_body, "vertical", k)
        mask = render_roi_mask(scene, pose, rig, sim, frame_index=k)
        rec = Record(pose.t, out / "frames" / f"{k:04d}_h.sfr", out / "frames" / f"{k:04d}_v.sfr",
                     out / "masks" / f"{k:04d}.pgm", pose)
        try:
            write_sonar_frame(rec.sonar_h, h)
            write_sonar_frame(rec.sonar_v, v)
            write_pgm(rec.mask, mask)
        except OSError as exc:
            raise DataError(f"{exc.filename}: {exc.strerror}") from exc
        records.append(rec)
    manifest = SequenceManifest(records, out)
    write_trajectory(out / "trajectory.txt", poses)
    write_manifest(out / "manifest.csv", manifest)
    save_scene(scene, out / "scene.yaml")
    return manifest


@dataclass
class MapResult:
    omap: OccupancyMap
    keyframes: int = 0
    skipped: int = 0
    timings: List[float] = field(default_factory=list)
    counts: List[dict] = field(default_factory=list)


def map_sequence(manifest: SequenceManifest, cfg: PipelineConfig) -> MapResult:
    """Keyframe-gated CFAR, fusion and GP map update over a manifest.

    Unreadable keyframes are skipped with a warning; if more than half of the
    keyframes are skipped a :class:`DataError` is raised.
    """
    rig = cfg.build_rig()
    cfar = cfg.build_cfar()
    fusion = cfg.build_fusion()
    hp = cfg.build_gp()
    training = cfg.build_training()
    tiling = cfg.build_tiling()
    gate = cfg.build_gate()
    result = MapResult(cfg.build_map())
    if not manifest.records:
        log.warning("empty manifest: map is empty")
        return result
    for rec in manifest.records:
        if not gate.accept(rec.pose):
            continue
        result.keyframes += 1
        start = time.perf_counter()
        try:
            f_h = soca_cfar(read_sonar_frame(rec.sonar_h, rec.pose), cfar)
            f_v = soca_cfar(read_sonar_frame(rec.sonar_v, rec.pose), cfar)
            mask = read_pgm(rec.mask, rec.t) if rec.mask is not None else None
            cloud = fuse_frame(f_v, f_h, mask, rig, fusion, rec.pose)
        except (DataError, SyncError, ConfigurationError) as exc:
            log.warning("skipping keyframe t=%.3f: %s", rec.t, exc)
            result.skipped += 1
            continue
        update_map(result.omap, cloud, hp, tiling, training, rec.pose)
        result.timings.append(time.perf_counter() - start)
        result.counts.append(cloud.counts())
    if result.skipped * 2 > result.keyframes:
        raise DataError(f"{result.skipped} of {result.keyframes} keyframes could not be read")
    return result


def evaluate_map(omap: OccupancyMap, scene: Scene, cfg: PipelineConfig, timings=None) -> EvalReport:
    bounds = cfg.build_bounds()
    return summarize(voxel_errors(omap, scene, bounds), bounds, timings)
