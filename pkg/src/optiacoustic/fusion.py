"""
Opti-acoustic fusion: stereo-sonar matching, ROI masking, elevation arcs and
image expansion.

Produces one :class:`ConfidencePointCloud` per keyframe holding three
classes of body-frame points:

- ``STEREO``: range-matched feature pairs from the orthogonal sonars,
- ``ARC``: elevation-arc candidates of close unmatched features that land
  inside the ROI mask,
- ``EXPANDED``: ROI pixels outside the sonar aperture, back-projected at the
  mean camera depth of the arc survivors sharing their column (horizontal
  sonar) or row (vertical sonar).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, SyncError
from .features import FeatureImage
from .geometry import (
    CameraModel,
    Extrinsics,
    Pose,
    SensorRig,
    SonarModel,
    back_project,
    pixel_indices,
    project_to_image,
    spherical_to_cartesian,
)

log = logging.getLogger(__name__)

STEREO, ARC, EXPANDED = 0, 1, 2
CLASS_NAMES = ("stereo", "arc", "expanded")


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoiMask:
    """Binary region-of-interest mask, shape ``[height, width]``."""

    mask: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ConfigurationError("RoiMask must be 2-D")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())

    def check_camera(self, cam: CameraModel) -> None:
        if self.mask.shape != (cam.height, cam.width):
            raise ConfigurationError(
                f"mask shape {self.mask.shape} does not match camera {(cam.height, cam.width)}"
            )


@dataclass(frozen=True)
class FusionConfig:
    """Confidence values and fusion knobs.

    Noise variance of a point of class ``c`` is ``1 / alpha_c``.
    ``range_match_tol=None`` derives the tolerance from the rig, see
    :func:`default_range_tolerance`.
    """

    alpha_ss: float = 20.0
    alpha_s: float = 1.0
    alpha_e: float = 0.5
    range_match_tol: Optional[float] = None
    phi_step: float = float(np.deg2rad(0.25))
    expansion_enabled: bool = True
    sync_tol: float = 0.1

    def __post_init__(self):
        if not self.alpha_ss >= self.alpha_s >= self.alpha_e > 0:
            raise ConfigurationError("confidences must satisfy alpha_ss >= alpha_s >= alpha_e > 0")
        if not self.phi_step > 0:
            raise ConfigurationError("phi_step must be positive")
        if self.range_match_tol is not None and not self.range_match_tol > 0:
            raise ConfigurationError("range_match_tol must be positive")

    @classmethod
    def tank(cls, **kw) -> "FusionConfig":
        return cls(alpha_ss=20.0, alpha_s=1.0, alpha_e=0.5, **kw)

    @classmethod
    def marina(cls, **kw) -> "FusionConfig":
        return cls(alpha_ss=20.0, alpha_s=2.0, alpha_e=1.0, **kw)

    @property
    def noise_vars(self) -> np.ndarray:
        return 1.0 / np.array([self.alpha_ss, self.alpha_s, self.alpha_e])


@dataclass(eq=False)
class ConfidencePointCloud:
    """Fused body-frame points with confidence class and GP noise variance.

    ``origins`` holds, per point, the body-frame position of the sensor whose
    ray produced it; free-space samples are laid along ``origin -> point``.
    """

    points: np.ndarray
    cls: np.ndarray
    noise_var: np.ndarray
    origins: np.ndarray
    t: float = 0.0
    pose: Optional[Pose] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = self.points.shape[0]
        self.cls = np.asarray(self.cls, dtype=np.uint8).reshape(n)
        self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(n)
        self.origins = np.broadcast_to(np.asarray(self.origins, dtype=float), (n, 3)).copy()
        if np.any(~(self.noise_var > 0)):
            raise ConfigurationError("noise variances must be positive")

    def __len__(self):
        return int(self.points.shape[0])

    @classmethod
    def empty(cls, t: float = 0.0, pose: Optional[Pose] = None) -> "ConfidencePointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)), t, pose)

    def of_class(self, c: int) -> np.ndarray:
        return self.points[self.cls == c]

    def counts(self) -> dict:
        return {name: int(np.sum(self.cls == i)) for i, name in enumerate(CLASS_NAMES)}

    @classmethod
    def concatenate(cls, parts, t: float = 0.0, pose: Optional[Pose] = None) -> "ConfidencePointCloud":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(t, pose)
        return cls(
            np.vstack([p.points for p in parts]),
            np.concatenate([p.cls for p in parts]),
            np.concatenate([p.noise_var for p in parts]),
            np.vstack([p.origins for p in parts]),
            t,
            pose,
        )


# ---------------------------------------------------------------------------
# Stereo matching
# ---------------------------------------------------------------------------


def _bearing_elevation_in(R: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Elevation, in the frame reached by rotation ``R``, of bearing-plane directions."""
    d = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=-1)
    z = d @ R.T
    return np.arcsin(np.clip(z[..., 2], -1.0, 1.0))


def in_companion_aperture(F_v: FeatureImage, F_h: FeatureImage, rig: SensorRig) -> Tuple[np.ndarray, np.ndarray]:
    """Features whose bearing lies inside the other sonar's vertical aperture."""
    R_vh = rig.v_to_h.rotation
    elev_h_in_v = _bearing_elevation_in(R_vh.T, np.asarray(F_h.theta, dtype=float))
    elev_v_in_h = _bearing_elevation_in(R_vh, np.asarray(F_v.theta, dtype=float))
    ok_h = (elev_h_in_v >= rig.sonar_v.phi_min) & (elev_h_in_v <= rig.sonar_v.phi_max)
    ok_v = (elev_v_in_h >= rig.sonar_h.phi_min) & (elev_v_in_h <= rig.sonar_h.phi_max)
    return ok_v, ok_h


def default_range_tolerance(rig: SensorRig) -> float:
    """Coarser range-bin width plus the largest range offset the sonar baseline
    can produce for a point inside the stereo overlap."""
    dr = max(rig.sonar_h.range_resolution, rig.sonar_v.range_resolution)
    b = rig.v_to_h.translation
    if not np.any(b):
        return dr
    # overlap corners: bearing inside the vertical sonar aperture, elevation inside the horizontal one
    az = np.array([rig.sonar_v.phi_min, rig.sonar_v.phi_max])
    el = np.array([rig.sonar_h.phi_min, rig.sonar_h.phi_max])
    A, E = np.meshgrid(az, el)
    dirs = spherical_to_cartesian(1.0, A.ravel(), E.ravel())
    return dr + float(np.max(np.abs(dirs @ b)))


def stereo_points(r_v, theta_v, r_h, theta_h, rig: SensorRig) -> np.ndarray:
    """Fuse matched ranges and bearings into horizontal-sonar-frame points.

    The horizontal bearing plane and the vertical bearing plane (carried
    through the sonar-to-sonar extrinsics) intersect in a line.  Along that
    line the point at range ``r_h`` from the horizontal sonar and the point
    at range ``r_v`` from the vertical sonar are averaged; with a zero
    baseline this is the point at range ``(r_h + r_v) / 2`` along direction
    ``(1, tan theta_h, tan theta_v)``.
    """
    r_v = np.atleast_1d(np.asarray(r_v, dtype=float))
    r_h = np.atleast_1d(np.asarray(r_h, dtype=float))
    th_v = np.atleast_1d(np.asarray(theta_v, dtype=float))
    th_h = np.atleast_1d(np.asarray(theta_h, dtype=float))
    if r_v.size == 0:
        return np.zeros((0, 3))
    R, b = rig.v_to_h.rotation, rig.v_to_h.translation

    n_h = np.stack([-np.sin(th_h), np.cos(th_h), np.zeros_like(th_h)], axis=-1)
    n_v = np.stack([-np.sin(th_v), np.cos(th_v), np.zeros_like(th_v)], axis=-1) @ R.T
    d = np.cross(n_h, n_v)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d *= np.where(d[:, :1] < 0, -1.0, 1.0)

    # point on both planes closest to the origin: rows n_h, n_v, d
    A = np.stack([n_h, n_v, d], axis=1)
    rhs = np.stack([np.zeros_like(r_v), n_v @ b, np.zeros_like(r_v)], axis=-1)
    P0 = np.linalg.solve(A, rhs[..., None])[..., 0]

    def along(center, rng):
        rel = P0 - center
        pd = np.sum(rel * d, axis=-1)
        disc = pd**2 - np.sum(rel * rel, axis=-1) + rng**2
        return P0 + (-pd + np.sqrt(np.maximum(disc, 0.0)))[:, None] * d

    return 0.5 * (along(np.zeros(3), r_h) + along(b, r_v))


@dataclass(frozen=True, eq=False)
class StereoMatches:
    """Index pairs into ``(F_v, F_h)`` and their fused horizontal-frame points."""

    v_idx: np.ndarray
    h_idx: np.ndarray
    points: np.ndarray
    ranges: np.ndarray

    def __len__(self):
        return int(self.v_idx.shape[0])

    def min_range(self) -> Optional[float]:
        return float(self.ranges.min()) if len(self) else None


def _check_sync(t_a: float, t_b: float, tol: float, what: str) -> None:
    if abs(t_a - t_b) > tol:
        raise SyncError(f"{what}: |dt| = {abs(t_a - t_b):.4f} s exceeds {tol} s")


def stereo_match(
    F_v: FeatureImage,
    F_h: FeatureImage,
    rig: SensorRig,
    range_match_tol: Optional[float] = None,
    sync_tol: float = 0.1,
) -> StereoMatches:
    """Pair vertical and horizontal features at equal range inside the overlap.

    A pair ``(f_v, f_h)`` is kept when ``|r_v - r_h| <= range_match_tol`` and
    each feature's bearing lies within the companion sonar's vertical
    aperture.  Intensities are ignored.  All qualifying cross-pairs are
    emitted, ordered by ``(v index, h index)``.
    """
    _check_sync(F_v.t, F_h.t, sync_tol, "stereo_match")
    tol = default_range_tolerance(rig) if range_match_tol is None else range_match_tol
    empty = StereoMatches(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
    if len(F_v) == 0 or len(F_h) == 0:
        return empty
    ok_v, ok_h = in_companion_aperture(F_v, F_h, rig)
    vi = np.flatnonzero(ok_v)
    hi = np.flatnonzero(ok_h)
    if vi.size == 0 or hi.size == 0:
        return empty

    order = np.argsort(F_h.r[hi], kind="stable")
    hs = hi[order]
    r_hs = F_h.r[hs]
    r_vs = F_v.r[vi]
    lo = np.searchsorted(r_hs, r_vs - tol, side="left")
    up = np.searchsorted(r_hs, r_vs + tol, side="right")
    counts = up - lo
    v_rep = np.repeat(vi, counts)
    starts = np.repeat(lo, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    h_rep = hs[starts + offs]
    # the range window is closed on both sides; re-check exactly
    keep = np.abs(F_v.r[v_rep] - F_h.r[h_rep]) <= tol
    v_rep, h_rep = v_rep[keep], h_rep[keep]
    order = np.lexsort((h_rep, v_rep))
    v_rep, h_rep = v_rep[order], h_rep[order]

    pts = stereo_points(F_v.r[v_rep], F_v.theta[v_rep], F_h.r[h_rep], F_h.theta[h_rep], rig)
    ranges = 0.5 * (F_v.r[v_rep] + F_h.r[h_rep])
    return StereoMatches(v_rep, h_rep, pts, ranges)


def close_unmatched(F: FeatureImage, matched_idx, d_min: float) -> np.ndarray:
    """Indices of features closer than ``d_min`` that are not part of any match."""
    matched = np.zeros(len(F), dtype=bool)
    matched[np.asarray(matched_idx, dtype=np.int64)] = True
    return np.flatnonzero((F.r < d_min) & ~matched)


# ---------------------------------------------------------------------------
# Masking and arcs
# ---------------------------------------------------------------------------


def mask_points(P, R: RoiMask, cam: CameraModel, ext: Extrinsics) -> np.ndarray:
    """Boolean keep-mask: points whose nearest pixel is a true ROI pixel.

    Points behind the camera or projecting out of frame are discarded.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    if P.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    uv, valid = project_to_image(P, ext, cam)
    col, row, inside = pixel_indices(uv, valid, cam)
    keep = np.zeros(P.shape[0], dtype=bool)
    keep[inside] = R.mask[row[inside], col[inside]]
    return keep


def arc_elevations(model: SonarModel, phi_step: float) -> np.ndarray:
    """``phi_min, phi_min + step, ...`` up to and including ``phi_max``."""
    if not phi_step > 0:
        raise ConfigurationError("phi_step must be positive")
    n = int(np.floor((model.phi_max - model.phi_min) / phi_step + 1e-9)) + 1
    return model.phi_min + phi_step * np.arange(n)


def elevation_arc(r: float, theta: float, model: SonarModel, phi_step: float) -> np.ndarray:
    """All candidate 3D points of one feature across the vertical aperture."""
    return spherical_to_cartesian(r, theta, arc_elevations(model, phi_step))


@dataclass(frozen=True, eq=False)
class ArcSurvivors:
    """Arc candidates of one sonar that landed on ROI pixels.

    ``points`` are in that sonar's own frame; ``col``, ``row`` and ``depth``
    give the pixel and camera-frame depth of each survivor.
    """

    points: np.ndarray
    feature: np.ndarray
    col: np.ndarray
    row: np.ndarray
    depth: np.ndarray

    def __len__(self):
        return int(self.points.shape[0])

    @classmethod
    def empty(cls) -> "ArcSurvivors":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 3)), z, z, z, np.zeros(0))


def _project_arcs(F: FeatureImage, idx: np.ndarray, model: SonarModel, phi_step: float,
                  R: RoiMask, cam: CameraModel, ext: Extrinsics, in_frame_only: bool = False) -> ArcSurvivors:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return ArcSurvivors.empty()
    phis = arc_elevations(model, phi_step)
    r = np.repeat(F.r[idx], phis.size)
    th = np.repeat(F.theta[idx], phis.size)
    ph = np.tile(phis, idx.size)
    feat = np.repeat(idx, phis.size)
    P = spherical_to_cartesian(r, th, ph)
    uv, valid = project_to_image(P, ext, cam)
    col, row, inside = pixel_indices(uv, valid, cam)
    keep = inside.copy()
    if not in_frame_only:
        keep[inside] = R.mask[row[inside], col[inside]]
    depth = ext.apply(P[keep])[:, 2]
    return ArcSurvivors(P[keep], feat[keep], col[keep], row[keep], depth)


@dataclass(frozen=True, eq=False)
class ArcProjection:
    """Survivors of the vertical (``O_v``) and horizontal (``O_h``) arcs plus
    their union in the body frame (``points``, with per-point ``origins``)."""

    O_v: ArcSurvivors
    O_h: ArcSurvivors
    points: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return int(self.points.shape[0])


def arc_project_mask(
    F_v: FeatureImage, C_v, F_h: FeatureImage, C_h, R: RoiMask, rig: SensorRig, phi_step: float
) -> ArcProjection:
    """Project elevation arcs of close unmatched features and keep ROI hits.

    ``C_v`` / ``C_h`` index into ``F_v`` / ``F_h``.
    """
    cam = rig.camera
    O_v = _project_arcs(F_v, C_v, rig.sonar_v, phi_step, R, cam, rig.v_to_camera)
    O_h = _project_arcs(F_h, C_h, rig.sonar_h, phi_step, R, cam, rig.h_to_camera)
    pts = np.vstack([O_v.points @ rig.v_to_h.rotation.T + rig.v_to_h.translation, O_h.points])
    origins = np.vstack([
        np.broadcast_to(rig.v_to_h.translation, (len(O_v), 3)),
        np.zeros((len(O_h), 3)),
    ])
    return ArcProjection(O_v, O_h, pts, origins)


def _expand(surv: ArcSurvivors, R: RoiMask, cam: CameraModel, axis: int) -> np.ndarray:
    """Camera-frame expansion along image columns (axis=1) or rows (axis=0)."""
    if len(surv) == 0:
        return np.zeros((0, 3))
    key = surv.col if axis == 1 else surv.row
    size = cam.width if axis == 1 else cam.height
    counts = np.bincount(key, minlength=size)
    sums = np.bincount(key, weights=surv.depth, minlength=size)
    has = counts > 0
    mean = np.zeros(size)
    mean[has] = sums[has] / counts[has]
    occupied = np.zeros(R.mask.shape, dtype=bool)
    occupied[surv.row, surv.col] = True
    line_ok = has[None, :] if axis == 1 else has[:, None]
    cand = R.mask & ~occupied & line_ok
    rows, cols = np.nonzero(cand)
    if rows.size == 0:
        return np.zeros((0, 3))
    depth = mean[cols] if axis == 1 else mean[rows]
    pix = np.stack([cols.astype(float), rows.astype(float)], axis=-1)
    return back_project(pix, depth, cam)


def image_expand(arcs: ArcProjection, R: RoiMask, rig: SensorRig) -> np.ndarray:
    """Expanded points (body frame) from column-wise ``O_h`` and row-wise ``O_v`` depths.

    A column (row) without survivors has no depth evidence and is skipped.
    """
    cam = rig.camera
    P_c = np.vstack([_expand(arcs.O_h, R, cam, axis=1), _expand(arcs.O_v, R, cam, axis=0)])
    return rig.h_to_camera.inverse().apply(P_c) if P_c.size else np.zeros((0, 3))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def fuse_frame(
    F_v: FeatureImage,
    F_h: FeatureImage,
    R: Optional[RoiMask],
    rig: SensorRig,
    config: Optional[FusionConfig] = None,
    pose: Optional[Pose] = None,
) -> ConfidencePointCloud:
    """Fuse one synchronized keyframe into a confidence-tagged point cloud.

    With no mask, or an empty one, the stereo points are returned unmasked
    and close-range unmatched features are not revisited.
    """
    config = config or FusionConfig()
    t = F_h.t
    nv = config.noise_vars
    matches = stereo_match(F_v, F_h, rig, config.range_match_tol, config.sync_tol)

    def cloud(points, cls, origins):
        return ConfidencePointCloud(points, np.full(len(points), cls), np.full(len(points), nv[cls]), origins, t, pose)

    if R is None or R.empty:
        return cloud(matches.points, STEREO, np.zeros(3)) if len(matches) else ConfidencePointCloud.empty(t, pose)

    R.check_camera(rig.camera)
    _check_sync(R.t, t, config.sync_tol, "fuse_frame mask")
    keep = mask_points(matches.points, R, rig.camera, rig.h_to_camera)
    q_ss = cloud(matches.points[keep], STEREO, np.zeros(3))

    d_min = matches.min_range()
    if d_min is None:
        # no stereo evidence: every feature counts as close range
        d_min = max(rig.sonar_v.r_max, rig.sonar_h.r_max)
    C_v = close_unmatched(F_v, matches.v_idx, d_min)
    C_h = close_unmatched(F_h, matches.h_idx, d_min)
    arcs = arc_project_mask(F_v, C_v, F_h, C_h, R, rig, config.phi_step)
    q_s = cloud(arcs.points, ARC, arcs.origins)

    q_e = ConfidencePointCloud.empty(t, pose)
    if config.expansion_enabled:
        q_e = cloud(image_expand(arcs, R, rig), EXPANDED, rig.camera_origin)
    log.debug("fused t=%.3f: %d stereo, %d arc, %d expanded", t, len(q_ss), len(q_s), len(q_e))
    return ConfidencePointCloud.concatenate([q_ss, q_s, q_e], t, pose)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_pgm(path, R: RoiMask) -> None:
    """Binary PGM (P5): 0 outside, 255 inside."""
    h, w = R.mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(R.mask, 255, 0).astype(np.uint8).tobytes())


def read_pgm(path, t: float = 0.0) -> RoiMask:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) - pos >= w * h else None
    if pix is None:
        raise DataError(f"{path}: truncated PGM data")
    return RoiMask(pix.reshape(h, w) > 0, t)


def write_cloud_ply(path, cloud: ConfidencePointCloud) -> None:
    """ASCII PLY with per-vertex ``x y z cls noise_var``."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar cls\nproperty double noise_var\nend_header\n")
        for p, c, s in zip(cloud.points, cloud.cls, cloud.noise_var):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c)} {float(s)!r}\n")


def read_cloud_ply(path) -> ConfidencePointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        end = lines.index("end_header")
        n = next(int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex"))
    except (ValueError, StopIteration) as exc:
        raise DataError(f"{path}: malformed PLY header") from exc
    rows = np.array([[float(x) for x in l.split()] for l in lines[end + 1:end + 1 + n]]).reshape(n, 5)
    return ConfidencePointCloud(rows[:, :3], rows[:, 3].astype(np.uint8), rows[:, 4], np.zeros(3))
