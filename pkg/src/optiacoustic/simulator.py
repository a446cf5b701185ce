"""Synthetic scenes of analytic primitives, and sonar / ROI-mask rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .errors import ConfigurationError, DataError
from .features import SONAR_IDS, SonarFrame
from .fusion import RoiMask
from .geometry import CameraModel, Pose, SensorRig, SonarModel, spherical_to_cartesian

_EPS = 1e-9


def _unit(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ConfigurationError(f"{what} must be a non-zero vector")
    return v / n


def _in_plane_axes(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, normal)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _SolidCylinder:
    """Finite solid cylinder around ``center`` along unit ``axis``."""

    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float
    reflectivity: float

    def sdf(self, P: np.ndarray) -> np.ndarray:
        q = np.asarray(P, dtype=float) - self.center
        h = q @ self.axis
        rho = np.linalg.norm(q - h[..., None] * self.axis, axis=-1)
        dx = rho - self.radius
        dy = np.abs(h) - self.half_height
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        return outside + np.minimum(np.maximum(dx, dy), 0.0)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        """First positive hit of rays ``o + t d`` (unit ``d``): ``(t, normal)``, ``t = inf`` on miss."""
        a, R, H = self.axis, self.radius, self.half_height
        oc = o - self.center
        oa = oc @ a
        da = d @ a
        op = oc - oa[..., None] * a
        dp = d - da[..., None] * a
        A = np.einsum("...i,...i->...", dp, dp)
        B = 2.0 * np.einsum("...i,...i->...", op, dp)
        C = np.einsum("...i,...i->...", op, op) - R * R
        n = o.shape[0]
        best = np.full(n, np.inf)
        normal = np.zeros((n, 3))

        disc = B * B - 4.0 * A * C
        ok = (A > 1e-15) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        A_safe = np.where(ok, A, 1.0)
        for t in ((-B - sq) / (2.0 * A_safe), (-B + sq) / (2.0 * A_safe)):
            h = oa + t * da
            hit = ok & (t > _EPS) & (np.abs(h) <= self.half_height) & (t < best)
            best = np.where(hit, t, best)
            side = op + t[:, None] * dp
            normal = np.where(hit[:, None], side / R, normal)

        da_safe = np.where(np.abs(da) > 1e-15, da, 1.0)
        for sign in (1.0, -1.0):
            t = (sign * H - oa) / da_safe
            radial = op + t[:, None] * dp
            hit = (np.abs(da) > 1e-15) & (t > _EPS) & (np.einsum("ij,ij->i", radial, radial) <= R * R) & (t < best)
            best = np.where(hit, t, best)
            normal = np.where(hit[:, None], sign * a, normal)
        return best, normal

    def surface_samples(self, pitch: float) -> np.ndarray:
        """Surface points no farther than ``pitch`` from any surface point."""
        u, v = _in_plane_axes(self.axis)
        n_ang = max(8, int(math.ceil(2 * math.pi * self.radius / pitch)))
        n_h = max(2, int(math.ceil(2 * self.half_height / pitch)) + 1)
        ang = np.linspace(0, 2 * math.pi, n_ang, endpoint=False)
        hs = np.linspace(-self.half_height, self.half_height, n_h)
        ring = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        side = (self.center + hs[:, None, None] * self.axis + self.radius * ring[None]).reshape(-1, 3)
        caps = []
        n_r = max(2, int(math.ceil(self.radius / pitch)) + 1)
        for rr in np.linspace(0, self.radius, n_r):
            m = max(1, int(math.ceil(2 * math.pi * rr / pitch)))
            a2 = np.linspace(0, 2 * math.pi, m, endpoint=False)
            disk = rr * (np.cos(a2)[:, None] * u + np.sin(a2)[:, None] * v)
            for sgn in (1.0, -1.0):
                caps.append(self.center + sgn * self.half_height * self.axis + disk)
        return np.vstack([side] + caps)


def Cylinder(base, axis, radius: float, height: float, reflectivity: float = 0.8) -> _SolidCylinder:
    """Solid cylinder from ``base`` extending ``height`` along ``axis``."""
    a = _unit(axis, "cylinder axis")
    if not (radius > 0 and height > 0):
        raise ConfigurationError("cylinder radius and height must be positive")
    _check_reflectivity(reflectivity)
    center = np.asarray(base, dtype=float).reshape(3) + 0.5 * height * a
    return _SolidCylinder(center, a, float(radius), 0.5 * float(height), float(reflectivity))


def Disk(center, normal, radius: float, thickness: float, reflectivity: float = 0.8) -> _SolidCylinder:
    """Solid disk of ``thickness`` centered on ``center``."""
    if not (radius > 0 and thickness > 0):
        raise ConfigurationError("disk radius and thickness must be positive")
    _check_reflectivity(reflectivity)
    return _SolidCylinder(np.asarray(center, dtype=float).reshape(3), _unit(normal, "disk normal"),
                          float(radius), 0.5 * float(thickness), float(reflectivity))


def _check_reflectivity(r: float) -> None:
    if not 0.0 < r <= 1.0:
        raise ConfigurationError("reflectivity must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class Plane:
    """Rectangular zero-thickness patch; ``extent`` = full side lengths (along u, v)."""

    point: np.ndarray
    normal: np.ndarray
    extent: Tuple[float, float]
    reflectivity: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))
        object.__setattr__(self, "normal", _unit(self.normal, "plane normal"))
        ext = tuple(float(e) for e in self.extent)
        if len(ext) != 2 or min(ext) <= 0:
            raise ConfigurationError("plane extent must be two positive lengths")
        object.__setattr__(self, "extent", ext)
        _check_reflectivity(self.reflectivity)

    @property
    def axes(self):
        return _in_plane_axes(self.normal)

    def sdf(self, P: np.ndarray) -> np.ndarray:
        u, v = self.axes
        q = np.asarray(P, dtype=float) - self.point
        cu = np.clip(q @ u, -self.extent[0] / 2, self.extent[0] / 2)
        cv = np.clip(q @ v, -self.extent[1] / 2, self.extent[1] / 2)
        return np.linalg.norm(q - cu[..., None] * u - cv[..., None] * v, axis=-1)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        u, v = self.axes
        denom = d @ self.normal
        ok = np.abs(denom) > 1e-15
        t = np.where(ok, ((self.point - o) @ self.normal) / np.where(ok, denom, 1.0), np.inf)
        q = o + t[:, None] * d - self.point if o.size else np.zeros((0, 3))
        inside = ok & (t > _EPS) & (np.abs(q @ u) <= self.extent[0] / 2) & (np.abs(q @ v) <= self.extent[1] / 2)
        t = np.where(inside, t, np.inf)
        return t, np.broadcast_to(self.normal, (o.shape[0], 3)).copy()

    def surface_samples(self, pitch: float) -> np.ndarray:
        u, v = self.axes
        a = np.linspace(-self.extent[0] / 2, self.extent[0] / 2, max(2, int(math.ceil(self.extent[0] / pitch)) + 1))
        b = np.linspace(-self.extent[1] / 2, self.extent[1] / 2, max(2, int(math.ceil(self.extent[1] / pitch)) + 1))
        A, B = np.meshgrid(a, b, indexing="ij")
        return self.point + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v


@dataclass(eq=False)
class Scene:
    primitives: List = field(default_factory=list)

    def signed_distance(self, P) -> np.ndarray:
        """Distance to the union of primitives, negative inside solids; ``inf`` for an empty scene."""
        P = np.asarray(P, dtype=float)
        out = np.full(P.shape[:-1], np.inf)
        for prim in self.primitives:
            out = np.minimum(out, prim.sdf(P))
        return out

    def raycast(self, origins, dirs, max_range: float = np.inf):
        """First hits: ``(t, normal, reflectivity)``; ``t = inf`` where nothing is hit within ``max_range``."""
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        o = np.broadcast_to(np.asarray(origins, dtype=float), d.shape).reshape(-1, 3)
        n = d.shape[0]
        best = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        refl = np.zeros(n)
        for prim in self.primitives:
            t, nrm = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            normal[closer] = nrm[closer]
            refl[closer] = prim.reflectivity
        miss = best > max_range
        best[miss] = np.inf
        return best, normal, refl

    def surface_samples(self, pitch: float) -> np.ndarray:
        if not self.primitives:
            return np.zeros((0, 3))
        return np.vstack([p.surface_samples(pitch) for p in self.primitives])

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        pts = self.surface_samples(0.05)
        return pts.min(axis=0), pts.max(axis=0)


def signed_distance(scene: Scene, P) -> np.ndarray:
    return scene.signed_distance(P)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


def _primitive_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    try:
        if kind == "cylinder":
            return Cylinder(d["base"], d["axis"], d["radius"], d["height"], d.get("reflectivity", 0.8))
        if kind == "disk":
            return Disk(d["center"], d["normal"], d["radius"], d["thickness"], d.get("reflectivity", 0.8))
        if kind == "plane":
            return Plane(d["point"], d["normal"], tuple(d["extent"]), d.get("reflectivity", 0.8))
    except KeyError as exc:
        raise ConfigurationError(f"{kind} primitive missing field {exc}") from exc
    raise ConfigurationError(f"unknown primitive type {kind!r}")


def _primitive_to_dict(p) -> dict:
    fl = lambda v: [float(x) for x in v]
    if isinstance(p, Plane):
        return {"type": "plane", "point": fl(p.point), "normal": fl(p.normal),
                "extent": list(p.extent), "reflectivity": p.reflectivity}
    base = p.center - p.half_height * p.axis
    return {"type": "cylinder", "base": fl(base), "axis": fl(p.axis), "radius": p.radius,
            "height": 2 * p.half_height, "reflectivity": p.reflectivity}


def scene_from_dict(d: dict) -> Scene:
    prims = (d or {}).get("primitives") or []
    return Scene([_primitive_from_dict(p) for p in prims])


def load_scene(path) -> Scene:
    try:
        with open(path) as fh:
            return scene_from_dict(yaml.safe_load(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"primitives": [_primitive_to_dict(p) for p in scene.primitives]}, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Sensor noise and rendering knobs.

    Each ray hit deposits ``signal_gain * reflectivity * |cos(incidence)|``.
    Noisy intensity is ``signal * speckle + background`` with lognormal
    speckle (``speckle_sigma``) and exponential background of mean
    ``background``.
    """

    background: float = 1.0
    speckle_sigma: float = 0.2
    signal_gain: float = 1.0
    second_return_gain: float = 0.3
    mask_dropout_prob: float = 0.0
    elevation_samples_per_beam: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.background < 0 or self.speckle_sigma < 0 or not self.signal_gain > 0:
            raise ConfigurationError("noise levels must be non-negative and signal_gain positive")
        if not 0.0 <= self.second_return_gain < 1.0:
            raise ConfigurationError("second_return_gain must be in [0, 1)")
        if not 0.0 <= self.mask_dropout_prob <= 1.0:
            raise ConfigurationError("mask_dropout_prob must be in [0, 1]")
        if self.elevation_samples_per_beam < 1:
            raise ConfigurationError("elevation_samples_per_beam must be >= 1")


def elevation_samples(model: SonarModel, n: int) -> np.ndarray:
    """Elevation sample centers spanning the vertical aperture."""
    step = (model.phi_max - model.phi_min) / n
    return model.phi_min + (np.arange(n) + 0.5) * step


def beam_rays(model: SonarModel, n_elev: int) -> np.ndarray:
    """Unit ray directions in the sonar frame, shape ``[bearing_bins, n_elev, 3]``."""
    theta = model.bearing_of_bin(np.arange(model.bearing_bins))
    phi = elevation_samples(model, n_elev)
    return spherical_to_cartesian(1.0, theta[:, None], phi[None, :])


def sonar_signal(scene: Scene, sensor_pose: Pose, model: SonarModel, cfg: SimConfig) -> np.ndarray:
    """Noise-free intensity image including the synthetic second return."""
    D = beam_rays(model, cfg.elevation_samples_per_beam)
    nb, ne = D.shape[:2]
    dirs_w = D.reshape(-1, 3) @ sensor_pose.rotation.T
    t, normal, refl = scene.raycast(sensor_pose.translation, dirs_w, model.r_max)
    beam = np.repeat(np.arange(nb), ne)
    energy = cfg.signal_gain * refl * np.abs(np.einsum("ij,ij->i", normal, dirs_w))
    img = np.zeros((model.range_bins, model.bearing_bins))
    hit = np.isfinite(t) & (t >= model.r_min)
    rb = model.range_bin(np.where(hit, t, -1.0))
    ok = hit & (rb >= 0)
    np.add.at(img, (rb[ok], beam[ok]), energy[ok])
    if cfg.second_return_gain > 0:
        rb2 = model.range_bin(np.where(hit, 2.0 * t, -1.0))
        ok2 = hit & (rb2 >= 0)
        np.add.at(img, (rb2[ok2], beam[ok2]), cfg.second_return_gain * energy[ok2])
    return img


def render_sonar(
    scene: Scene,
    pose: Pose,
    model: SonarModel,
    cfg: SimConfig,
    mount: Optional[Pose] = None,
    sonar_id: str = "horizontal",
    frame_index: int = 0,
) -> SonarFrame:
    """Simulated polar image of ``scene`` from a body at ``pose``.

    ``mount`` places the sonar in the body frame.  Noise for beam ``b`` is
    drawn from its own stream seeded by ``(rng_seed, frame_index, sonar, b)``.
    """
    sensor_pose = pose.compose(mount) if mount is not None else pose
    img = sonar_signal(scene, sensor_pose, model, cfg)
    sid = SONAR_IDS.index(sonar_id)
    out = np.empty_like(img)
    for b in range(model.bearing_bins):
        rng = np.random.default_rng([cfg.rng_seed, frame_index, sid, b])
        bg = rng.exponential(cfg.background, model.range_bins) if cfg.background > 0 else 0.0
        col = img[:, b]
        if cfg.speckle_sigma > 0:
            col = col * rng.lognormal(0.0, cfg.speckle_sigma, model.range_bins)
        out[:, b] = col + bg
    return SonarFrame(pose.t, sonar_id, out, model, pose)


def camera_rays(cam: CameraModel) -> np.ndarray:
    """Unit rays through every pixel center, camera frame, shape ``[H, W, 3]``."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    d = np.stack([(u - cam.cu) / cam.fx, (v - cam.cv) / cam.fy, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_roi_mask(
    scene: Scene,
    pose: Pose,
    rig: SensorRig,
    cfg: SimConfig,
    r_max: Optional[float] = None,
    frame_index: int = 0,
) -> RoiMask:
    """Ground-truth segmentation: pixels whose ray hits a primitive within ``r_max``.

    With probability ``mask_dropout_prob`` the whole mask comes back empty.
    """
    cam = rig.camera
    r_max = rig.sonar_h.r_max if r_max is None else r_max
    rng = np.random.default_rng([cfg.rng_seed, frame_index, len(SONAR_IDS)])
    if cfg.mask_dropout_prob > 0 and rng.random() < cfg.mask_dropout_prob:
        return RoiMask(np.zeros((cam.height, cam.width), dtype=bool), pose.t)
    cam_pose = pose.compose(rig.camera_in_body)
    dirs = camera_rays(cam).reshape(-1, 3) @ cam_pose.rotation.T
    t, _, _ = scene.raycast(cam_pose.translation, dirs, r_max)
    return RoiMask(np.isfinite(t).reshape(cam.height, cam.width), pose.t)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    """Level body poses, each yawed toward ``target`` unless ``look_at`` is off.

    ``orbit``: full circle of ``radius`` around ``center`` in ``n_steps``
    equal angular steps starting at ``start_angle``.
    ``arc``: ``sweep`` radians of that circle, endpoints included.
    ``line``: ``n_steps`` poses from ``start`` along ``direction`` every ``spacing``.
    ``z`` is the body height for orbit / arc.
    """

    kind: str = "orbit"
    n_steps: int = 36
    center: Tuple[float, float] = (0.0, 0.0)
    radius: float = 1.5
    z: float = 0.0
    start_angle: float = 0.0
    sweep: float = math.pi / 2
    start: Tuple[float, float, float] = (-1.5, -0.25, 0.0)
    direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    spacing: float = 0.05
    target: Optional[Tuple[float, float, float]] = None
    look_at: bool = True
    dt: float = 0.2
    t0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("orbit", "arc", "line"):
            raise ConfigurationError(f"unknown trajectory kind {self.kind!r}")
        if self.n_steps < 2:
            raise ConfigurationError("trajectory needs n_steps >= 2")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")


def generate_trajectory(spec: TrajectorySpec, n_steps: Optional[int] = None) -> List[Pose]:
    n = spec.n_steps if n_steps is None else n_steps
    if n < 2:
        raise ConfigurationError("trajectory needs n_steps >= 2")
    cx, cy = spec.center
    if spec.kind == "line":
        d = _unit(spec.direction, "line direction")
        pos = np.asarray(spec.start, dtype=float) + np.arange(n)[:, None] * spec.spacing * d
    else:
        if spec.kind == "orbit":
            ang = spec.start_angle + 2 * math.pi * np.arange(n) / n
        else:
            ang = spec.start_angle + spec.sweep * np.arange(n) / (n - 1)
        pos = np.column_stack([cx + spec.radius * np.cos(ang), cy + spec.radius * np.sin(ang), np.full(n, spec.z)])
    target = np.asarray(spec.target if spec.target is not None else (cx, cy, spec.z), dtype=float)
    poses = []
    for k, p in enumerate(pos):
        if spec.look_at:
            yaw = math.atan2(target[1] - p[1], target[0] - p[0])
        else:
            yaw = math.atan2(spec.direction[1], spec.direction[0]) if spec.kind == "line" else 0.0
        poses.append(Pose.from_yaw(yaw, p, spec.t0 + k * spec.dt))
    return poses


def write_trajectory(path, poses: Sequence[Pose]) -> None:
    """One line per pose: ``t tx ty tz qx qy qz qw``."""
    with open(path, "w") as fh:
        for p in poses:
            vals = [p.t, *p.translation.tolist(), *p.quaternion().tolist()]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_trajectory(path) -> List[Pose]:
    poses = []
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                v = [float(x) for x in line.split()]
                if len(v) != 8:
                    raise DataError(f"{path}: expected 8 values per line")
                poses.append(Pose.from_quaternion(v[4:8], v[1:4], v[0]))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return poses
