"""
Coordinate frames, the imaging-sonar spherical model and the pinhole camera.

Frame conventions
-----------------
- Sonar frame: x forward, y port (left), z up.  A return at range ``r``,
  bearing ``theta`` and elevation ``phi`` sits at
  ``r * (cos(phi) cos(theta), cos(phi) sin(theta), sin(phi))``.
- Camera frame: z forward, x right, y down (OpenCV pinhole convention).
- Body frame: coincides with the horizontal sonar frame.  Poses map body
  coordinates into the world frame.

Extrinsics store ``P_dst = R @ P_src + t``; the axis permutation between
sonar and camera conventions lives in ``R``.

All angles are radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, DegenerateInputError

ORTHONORMAL_TOL = 1e-9
NEAR_PLANE = 1e-6

# body (x fwd, y left, z up) -> camera (x right, y down, z fwd)
BODY_TO_CAMERA_AXES = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)


def _check_rotation(R: np.ndarray, what: str) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ConfigurationError(f"{what}: rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
        raise ConfigurationError(f"{what}: rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
        raise ConfigurationError(f"{what}: rotation determinant is not +1")
    return R


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Body pose in the world frame (world <- body) at time ``t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        R = _check_rotation(self.rotation, "Pose")
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def from_yaw(cls, yaw: float, translation, t: float = 0.0) -> "Pose":
        return cls(rot_z(yaw), np.asarray(translation, dtype=float), t)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation, t: float = 0.0) -> "Pose":
        R = Rotation.from_quat(np.asarray(quat_xyzw, dtype=float)).as_matrix()
        # re-orthonormalize: quaternions read back from text carry rounding
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, translation, t)

    def quaternion(self) -> np.ndarray:
        """Rotation as a unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.t,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map body-frame points (..., 3) into the world frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def translation_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(other.translation - self.translation))

    def angle_to(self, other: "Pose") -> float:
        """Magnitude of the relative rotation, radians."""
        rel = self.rotation.T @ other.rotation
        return float(Rotation.from_matrix(rel).magnitude())

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.t == other.t
        )

    def __repr__(self):
        return f"Pose(t={self.t}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Rigid transform ``P_dst = R @ P_src + t`` between two sensor frames."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _check_rotation(self.rotation, "Extrinsics")
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", tr)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "Extrinsics":
        Rt = self.rotation.T
        return Extrinsics(Rt, -Rt @ self.translation)

    def then(self, other: "Extrinsics") -> "Extrinsics":
        """Chain: apply ``self`` then ``other``."""
        return Extrinsics(
            other.rotation @ self.rotation,
            other.rotation @ self.translation + other.translation,
        )

    def origin_in_destination(self) -> np.ndarray:
        """Position of the source frame origin expressed in the destination frame."""
        return self.translation.copy()

    def as_pose(self) -> Pose:
        return Pose(self.rotation, self.translation)

    def __eq__(self, other):
        if not isinstance(other, Extrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


# ---------------------------------------------------------------------------
# Sensor models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphericalPoint:
    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if not self.r > 0:
            raise DegenerateInputError(f"range must be positive, got {self.r}")
        for name in ("theta", "phi"):
            v = getattr(self, name)
            if not -np.pi <= v < np.pi:
                raise ConfigurationError(f"{name}={v} outside [-pi, pi)")

    def to_cartesian(self) -> np.ndarray:
        return spherical_to_cartesian(self.r, self.theta, self.phi)


@dataclass(frozen=True)
class SonarModel:
    """Polar image geometry of one imaging sonar."""

    r_min: float = 0.1
    r_max: float = 3.0
    range_bins: int = 512
    bearing_min: float = float(np.deg2rad(-65.0))
    bearing_max: float = float(np.deg2rad(65.0))
    bearing_bins: int = 256
    phi_min: float = float(np.deg2rad(-10.0))
    phi_max: float = float(np.deg2rad(10.0))

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ConfigurationError("SonarModel: r_min must be < r_max")
        if not self.bearing_min < self.bearing_max:
            raise ConfigurationError("SonarModel: bearing_min must be < bearing_max")
        if not self.phi_min < self.phi_max:
            raise ConfigurationError("SonarModel: phi_min must be < phi_max")
        if self.range_bins < 1 or self.bearing_bins < 1:
            raise ConfigurationError("SonarModel: bin counts must be >= 1")

    @property
    def range_resolution(self) -> float:
        return (self.r_max - self.r_min) / self.range_bins

    @property
    def bearing_resolution(self) -> float:
        return (self.bearing_max - self.bearing_min) / self.bearing_bins

    def range_of_bin(self, idx) -> np.ndarray:
        return self.r_min + (np.asarray(idx) + 0.5) * self.range_resolution

    def bearing_of_bin(self, idx) -> np.ndarray:
        return self.bearing_min + (np.asarray(idx) + 0.5) * self.bearing_resolution

    def range_bin(self, r) -> np.ndarray:
        """Bin index containing range ``r``; -1 outside ``[r_min, r_max)``."""
        r = np.asarray(r, dtype=float)
        idx = np.floor((r - self.r_min) / self.range_resolution).astype(np.int64)
        return np.where((idx >= 0) & (idx < self.range_bins), idx, -1)

    def bearing_bin(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        idx = np.floor((theta - self.bearing_min) / self.bearing_resolution).astype(np.int64)
        return np.where((idx >= 0) & (idx < self.bearing_bins), idx, -1)


@dataclass(frozen=True)
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cu: float = 319.5
    cv: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("CameraModel: focal lengths must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ConfigurationError("CameraModel: optical center outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cu], [0.0, self.fy, self.cv], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [[1.0 / self.fx, 0.0, -self.cu / self.fx],
             [0.0, 1.0 / self.fy, -self.cv / self.fy],
             [0.0, 0.0, 1.0]]
        )


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def spherical_to_cartesian(r, theta, phi) -> np.ndarray:
    """Sonar spherical coordinates to Cartesian points in the sonar frame.

    Inputs broadcast against each other; the result has shape ``(..., 3)``.
    """
    r, theta, phi = np.broadcast_arrays(
        np.asarray(r, dtype=float), np.asarray(theta, dtype=float), np.asarray(phi, dtype=float)
    )
    cphi = np.cos(phi)
    return np.stack([r * cphi * np.cos(theta), r * cphi * np.sin(theta), r * np.sin(phi)], axis=-1)


def cartesian_to_spherical(P) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`spherical_to_cartesian`; returns ``(r, theta, phi)``.

    Raises:
        DegenerateInputError: if any input point has zero norm.
    """
    P = np.asarray(P, dtype=float)
    r = np.linalg.norm(P, axis=-1)
    if np.any(r == 0):
        raise DegenerateInputError("cannot convert the origin to spherical coordinates")
    theta = np.arctan2(P[..., 1], P[..., 0])
    phi = np.arcsin(np.clip(P[..., 2] / r, -1.0, 1.0))
    return r, theta, phi


def sonar_to_camera(P_s, ext: Extrinsics) -> np.ndarray:
    return ext.apply(P_s)


def project_to_image(P_s, ext: Extrinsics, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Project sonar-frame points to pixel coordinates.

    Returns:
        uv: ``(N, 2)`` float pixel coordinates (NaN where invalid).
        valid: ``(N,)`` bool; False for points behind the camera or closer
            than the near-plane guard.  Invalid points are never projected.
    """
    P_c = np.atleast_2d(ext.apply(P_s))
    z = P_c[:, 2]
    valid = z >= NEAR_PLANE
    uv = np.full((P_c.shape[0], 2), np.nan)
    zv = z[valid]
    uv[valid, 0] = cam.fx * P_c[valid, 0] / zv + cam.cu
    uv[valid, 1] = cam.fy * P_c[valid, 1] / zv + cam.cv
    return uv, valid


def back_project(pixels, depth, cam: CameraModel) -> np.ndarray:
    """Camera-frame point(s) ``z * K^-1 [u, v, 1]`` for pixel(s) at depth ``z``.

    Raises:
        DegenerateInputError: if any depth is not strictly positive.
    """
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise DegenerateInputError("back-projection depth must be positive")
    u = pixels[..., 0]
    v = pixels[..., 1]
    x = (u - cam.cu) / cam.fx
    y = (v - cam.cv) / cam.fy
    x, y, depth = np.broadcast_arrays(x, y, depth)
    return np.stack([depth * x, depth * y, depth], axis=-1)


def pixel_indices(uv: np.ndarray, valid: np.ndarray, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-pixel (column, row) indices; ``inside`` marks in-frame valid projections."""
    col = np.full(uv.shape[0], -1, dtype=np.int64)
    row = np.full(uv.shape[0], -1, dtype=np.int64)
    c = np.floor(uv[valid, 0] + 0.5)
    r = np.floor(uv[valid, 1] + 0.5)
    col[valid] = np.where(np.isfinite(c), c, -1).astype(np.int64)
    row[valid] = np.where(np.isfinite(r), r, -1).astype(np.int64)
    inside = valid & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    return col, row, inside


# ---------------------------------------------------------------------------
# Sensor rig
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SensorRig:
    """Two orthogonal imaging sonars and one camera on a common body.

    ``h_to_camera`` maps horizontal-sonar (body) points into the camera frame;
    ``v_to_h`` maps vertical-sonar points into the horizontal-sonar frame.
    """

    sonar_h: SonarModel = field(default_factory=SonarModel)
    sonar_v: SonarModel = field(default_factory=SonarModel)
    camera: CameraModel = field(default_factory=CameraModel)
    h_to_camera: Extrinsics = field(default_factory=Extrinsics)
    v_to_h: Extrinsics = field(default_factory=Extrinsics)

    @property
    def v_to_camera(self) -> Extrinsics:
        return self.v_to_h.then(self.h_to_camera)

    @property
    def camera_origin(self) -> np.ndarray:
        """Camera center in the body frame."""
        return self.h_to_camera.inverse().translation.copy()

    @property
    def camera_in_body(self) -> Pose:
        return self.h_to_camera.inverse().as_pose()

    @property
    def vertical_in_body(self) -> Pose:
        return self.v_to_h.as_pose()


def default_rig(
    sonar_roll: float = np.pi / 2,
    sonar_offset: float = 0.10,
    camera_offset: Tuple[float, float] = (0.15, 0.15),
    sonar: Optional[SonarModel] = None,
    camera: Optional[CameraModel] = None,
) -> SensorRig:
    """Rig mirroring the tank vehicle.

    The vertical sonar is the horizontal one rolled by ``sonar_roll`` about
    the forward axis and raised by ``sonar_offset``.  The camera sits
    ``camera_offset = (lateral, vertical)`` to starboard and below the
    horizontal sonar, looking forward.
    """
    sonar = sonar or SonarModel()
    camera = camera or CameraModel()
    lateral, vertical = camera_offset
    cam_center = np.array([0.0, -lateral, -vertical])
    h_to_camera = Extrinsics(BODY_TO_CAMERA_AXES, -BODY_TO_CAMERA_AXES @ cam_center)
    v_to_h = Extrinsics(rot_x(sonar_roll), np.array([0.0, 0.0, sonar_offset]))
    return SensorRig(sonar, sonar, camera, h_to_camera, v_to_h)
