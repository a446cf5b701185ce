"""Map accuracy against ground-truth geometry."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyMapError
from .gpmap import OccupancyMap
from .simulator import Scene


@dataclass(frozen=True)
class EvalBounds:
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    inlier_threshold: float = 0.05

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ConfigurationError("bbox_min must be < bbox_max on every axis")
        if not self.inlier_threshold > 0:
            raise ConfigurationError("inlier_threshold must be positive")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    def contains(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        return np.all((P >= self.bbox_min) & (P <= self.bbox_max), axis=1)


@dataclass(frozen=True)
class EvalReport:
    """Error statistics in cm; timings in seconds (``None`` when not recorded)."""

    mae: float
    rmse: float
    sd: float
    precision: float
    inlier_voxels: int
    total_voxels: int
    mean_update_time: Optional[float] = None
    update_time_sd: Optional[float] = None

    def as_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is not None:
                lines.append(f"{k}: {v!r}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        return ",".join(k for k, v in asdict(self).items() if v is not None)

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in asdict(self).values() if v is not None)


def voxel_errors(omap: OccupancyMap, scene: Scene, bounds: EvalBounds) -> np.ndarray:
    """Unsigned distance (m) from each occupied in-bbox voxel center to the scene surface.

    Raises:
        EmptyMapError: no occupied voxel lies inside the bbox.
    """
    centers = omap.occupied_centers()
    centers = centers[bounds.contains(centers)]
    if centers.shape[0] == 0:
        raise EmptyMapError("no occupied voxels inside the evaluation bbox")
    return np.abs(scene.signed_distance(centers))


def summarize(distances: Sequence[float], bounds: EvalBounds, timings: Optional[Sequence[float]] = None) -> EvalReport:
    """MAE, RMSE, population SD (cm), and precision against ``bounds.inlier_threshold``."""
    d = np.asarray(distances, dtype=float).reshape(-1)
    if d.size == 0:
        raise EmptyMapError("no distances to summarize")
    # sort so the sums do not depend on input order
    d = np.sort(d)
    mae = float(np.mean(d))
    rmse = math.sqrt(float(np.mean(d * d)))
    sd = float(np.std(d))
    inliers = int(np.sum(d <= bounds.inlier_threshold))
    mean_t = sd_t = None
    if timings is not None and len(timings):
        ts = np.asarray(timings, dtype=float)
        mean_t, sd_t = float(ts.mean()), float(ts.std())
    return EvalReport(
        mae=100.0 * mae,
        rmse=100.0 * rmse,
        sd=100.0 * sd,
        precision=100.0 * inliers / d.size,
        inlier_voxels=inliers,
        total_voxels=int(d.size),
        mean_update_time=mean_t,
        update_time_sd=sd_t,
    )


def write_distances_csv(path, omap: OccupancyMap, scene: Scene, bounds: EvalBounds) -> None:
    centers = omap.occupied_centers()
    centers = centers[bounds.contains(centers)]
    d = np.abs(scene.signed_distance(centers))
    with open(path, "w") as fh:
        fh.write("x,y,z,distance\n")
        for c, v in zip(centers, d):
            fh.write(f"{c[0]!r},{c[1]!r},{c[2]!r},{float(v)!r}\n")
