"""
Confidence-weighted Gaussian-process occupancy mapping.

Each keyframe's fused cloud becomes a training set of occupied hits and
free-space samples, each carrying its own noise variance.  A heteroscedastic
GP with a Matern-3/2 kernel is solved per spatial tile, predictions at voxel
centers are merged into the global map with a Bayesian committee machine,
and cells are labelled free / occupied / unknown from the logistic-squashed
posterior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import ConditioningError, ConfigurationError, DataError
from .fusion import STEREO, ConfidencePointCloud
from .geometry import Pose

log = logging.getLogger(__name__)

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
STATE_NAMES = ("free", "occupied", "unknown")

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel, logistic and classification constants.

    ``label_convention`` selects the regression targets: ``"binary"`` uses
    hit=1 / free=0, ``"signed"`` uses hit=+1 / free=-1.
    """

    sigma_n2: float = 0.01
    length_scale: float = 0.025
    sigma_f2: float = 0.1
    sigma_min2: float = 0.001
    sigma_t2: float = 50.0
    gamma: float = 100.0
    p_free: float = 0.3
    p_occupied: float = 0.7
    label_convention: str = "binary"

    def __post_init__(self):
        for name in ("sigma_n2", "length_scale", "sigma_f2", "sigma_min2", "sigma_t2", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 < self.p_free < self.p_occupied < 1.0:
            raise ConfigurationError("need 0 < p_free < p_occupied < 1")
        if self.label_convention not in ("binary", "signed"):
            raise ConfigurationError(f"unknown label_convention {self.label_convention!r}")

    @property
    def free_label(self) -> float:
        return 0.0 if self.label_convention == "binary" else -1.0


# ---------------------------------------------------------------------------
# Kernel and regression
# ---------------------------------------------------------------------------


def matern32(d, hp: GpHyperparams):
    """Matern covariance with smoothness 3/2."""
    s = SQRT3 * np.asarray(d, dtype=float) / hp.length_scale
    return hp.sigma_f2 * (1.0 + s) * np.exp(-s)


@dataclass(eq=False)
class TrainingSet:
    """World-frame inputs ``X``, occupancy targets ``y``, per-point noise variances."""

    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, 3)
        n = self.X.shape[0]
        self.y = np.asarray(self.y, dtype=float).reshape(n)
        self.noise = np.asarray(self.noise, dtype=float).reshape(n)
        if np.any(~(self.noise > 0)):
            raise ConfigurationError("training noise variances must be positive")

    def __len__(self):
        return int(self.X.shape[0])

    def subset(self, keep) -> "TrainingSet":
        return TrainingSet(self.X[keep], self.y[keep], self.noise[keep])

    @classmethod
    def empty(cls) -> "TrainingSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.ones(0))


def _factorize(A: np.ndarray, sigma_f2: float, retries: int = 3) -> np.ndarray:
    try:
        return cholesky(A, lower=True, check_finite=False)
    except LinAlgError:
        pass
    jitter = 1e-9 * sigma_f2
    for attempt in range(retries):
        try:
            L = cholesky(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=False)
            log.debug("cholesky succeeded with jitter %.3g", jitter)
            return L
        except LinAlgError:
            jitter *= 10.0
    raise ConditioningError(f"K + Sigma not positive definite after {retries} jitter retries")


def _posterior(A: np.ndarray, y: np.ndarray, Ks: np.ndarray, hp: GpHyperparams):
    L = _factorize(A, hp.sigma_f2)
    alpha = solve_triangular(L.T, solve_triangular(L, y, lower=True, check_finite=False),
                             lower=False, check_finite=False)
    mu = Ks.T @ alpha
    V = solve_triangular(L, Ks, lower=True, check_finite=False)
    var = hp.sigma_f2 - np.einsum("ij,ij->j", V, V)
    # rounding can push the variance to/below zero at near-noiseless training points
    return mu, np.clip(var, 1e-12 * hp.sigma_f2, hp.sigma_f2)


def gp_predict(train: TrainingSet, queries, hp: GpHyperparams) -> Tuple[np.ndarray, np.ndarray]:
    """Heteroscedastic GP posterior mean and variance at ``queries``.

    ``mu = k*^T (K + Sigma)^-1 y`` and ``var = k(x*, x*) - k*^T (K + Sigma)^-1 k*``
    with ``Sigma = diag(train.noise)``.

    Raises:
        ConditioningError: if ``K + Sigma`` cannot be factorized.
    """
    Q = np.asarray(queries, dtype=float).reshape(-1, 3)
    if len(train) == 0:
        raise ConfigurationError("gp_predict needs at least one training point")
    K = matern32(cdist(train.X, train.X), hp)
    Ks = matern32(cdist(train.X, Q), hp)
    return _posterior(K + np.diag(train.noise), train.y, Ks, hp)


def gp_predict_homoscedastic(X, y, queries, hp: GpHyperparams) -> Tuple[np.ndarray, np.ndarray]:
    """Standard GP with a single noise variance ``hp.sigma_n2``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Q = np.asarray(queries, dtype=float).reshape(-1, 3)
    K = matern32(cdist(X, X), hp)
    Ks = matern32(cdist(X, Q), hp)
    return _posterior(K + hp.sigma_n2 * np.eye(X.shape[0]), np.asarray(y, dtype=float), Ks, hp)


def logistic_occupancy(mu, var, hp: GpHyperparams):
    """Occupancy probability ``1 / (1 + exp(-gamma * sigma_min2 * mu / var))``."""
    w = hp.sigma_min2 * np.asarray(mu, dtype=float) / np.asarray(var, dtype=float)
    z = hp.gamma * w
    # numerically stable logistic
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def classify_cell(p, var, hp: GpHyperparams):
    """Tri-state label; both comparisons are strict."""
    p = np.asarray(p, dtype=float)
    var = np.asarray(var, dtype=float)
    confident = var < hp.sigma_t2
    out = np.full(np.broadcast(p, var).shape, UNKNOWN, dtype=np.uint8)
    out[(p > hp.p_occupied) & confident] = OCCUPIED
    out[(p < hp.p_free) & confident] = FREE
    return out if out.ndim else int(out)


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    """Free-space sampling along sensor rays.

    Samples sit at ``r_min, r_min + free_spacing, ...`` from the ray origin,
    up to ``hit_range - free_margin``.  Only points whose class is listed in
    ``free_ray_classes`` spawn rays.
    """

    free_spacing: float = 0.05
    free_margin: float = 0.1
    r_min: float = 0.1
    free_noise_var: float = 0.05
    free_ray_classes: Tuple[int, ...] = (STEREO,)

    def __post_init__(self):
        if not (self.free_spacing > 0 and self.free_margin >= 0 and self.r_min >= 0):
            raise ConfigurationError("invalid free-space sampling parameters")
        if not self.free_noise_var > 0:
            raise ConfigurationError("free_noise_var must be positive")


def free_space_samples(origins: np.ndarray, hits: np.ndarray, cfg: TrainingConfig) -> np.ndarray:
    """Free samples along each ``origin -> hit`` ray (same frame as inputs)."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    hits = np.asarray(hits, dtype=float).reshape(-1, 3)
    if hits.shape[0] == 0:
        return np.zeros((0, 3))
    ray = hits - origins
    rng = np.linalg.norm(ray, axis=1)
    stop = rng - cfg.free_margin
    counts = np.where(stop >= cfg.r_min, np.floor((stop - cfg.r_min) / cfg.free_spacing + 1e-9) + 1, 0).astype(np.int64)
    if counts.sum() == 0:
        return np.zeros((0, 3))
    which = np.repeat(np.arange(hits.shape[0]), counts)
    k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    dist = cfg.r_min + k * cfg.free_spacing
    unit = ray[which] / rng[which, None]
    return origins[which] + dist[:, None] * unit


def build_training_set(
    cloud: ConfidencePointCloud,
    hp: GpHyperparams,
    cfg: Optional[TrainingConfig] = None,
    pose: Optional[Pose] = None,
) -> TrainingSet:
    """Occupied hits plus ray free-space samples, in the world frame.

    Hits keep their class noise variance; free samples get
    ``cfg.free_noise_var``.  ``pose`` defaults to ``cloud.pose`` (identity if
    neither is set).
    """
    cfg = cfg or TrainingConfig()
    pose = pose or cloud.pose or Pose()
    if len(cloud) == 0:
        return TrainingSet.empty()
    ray_sel = np.isin(cloud.cls, np.asarray(cfg.free_ray_classes, dtype=np.uint8))
    free = free_space_samples(cloud.origins[ray_sel], cloud.points[ray_sel], cfg)
    X = np.vstack([cloud.points, free])
    y = np.concatenate([np.ones(len(cloud)), np.full(free.shape[0], hp.free_label)])
    noise = np.concatenate([cloud.noise_var, np.full(free.shape[0], cfg.free_noise_var)])
    return TrainingSet(pose.transform(X), y, noise)


def deduplicate(train: TrainingSet, resolution: float, origin=(0.0, 0.0, 0.0)) -> TrainingSet:
    """Keep one sample per (voxel, label): the one with the lowest noise variance."""
    if len(train) == 0:
        return train
    idx = np.floor((train.X - np.asarray(origin)) / resolution).astype(np.int64)
    # stable sort by noise so the first occurrence of each key is the most confident
    order = np.argsort(train.noise, kind="stable")
    keys = np.column_stack([idx[order], train.y[order].astype(np.int64)])
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(order[first])
    return train.subset(keep)


# ---------------------------------------------------------------------------
# Keyframes
# ---------------------------------------------------------------------------


@dataclass
class KeyframeGate:
    """Accept a pose once it has moved ``d_thresh`` or turned ``angle_thresh``."""

    d_thresh: float = 0.05
    angle_thresh: float = float(np.deg2rad(10.0))
    last_pose: Optional[Pose] = None

    def __post_init__(self):
        if not (self.d_thresh > 0 and self.angle_thresh > 0):
            raise ConfigurationError("keyframe thresholds must be positive")

    def accept(self, pose: Pose) -> bool:
        if self.last_pose is not None:
            moved = self.last_pose.translation_to(pose)
            turned = self.last_pose.angle_to(pose)
            # 1e-9 absorbs rounding when a step equals a threshold exactly
            if moved < self.d_thresh - 1e-9 and turned < self.angle_thresh - 1e-9:
                return False
        self.last_pose = pose
        return True


def keyframe_gate(pose: Pose, gate: KeyframeGate) -> bool:
    return gate.accept(pose)


# ---------------------------------------------------------------------------
# Map
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class CellBelief:
    mu: float
    var: float
    n_updates: int = 0


@dataclass(frozen=True)
class TilingConfig:
    """Spatial partitioning of each keyframe's GP solve.

    ``halo=None`` uses three length scales.  ``query_radius=None`` predicts at
    every voxel of a tile core; otherwise only voxels within that distance of
    a training point are queried.
    """

    tile_size: float = 0.5
    halo: Optional[float] = None
    query_radius: Optional[float] = 0.05

    def halo_for(self, hp: GpHyperparams) -> float:
        h = 3.0 * hp.length_scale if self.halo is None else self.halo
        if h < 3.0 * hp.length_scale - 1e-12:
            raise ConfigurationError("tile halo must be at least three length scales")
        return h


class OccupancyMap:
    """Sparse voxel map of fused GP beliefs."""

    def __init__(self, resolution: float = 0.025, origin=(0.0, 0.0, 0.0), hp: Optional[GpHyperparams] = None):
        if not resolution > 0:
            raise ConfigurationError("resolution must be positive")
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.hp = hp or GpHyperparams()
        self.cells: Dict[Tuple[int, int, int], CellBelief] = {}

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        if not isinstance(other, OccupancyMap):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.origin, other.origin)
            and self.cells == other.cells
        )

    def index_of(self, points) -> np.ndarray:
        return np.floor((np.asarray(points, dtype=float) - self.origin) / self.resolution).astype(np.int64)

    def center_of(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def fuse(self, idx: np.ndarray, mu: np.ndarray, var: np.ndarray) -> None:
        """BCM merge of per-voxel predictions into the stored beliefs.

        ``1/var' = 1/var + 1/var_new - 1/sigma_f2`` and
        ``mu' = var' * (mu/var + mu_new/var_new)``; an unseen cell starts
        from the prior ``(0, sigma_f2)``.
        """
        inv_prior = 1.0 / self.hp.sigma_f2
        var = np.minimum(var, self.hp.sigma_f2)
        for key, m, v in zip(map(tuple, idx.tolist()), mu.tolist(), var.tolist()):
            cell = self.cells.get(key)
            if cell is None:
                self.cells[key] = CellBelief(m, v, 1)
                continue
            prec = 1.0 / cell.var + 1.0 / v - inv_prior
            new_var = 1.0 / prec
            cell.mu = new_var * (cell.mu / cell.var + m / v)
            cell.var = new_var
            cell.n_updates += 1

    def arrays(self):
        """Lexicographically sorted ``(idx, mu, var, n_updates)`` arrays."""
        if not self.cells:
            return np.zeros((0, 3), np.int64), np.zeros(0), np.zeros(0), np.zeros(0, np.int64)
        keys = sorted(self.cells)
        idx = np.array(keys, dtype=np.int64)
        mu = np.array([self.cells[k].mu for k in keys])
        var = np.array([self.cells[k].var for k in keys])
        n = np.array([self.cells[k].n_updates for k in keys], dtype=np.int64)
        return idx, mu, var, n

    def states(self):
        idx, mu, var, _ = self.arrays()
        p = logistic_occupancy(mu, var, self.hp)
        return idx, np.asarray(classify_cell(p, var, self.hp), dtype=np.uint8).reshape(-1)

    def occupied_centers(self) -> np.ndarray:
        idx, st = self.states()
        return self.center_of(idx[st == OCCUPIED]) if idx.size else np.zeros((0, 3))

    def state_of(self, point) -> int:
        key = tuple(self.index_of(point).tolist())
        cell = self.cells.get(key)
        if cell is None:
            return UNKNOWN
        p = logistic_occupancy(cell.mu, cell.var, self.hp)
        return int(classify_cell(p, cell.var, self.hp))


def _ball_offsets(radius_vox: float) -> np.ndarray:
    r = int(math.floor(radius_vox))
    g = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return off[np.sum(off * off, axis=1) <= radius_vox**2 + 1e-9]


def _tile_queries(omap: OccupancyMap, tile: np.ndarray, tile_size: float, near: np.ndarray,
                  query_radius: Optional[float]) -> np.ndarray:
    """Voxel indices whose centers fall in the tile core."""
    lo = omap.origin + tile * tile_size
    hi = lo + tile_size
    res = omap.resolution
    if query_radius is None:
        i0 = np.ceil((lo - omap.origin) / res - 0.5 - 1e-9).astype(np.int64)
        i1 = np.ceil((hi - omap.origin) / res - 0.5 - 1e-9).astype(np.int64)
        axes = [np.arange(a, b) for a, b in zip(i0, i1)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    base = np.unique(omap.index_of(near), axis=0)
    cand = (base[:, None, :] + _ball_offsets(query_radius / res)[None, :, :]).reshape(-1, 3)
    cand = np.unique(cand, axis=0)
    c = omap.center_of(cand)
    inside = np.all((c >= lo) & (c < hi), axis=1)
    return cand[inside]


@dataclass
class UpdateStats:
    n_train: int = 0
    n_tiles: int = 0
    n_queries: int = 0
    skipped_tiles: int = 0


def update_map(
    omap: OccupancyMap,
    cloud: ConfidencePointCloud,
    hp: Optional[GpHyperparams] = None,
    tiling: Optional[TilingConfig] = None,
    training: Optional[TrainingConfig] = None,
    pose: Optional[Pose] = None,
) -> UpdateStats:
    """Regress one keyframe's cloud tile by tile and BCM-fuse it into ``omap``.

    A tile whose system cannot be factorized is skipped and logged; the
    rest of the frame is still fused.
    """
    hp = hp or omap.hp
    tiling = tiling or TilingConfig()
    stats = UpdateStats()
    train = build_training_set(cloud, hp, training, pose)
    train = deduplicate(train, omap.resolution, omap.origin)
    stats.n_train = len(train)
    if len(train) == 0:
        return stats

    halo = tiling.halo_for(hp)
    ts = tiling.tile_size
    tiles = np.floor((train.X - omap.origin) / ts).astype(np.int64)
    for tile in np.unique(tiles, axis=0):
        lo = omap.origin + tile * ts
        hi = lo + ts
        sel = np.all((train.X >= lo - halo) & (train.X < hi + halo), axis=1)
        local = train.subset(sel)
        q_idx = _tile_queries(omap, tile, ts, local.X, tiling.query_radius)
        if q_idx.shape[0] == 0:
            continue
        stats.n_tiles += 1
        try:
            mu, var = gp_predict(local, omap.center_of(q_idx), hp)
        except ConditioningError as exc:
            log.warning("tile %s skipped: %s", tile.tolist(), exc)
            stats.skipped_tiles += 1
            continue
        omap.fuse(q_idx, mu, var)
        stats.n_queries += q_idx.shape[0]
    return stats


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

_CSV_COLUMNS = "i,j,k,x,y,z,mu,var,n_updates,state"


def export_map(omap: OccupancyMap, path) -> None:
    """Full-belief CSV, voxel indices in lexicographic order.

    Floats are written with ``repr`` so :func:`import_map` restores them exactly.
    """
    idx, mu, var, n = omap.arrays()
    _, st = omap.states()
    centers = omap.center_of(idx) if idx.size else np.zeros((0, 3))
    hp = omap.hp
    with open(path, "w") as fh:
        fh.write(f"# resolution={omap.resolution!r}\n")
        fh.write("# origin=" + ",".join(repr(float(v)) for v in omap.origin) + "\n")
        for name in ("sigma_n2", "length_scale", "sigma_f2", "sigma_min2", "sigma_t2", "gamma",
                     "p_free", "p_occupied", "label_convention"):
            fh.write(f"# {name}={getattr(hp, name)!r}\n")
        fh.write(_CSV_COLUMNS + "\n")
        for r in range(idx.shape[0]):
            i, j, k = idx[r].tolist()
            x, y, z = centers[r].tolist()
            fh.write(f"{i},{j},{k},{x!r},{y!r},{z!r},{float(mu[r])!r},{float(var[r])!r},{int(n[r])},{int(st[r])}\n")


def import_map(path) -> OccupancyMap:
    path = Path(path)
    meta = {}
    rows = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    meta[key] = val
                elif line == _CSV_COLUMNS:
                    continue
                else:
                    rows.append(line.split(","))
        resolution = float(meta["resolution"])
        origin = [float(v) for v in meta["origin"].split(",")]
        hp_kw = {k: float(meta[k]) for k in ("sigma_n2", "length_scale", "sigma_f2", "sigma_min2",
                                            "sigma_t2", "gamma", "p_free", "p_occupied") if k in meta}
        if "label_convention" in meta:
            hp_kw["label_convention"] = meta["label_convention"].strip("'\"")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: cannot read map ({exc})") from exc
    omap = OccupancyMap(resolution, origin, GpHyperparams(**hp_kw))
    for r in rows:
        try:
            key = (int(r[0]), int(r[1]), int(r[2]))
            omap.cells[key] = CellBelief(float(r[6]), float(r[7]), int(r[8]))
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}: malformed row {r}") from exc
    return omap


def export_occupied_ply(omap: OccupancyMap, path) -> None:
    """ASCII PLY of occupied voxel centers with ``mu``, ``var`` and ``state``."""
    idx, mu, var, _ = omap.arrays()
    _, st = omap.states()
    occ = st == OCCUPIED
    centers = omap.center_of(idx[occ]) if idx.size else np.zeros((0, 3))
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {int(occ.sum())}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float mu\nproperty float var\nproperty uchar state\nend_header\n")
        for c, m, v in zip(centers, mu[occ], var[occ]):
            fh.write(f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {m:.9g} {v:.9g} {OCCUPIED}\n")
