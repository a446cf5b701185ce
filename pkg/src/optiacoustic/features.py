"""Sonar frames and SOCA-CFAR salient-feature extraction."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import comb

from .errors import ConfigurationError, DataError
from .geometry import Pose, SonarModel

SONAR_IDS = ("horizontal", "vertical")

_MAGIC = b"SFR1"
# magic, sonar_id, timestamp, range_bins, bearing_bins, r_min, r_max,
# bearing_min, bearing_max, phi_min, phi_max
_HEADER = struct.Struct("<4sBdIIdddddd")


@dataclass(frozen=True, eq=False)
class SonarFrame:
    """One polar intensity image ``I(r, theta)``, shape ``[range_bins, bearing_bins]``."""

    t: float
    sonar_id: str
    intensities: np.ndarray
    model: SonarModel
    pose: Optional[Pose] = None

    def __post_init__(self):
        if self.sonar_id not in SONAR_IDS:
            raise ConfigurationError(f"unknown sonar_id {self.sonar_id!r}")
        img = np.asarray(self.intensities, dtype=np.float64)
        if img.shape != (self.model.range_bins, self.model.bearing_bins):
            raise ConfigurationError(
                f"intensity shape {img.shape} does not match model "
                f"({self.model.range_bins}, {self.model.bearing_bins})"
            )
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise ConfigurationError("intensities must be finite and non-negative")
        img.setflags(write=False)
        object.__setattr__(self, "intensities", img)


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Sparse CFAR detections, ordered by ``(range_bin, bearing_bin)``."""

    range_bin: np.ndarray
    bearing_bin: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    intensity: np.ndarray
    sonar_id: str
    t: float
    model: SonarModel

    def __len__(self):
        return int(self.r.shape[0])

    @classmethod
    def from_bins(cls, range_bin, bearing_bin, intensity, model: SonarModel, sonar_id: str, t: float = 0.0):
        """Build from bin indices; ranges and bearings are bin centers."""
        rb = np.asarray(range_bin, dtype=np.int64).reshape(-1)
        bb = np.asarray(bearing_bin, dtype=np.int64).reshape(-1)
        inten = np.asarray(intensity, dtype=np.float64).reshape(-1)
        if np.any((rb < 0) | (rb >= model.range_bins) | (bb < 0) | (bb >= model.bearing_bins)):
            raise ConfigurationError("detection index outside frame bounds")
        order = np.lexsort((bb, rb))
        rb, bb, inten = rb[order], bb[order], inten[order]
        if rb.size > 1:
            dup = (np.diff(rb) == 0) & (np.diff(bb) == 0)
            if np.any(dup):
                raise ConfigurationError("duplicate (range_bin, bearing_bin) detection")
        return cls(rb, bb, model.range_of_bin(rb), model.bearing_of_bin(bb), inten, sonar_id, float(t), model)

    @classmethod
    def empty(cls, model: SonarModel, sonar_id: str, t: float = 0.0) -> "FeatureImage":
        return cls.from_bins([], [], [], model, sonar_id, t)

    def subset(self, keep: np.ndarray) -> "FeatureImage":
        return FeatureImage(
            self.range_bin[keep], self.bearing_bin[keep], self.r[keep], self.theta[keep],
            self.intensity[keep], self.sonar_id, self.t, self.model,
        )

    def with_intensities(self, intensity) -> "FeatureImage":
        return FeatureImage(
            self.range_bin, self.bearing_bin, self.r, self.theta,
            np.asarray(intensity, dtype=np.float64), self.sonar_id, self.t, self.model,
        )

    def detections(self) -> List[Tuple[int, int, float, float, float]]:
        return list(zip(self.range_bin.tolist(), self.bearing_bin.tolist(), self.r.tolist(),
                        self.theta.tolist(), self.intensity.tolist()))


@dataclass(frozen=True)
class CfarParams:
    train_cells: int = 20
    guard_cells: int = 4
    pfa: float = 0.01

    def __post_init__(self):
        if self.train_cells < 1:
            raise ConfigurationError("train_cells must be >= 1")
        if self.guard_cells < 0:
            raise ConfigurationError("guard_cells must be >= 0")
        if not 0.0 < self.pfa < 1.0:
            raise ConfigurationError("pfa must be in (0, 1)")


# ---------------------------------------------------------------------------
# Threshold factors
# ---------------------------------------------------------------------------


def soca_pfa(alpha: float, n: int) -> float:
    """False-alarm probability of SOCA-CFAR in exponential clutter.

    The cell under test is compared against ``alpha * min(mean_lead, mean_lag)``,
    both means taken over ``n`` cells.  With ``T = alpha / n`` applied to the
    window sums (Gandhi & Kassam):

        Pfa = 2 * sum_{k=0}^{n-1} C(n-1+k, k) * (2 + T)^-(n+k)
    """
    T = alpha / n
    k = np.arange(n)
    terms = comb(n - 1 + k, k, exact=False) * np.power(2.0 + T, -(n + k).astype(float))
    return float(2.0 * terms.sum())


@lru_cache(maxsize=64)
def soca_alpha(pfa: float, n: int) -> float:
    """Threshold factor for SOCA-CFAR with ``n`` training cells per side."""
    hi = 1.0
    while soca_pfa(hi, n) > pfa:
        hi *= 2.0
    return float(brentq(lambda a: soca_pfa(a, n) - pfa, 0.0, hi, xtol=1e-14, rtol=1e-14))


def ca_alpha(pfa: float, n: int) -> float:
    """Threshold factor for one-sided cell averaging over ``n`` cells.

    Exponential clutter: ``Pfa = (1 + alpha / n) ** -n``.
    """
    return float(n * (pfa ** (-1.0 / n) - 1.0))


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------


def cfar_threshold(intensities: np.ndarray, params: CfarParams) -> np.ndarray:
    """Per-cell detection threshold; windows run along the range axis (axis 0).

    Interior cells use ``soca_alpha * min(lead_mean, lag_mean)``.  Within
    ``train + guard`` cells of either range edge only one window fits; those
    cells fall back to one-sided cell averaging on the window that fits.
    """
    img = np.asarray(intensities, dtype=np.float64)
    n, g = params.train_cells, params.guard_cells
    R = img.shape[0]
    if R <= 2 * (n + g):
        raise ConfigurationError(
            f"CFAR window 2*(train+guard)={2 * (n + g)} does not fit {R} range bins"
        )
    # window k covers rows [k, k + n); summed directly so cells outside a window never touch its mean
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=0).sum(axis=-1) / n
    idx = np.arange(R)
    # leading window (nearer ranges): [i-g-n, i-g-1]; lagging: [i+g+1, i+g+n]
    lead_ok = idx - g - n >= 0
    lag_ok = idx + g + n <= R - 1
    lead = np.full(img.shape, np.inf)
    lag = np.full(img.shape, np.inf)
    lead[lead_ok] = win[idx[lead_ok] - g - n]
    lag[lag_ok] = win[idx[lag_ok] + g + 1]

    both = (lead_ok & lag_ok)[:, None]
    a_so = soca_alpha(params.pfa, n)
    a_ca = ca_alpha(params.pfa, n)
    return np.where(both, a_so * np.minimum(lead, lag), a_ca * np.minimum(lead, lag))


def soca_cfar(frame: SonarFrame, params: Optional[CfarParams] = None) -> FeatureImage:
    """Smallest-of cell-averaging CFAR over each beam of a sonar frame.

    Every cell whose intensity strictly exceeds its threshold is kept,
    including multiple returns along one bearing.
    """
    params = params or CfarParams()
    img = frame.intensities
    thr = cfar_threshold(img, params)
    rb, bb = np.nonzero(img > thr)
    return FeatureImage.from_bins(rb, bb, img[rb, bb], frame.model, frame.sonar_id, frame.t)


def feature_ranges(F: FeatureImage) -> List[Tuple[float, float, float]]:
    """Detections as ``(r, theta, intensity)`` sorted by range, then bearing."""
    order = np.lexsort((F.theta, F.r))
    return [(float(F.r[i]), float(F.theta[i]), float(F.intensity[i])) for i in order]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_sonar_frame(path, frame: SonarFrame) -> None:
    """Write the little-endian ``SFR1`` binary format."""
    m = frame.model
    header = _HEADER.pack(
        _MAGIC, SONAR_IDS.index(frame.sonar_id), frame.t, m.range_bins, m.bearing_bins,
        m.r_min, m.r_max, m.bearing_min, m.bearing_max, m.phi_min, m.phi_max,
    )
    body = np.ascontiguousarray(frame.intensities, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_sonar_frame(path, pose: Optional[Pose] = None) -> SonarFrame:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    (magic, sid, t, nr, nb, r_min, r_max, b_min, b_max, p_min, p_max) = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if sid >= len(SONAR_IDS):
        raise DataError(f"{path}: bad sonar id {sid}")
    expected = _HEADER.size + 4 * nr * nb
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
    try:
        model = SonarModel(r_min, r_max, nr, b_min, b_max, nb, p_min, p_max)
        img = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(nr, nb)
        return SonarFrame(t, SONAR_IDS[sid], img.astype(np.float64), model, pose)
    except ConfigurationError as exc:
        raise DataError(f"{path}: {exc}") from exc


def read_sonar_csv(path, model: SonarModel, sonar_id: str = "horizontal", t: float = 0.0,
                   pose: Optional[Pose] = None) -> SonarFrame:
    """Load a hand-made fixture: one CSV row per range bin, one column per bearing bin."""
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
    return SonarFrame(t, sonar_id, np.array(rows, dtype=np.float64), model, pose)
