"""Pipeline configuration: one YAML file of named sections plus dotted overrides.

Values are stored as written (angles in degrees); the ``build_*`` methods turn
sections into the typed objects each module expects and enforce their
invariants.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .errors import ConfigurationError
from .evaluation import EvalBounds
from .features import CfarParams
from .fusion import CLASS_NAMES, FusionConfig
from .geometry import CameraModel, SensorRig, SonarModel, default_rig
from .gpmap import GpHyperparams, KeyframeGate, OccupancyMap, TilingConfig, TrainingConfig
from .simulator import SimConfig, TrajectorySpec

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "sonar": {
        "r_min": 0.1, "r_max": 3.0, "range_bins": 512,
        "bearing_fov_deg": 130.0, "bearing_bins": 256, "elevation_fov_deg": 20.0,
    },
    "camera": {"fx": 400.0, "fy": 400.0, "cu": 319.5, "cv": 239.5, "width": 640, "height": 480},
    "rig": {"sonar_roll_deg": 90.0, "sonar_offset": 0.10, "camera_offset": [0.15, 0.15]},
    "cfar": {"train_cells": 20, "guard_cells": 4, "pfa": 0.01},
    "fusion": {
        "alpha_ss": 20.0, "alpha_s": 1.0, "alpha_e": 0.5, "range_match_tol": None,
        "phi_step_deg": 0.25, "expansion_enabled": True, "sync_tol": 0.1,
    },
    "gp": {
        "sigma_n2": 0.01, "length_scale": 0.025, "sigma_f2": 0.1, "sigma_min2": 0.001,
        "sigma_t2": 50.0, "gamma": 100.0, "p_free": 0.3, "p_occupied": 0.7,
        "label_convention": "binary",
    },
    "training": {
        "free_spacing": 0.05, "free_margin": 0.1, "free_noise_var": None,
        "free_ray_classes": ["stereo"],
    },
    "keyframe": {"d_thresh": 0.05, "angle_thresh_deg": 10.0},
    "map": {"resolution": 0.025, "origin": [0.0, 0.0, 0.0]},
    "tiling": {"tile_size": 0.5, "halo": None, "query_radius": 0.05},
    "eval": {"bbox_min": [-1.0, -1.0, -1.0], "bbox_max": [1.0, 1.0, 1.0], "inlier_threshold": 0.05},
    "sim": {
        "background": 1.0, "speckle_sigma": 0.2, "signal_gain": 1.0, "second_return_gain": 0.3,
        "mask_dropout_prob": 0.0, "elevation_samples_per_beam": 64, "rng_seed": 0,
    },
    "trajectory": {
        "kind": "orbit", "n_steps": 36, "center": [0.0, 0.0], "radius": 1.5, "z": 0.0,
        "start_angle_deg": 0.0, "sweep_deg": 90.0, "start": [-1.5, -0.25, 0.0],
        "direction": [0.0, 1.0, 0.0], "spacing": 0.05, "target": None, "look_at": True, "dt": 0.2,
    },
    "paths": {"scene": None},
}


class PipelineConfig:
    """All pipeline parameters, grouped by section."""

    def __init__(self, data: Optional[dict] = None, base_dir: Optional[Path] = None):
        self.data = copy.deepcopy(DEFAULTS)
        self.base_dir = Path(base_dir) if base_dir is not None else None
        for section, values in (data or {}).items():
            if section not in DEFAULTS:
                raise ConfigurationError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigurationError(f"section {section!r} must be a mapping")
            for key, value in values.items():
                self.set(section, key, value)
        self.validate()

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self.data == other.data

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        self.data[section][key] = value

    def with_overrides(self, overrides: Iterable[str]) -> "PipelineConfig":
        """Copy with ``section.key=value`` strings applied; values parse as YAML."""
        out = PipelineConfig(copy.deepcopy(self.data), self.base_dir)
        for item in overrides:
            lhs, sep, rhs = item.partition("=")
            section, dot, key = lhs.strip().partition(".")
            if not sep or not dot:
                raise ConfigurationError(f"override {item!r} is not section.key=value")
            try:
                value = yaml.safe_load(rhs)
            except yaml.YAMLError as exc:
                raise ConfigurationError(f"override {item!r}: {exc}") from exc
            out.set(section, key, value)
        out.validate()
        return out

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=None)

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, base_dir=None) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(str(exc)) from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a mapping")
        return cls(data, base_dir)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        cfg = cls.loads(text, path.parent)
        scene = cfg.scene_path()
        if scene is not None and not scene.exists():
            raise ConfigurationError(f"{path}: scene file {scene} does not exist")
        return cfg

    def scene_path(self) -> Optional[Path]:
        p = self.data["paths"]["scene"]
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    # -- builders ----------------------------------------------------------

    def validate(self) -> None:
        try:
            self.build_rig()
            self.build_cfar()
            self.build_fusion()
            self.build_gp()
            self.build_training()
            self.build_gate()
            self.build_map()
            self.build_tiling()
            self.build_bounds()
            self.build_sim()
            self.build_trajectory()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from exc

    def build_sonar(self) -> SonarModel:
        s = self.data["sonar"]
        half_b = math.radians(s["bearing_fov_deg"]) / 2
        half_e = math.radians(s["elevation_fov_deg"]) / 2
        return SonarModel(float(s["r_min"]), float(s["r_max"]), int(s["range_bins"]), -half_b, half_b,
                          int(s["bearing_bins"]), -half_e, half_e)

    def build_camera(self) -> CameraModel:
        c = self.data["camera"]
        return CameraModel(float(c["fx"]), float(c["fy"]), float(c["cu"]), float(c["cv"]),
                           int(c["width"]), int(c["height"]))

    def build_rig(self) -> SensorRig:
        r = self.data["rig"]
        return default_rig(math.radians(r["sonar_roll_deg"]), float(r["sonar_offset"]),
                           tuple(float(v) for v in r["camera_offset"]), self.build_sonar(), self.build_camera())

    def build_cfar(self) -> CfarParams:
        c = self.data["cfar"]
        return CfarParams(int(c["train_cells"]), int(c["guard_cells"]), float(c["pfa"]))

    def build_fusion(self) -> FusionConfig:
        f = self.data["fusion"]
        tol = f["range_match_tol"]
        return FusionConfig(float(f["alpha_ss"]), float(f["alpha_s"]), float(f["alpha_e"]),
                            None if tol is None else float(tol), math.radians(f["phi_step_deg"]),
                            bool(f["expansion_enabled"]), float(f["sync_tol"]))

    def build_gp(self) -> GpHyperparams:
        return GpHyperparams(**self.data["gp"])

    def build_training(self) -> TrainingConfig:
        t = self.data["training"]
        free_var = t["free_noise_var"]
        if free_var is None:
            free_var = 1.0 / float(self.data["fusion"]["alpha_ss"])
        try:
            classes = tuple(CLASS_NAMES.index(c) for c in t["free_ray_classes"])
        except ValueError as exc:
            raise ConfigurationError(f"free_ray_classes must be drawn from {CLASS_NAMES}") from exc
        return TrainingConfig(float(t["free_spacing"]), float(t["free_margin"]), float(self.data["sonar"]["r_min"]),
                              float(free_var), classes)

    def build_gate(self) -> KeyframeGate:
        k = self.data["keyframe"]
        return KeyframeGate(float(k["d_thresh"]), math.radians(k["angle_thresh_deg"]))

    def build_map(self) -> OccupancyMap:
        m = self.data["map"]
        return OccupancyMap(float(m["resolution"]), m["origin"], self.build_gp())

    def build_tiling(self) -> TilingConfig:
        t = self.data["tiling"]
        halo = None if t["halo"] is None else float(t["halo"])
        qr = None if t["query_radius"] is None else float(t["query_radius"])
        tiling = TilingConfig(float(t["tile_size"]), halo, qr)
        tiling.halo_for(self.build_gp())
        return tiling

    def build_bounds(self) -> EvalBounds:
        e = self.data["eval"]
        return EvalBounds(tuple(e["bbox_min"]), tuple(e["bbox_max"]), float(e["inlier_threshold"]))

    def build_sim(self) -> SimConfig:
        return SimConfig(**self.data["sim"])

    def build_trajectory(self) -> TrajectorySpec:
        t = dict(self.data["trajectory"])
        t["start_angle"] = math.radians(t.pop("start_angle_deg"))
        t["sweep"] = math.radians(t.pop("sweep_deg"))
        for k in ("center", "start", "direction", "target"):
            if t[k] is not None:
                t[k] = tuple(float(v) for v in t[k])
        return TrajectorySpec(**t)
