"""Run configuration: defaults, strict parsing, and serialization.

The effective configuration is a plain JSON document. Parsing is strict:
unknown keys anywhere in the tree abort the run naming the offending key,
and out-of-range values name the field, so a typo can never silently change
sigma values that decide run results. The merged config is echoed into every
output directory and reproduces the run when fed back in.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, Extrinsics, Pose3, SonarConfig, optical_from_body


def _default_fx() -> float:
    return 320.0 / math.tan(math.radians(40.0))   # 80 deg horizontal fov at 640 px


def _default_fy() -> float:
    return 256.0 / math.tan(math.radians(32.0))   # 64 deg vertical fov at 512 px


@dataclass
class CameraConfigData:
    fx: float = field(default_factory=_default_fx)
    fy: float = field(default_factory=_default_fy)
    cx: float = 320.0
    cy: float = 256.0
    width: int = 640
    height: int = 512

    def build(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.width, self.height)


@dataclass
class SonarConfigData:
    horizontal_fov: float = math.radians(60.0)
    num_beams: int = 96
    range_resolution: float = 0.05
    num_bins: int = 128
    vertical_aperture: float = math.radians(12.0)
    intensity_threshold: float = 0.5

    def build(self) -> SonarConfig:
        return SonarConfig(self.horizontal_fov, self.num_beams, self.range_resolution,
                           self.num_bins, self.vertical_aperture, self.intensity_threshold)


def _optical_pose_dict() -> dict:
    p = optical_from_body()
    return {"q": [float(v) for v in p.q], "p": [float(v) for v in p.t]}


@dataclass
class ExtrinsicsConfigData:
    camera_from_body: dict = field(default_factory=_optical_pose_dict)
    sonar_from_body: dict = field(default_factory=_optical_pose_dict)

    @staticmethod
    def _pose(d: dict, name: str) -> Pose3:
        if set(d.keys()) != {"q", "p"}:
            raise ConfigError(f"{name} must have exactly keys 'q' (quaternion wxyz) "
                              f"and 'p' (position)")
        return Pose3(np.asarray(d["q"], dtype=float), np.asarray(d["p"], dtype=float))

    def build(self) -> Extrinsics:
        return Extrinsics(
            camera_from_body=self._pose(self.camera_from_body, "extrinsics.camera_from_body"),
            sonar_from_body=self._pose(self.sonar_from_body, "extrinsics.sonar_from_body"),
        )


@dataclass
class FusionConfigData:
    slant_correction: bool = False


@dataclass
class AssociationConfigData:
    cosine_threshold: float = 0.8
    chi2_confidence: float = 0.95
    chi2_dof: int = 6
    use_mahalanobis: bool = True
    nn_radius: float = 0.75
    gate_position_sigma: float = 0.1


@dataclass
class FactorSigmaConfig:
    # per-step odometry; composed factors scale by sqrt(step count)
    odometry_translation: float = 0.05
    odometry_rotation: float = 0.02
    landmark_bearing: float = 0.02
    landmark_elevation: float = 0.02
    landmark_range: float = 0.1
    partial_depth: float = 0.05
    partial_pitch: float = 0.01
    partial_roll: float = 0.01
    absolute_xy: float = 0.1
    absolute_yaw: float = 0.05
    prior_translation: float = 1e-3
    prior_rotation: float = 1e-3


@dataclass
class SolverConfigData:
    max_iterations: int = 100
    relative_cost_tol: float = 1e-9
    step_tol: float = 1e-10
    initial_lambda: float = 1e-6
    lambda_factor: float = 10.0
    max_lambda: float = 1e12


@dataclass
class PipelineConfigData:
    max_skew: float = 0.15                 # camera-sonar pairing window, seconds
    min_landmark_observations: int = 2     # map emission support threshold
    mode: str = "full"                     # "full" | "odometry_only"
    add_initial_prior: bool = True
    use_partial_factors: bool = True
    use_absolute_factors: bool = True
    use_beacon_ranges: bool = True
    initial_pose: dict = field(default_factory=lambda: {
        "q": [1.0, 0.0, 0.0, 0.0], "p": [0.0, 0.0, 0.0]})

    def build_initial_pose(self) -> Pose3:
        return ExtrinsicsConfigData._pose(self.initial_pose, "pipeline.initial_pose")


def _default_waypoints() -> list:
    return [[-4.0, -3.0], [4.0, -3.0], [4.0, 3.0], [-4.0, 3.0]]


@dataclass
class TrajectoryConfigData:
    waypoints: list = field(default_factory=_default_waypoints)
    depth: float = 1.5
    laps: int = 2
    speed: float = 0.5                     # m/s along the path
    rate: float = 4.0                      # odometry samples per second
    camera_every: int = 3                  # camera/sonar/partial every k-th sample


def _default_objects() -> list:
    # Twelve objects around the default rectangle loop, eight classes with
    # four duplicated (paper-style inventory: cages, tires, towfish...).
    return [
        {"position": [-1.5, -4.4, 1.3], "class_id": 0},
        {"position": [2.5, -4.6, 1.7], "class_id": 1},
        {"position": [5.6, -1.0, 1.4], "class_id": 2},
        {"position": [5.4, 2.0, 1.6], "class_id": 3},
        {"position": [2.0, 4.5, 1.5], "class_id": 4},
        {"position": [-2.2, 4.4, 1.3], "class_id": 5},
        {"position": [-5.5, 1.2, 1.6], "class_id": 6},
        {"position": [-5.6, -1.8, 1.5], "class_id": 7},
        {"position": [0.5, -1.5, 1.4], "class_id": 0},
        {"position": [2.6, -1.4, 1.6], "class_id": 1},
        {"position": [2.4, 1.5, 1.5], "class_id": 2},
        {"position": [-1.2, 1.4, 1.3], "class_id": 3},
    ]


@dataclass
class WorldConfigData:
    objects: list = field(default_factory=_default_objects)
    embedding_dim: int = 384
    prototype_max_cosine: float = 0.5
    confusable_pairs: list = field(default_factory=list)  # [class_a, class_b, cosine]
    tank_bounds: list = field(default_factory=lambda: [[-8.0, 8.0], [-8.0, 8.0], [0.0, 4.0]])


@dataclass
class NoiseConfigData:
    odometry_sigma_translation: float = 0.0    # meters per step
    odometry_sigma_rotation: float = 0.0       # radians per step
    odometry_bias_translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    odometry_bias_rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    pixel_sigma: float = 0.0                   # pixels
    embedding_sigma: float = 0.0               # total perturbation norm on the unit sphere
    range_sigma: float = 0.0                   # meters
    multipath_probability: float = 0.0
    multipath_factor_min: float = 1.2
    multipath_factor_max: float = 2.0
    dropout_probability: float = 0.0
    background_density: float = 0.05           # fraction of bins carrying sub-threshold noise


@dataclass
class BeaconConfigData:
    positions: list = field(default_factory=list)   # [[x, y], ...]; empty disables
    rate: float = 1.0
    range_sigma: float = 0.0
    initial_guess: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class EvalConfigData:
    match_radius: float = 1.0
    pairing_max_skew: float = 0.05
    align_2d: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    camera: CameraConfigData = field(default_factory=CameraConfigData)
    sonar: SonarConfigData = field(default_factory=SonarConfigData)
    extrinsics: ExtrinsicsConfigData = field(default_factory=ExtrinsicsConfigData)
    fusion: FusionConfigData = field(default_factory=FusionConfigData)
    association: AssociationConfigData = field(default_factory=AssociationConfigData)
    factor_sigmas: FactorSigmaConfig = field(default_factory=FactorSigmaConfig)
    solver: SolverConfigData = field(default_factory=SolverConfigData)
    pipeline: PipelineConfigData = field(default_factory=PipelineConfigData)
    trajectory: TrajectoryConfigData = field(default_factory=TrajectoryConfigData)
    world: WorldConfigData = field(default_factory=WorldConfigData)
    noise: NoiseConfigData = field(default_factory=NoiseConfigData)
    beacons: BeaconConfigData = field(default_factory=BeaconConfigData)
    eval: EvalConfigData = field(default_factory=EvalConfigData)


_NONNEGATIVE_FIELDS = {
    "noise.odometry_sigma_translation", "noise.odometry_sigma_rotation",
    "noise.pixel_sigma", "noise.embedding_sigma", "noise.range_sigma",
    "beacons.range_sigma",
}
_PROBABILITY_FIELDS = {
    "noise.multipath_probability", "noise.dropout_probability",
    "noise.background_density",
}


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        here = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and
                                                f.type in _SECTION_TYPES):
            section_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(section_cls, value, here)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    cls.__name__: cls
    for cls in (CameraConfigData, SonarConfigData, ExtrinsicsConfigData,
                FusionConfigData, AssociationConfigData, FactorSigmaConfig,
                SolverConfigData, PipelineConfigData, TrajectoryConfigData,
                WorldConfigData, NoiseConfigData, BeaconConfigData, EvalConfigData)
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def _walk(cfg, path=""):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        here = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(value):
            yield from _walk(value, here)
        else:
            yield here, value


def validate_config(cfg: RunConfig) -> None:
    for path, value in _walk(cfg):
        if path in _NONNEGATIVE_FIELDS and value < 0:
            raise ConfigError(f"{path} must be >= 0, got {value}")
        if path in _PROBABILITY_FIELDS and not (0.0 <= value <= 1.0):
            raise ConfigError(f"{path} must lie in [0, 1], got {value}")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            if not math.isfinite(value):
                raise ConfigError(f"{path} must be finite, got {value}")
    for name in ("odometry_bias_translation", "odometry_bias_rotation"):
        if len(getattr(cfg.noise, name)) != 3:
            raise ConfigError(f"noise.{name} must have 3 components")
    if cfg.noise.multipath_factor_min < 1.0:
        raise ConfigError("noise.multipath_factor_min must be >= 1 "
                          "(a reflected path is never shorter than direct)")
    if cfg.noise.multipath_factor_max < cfg.noise.multipath_factor_min:
        raise ConfigError("noise.multipath_factor_max below multipath_factor_min")
    if cfg.pipeline.mode not in ("full", "odometry_only"):
        raise ConfigError(f"pipeline.mode must be 'full' or 'odometry_only', "
                          f"got {cfg.pipeline.mode!r}")
    if cfg.trajectory.laps < 1 or len(cfg.trajectory.waypoints) < 2:
        raise ConfigError("trajectory needs >= 1 lap over >= 2 waypoints")
    if cfg.trajectory.speed <= 0 or cfg.trajectory.rate <= 0:
        raise ConfigError("trajectory.speed and trajectory.rate must be positive")
    if cfg.trajectory.camera_every < 1:
        raise ConfigError("trajectory.camera_every must be >= 1")
    if cfg.association.chi2_dof < 1 or not (0 < cfg.association.chi2_confidence < 1):
        raise ConfigError("association chi-square settings out of range")
    if cfg.pipeline.min_landmark_observations < 1:
        raise ConfigError("pipeline.min_landmark_observations must be >= 1")
    if cfg.eval.match_radius <= 0:
        raise ConfigError("eval.match_radius must be positive")
    for i, obj in enumerate(cfg.world.objects):
        if set(obj.keys()) != {"position", "class_id"}:
            raise ConfigError(f"world.objects[{i}] must have position and class_id")
        if len(obj["position"]) != 3:
            raise ConfigError(f"world.objects[{i}].position must be a 3-vector")
    for i, pair in enumerate(cfg.world.confusable_pairs):
        if len(pair) != 3 or not (-1.0 <= pair[2] <= 1.0):
            raise ConfigError(
                f"world.confusable_pairs[{i}] must be [class_a, class_b, cosine]")
    # these raise their own errors on bad values
    cfg.camera.build()
    cfg.sonar.build()
    cfg.extrinsics.build()
