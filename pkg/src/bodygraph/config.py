"""Configuration containers and config-file parsing (JSON or YAML)."""

import json
import os
from dataclasses import dataclass, field

from . import assets
from .imu import ImuParams
from .solver import SolveOptions


@dataclass
class FactorWeights:
    """Error-term weights; defaults follow the tuned operating point."""
    lambda_beta: float = 0.1
    lambda_mp: float = 0.1
    lambda_mtheta: float = 3.0
    lambda_alpha: float = 0.4
    sigma_beta1: float = 10.0      # scale-prior inflation on the first coeff
    cauchy_scale: float = 1.0      # px, both reprojection families
    pixel_sigma: float = 1.0       # px
    confidence_min: float = 0.25   # detection gate
    confidence_weighting: str = "information"   # or 'literal'
    angle_prior: str = "hinge"     # or 'literal'

    def __post_init__(self):
        for name in ("lambda_beta", "lambda_mp", "lambda_mtheta",
                     "lambda_alpha", "sigma_beta1", "cauchy_scale",
                     "pixel_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return FactorWeights(**d)


@dataclass
class EstimatorConfig:
    num_recent_frames: int = 3         # T
    num_keyframes: int = 5             # M
    keyframe_overlap: float = 0.6
    shape_freeze_observations: int = 10
    weights: FactorWeights = field(default_factory=FactorWeights)
    solve: SolveOptions = field(default_factory=SolveOptions)
    imu: ImuParams = field(default_factory=ImuParams)
    body_model_path: str = ""          # empty: bundled synthetic model
    gmm_prior_path: str = ""           # empty: bundled synthetic prior
    # human frontend
    track_max_missed: int = 5
    min_init_joints: int = 4
    iou_gate: float = 0.3
    init_rms_max: float = 0.3
    # pose-graph edge information proxy
    posegraph_sigma_pos: float = 0.01      # m
    posegraph_sigma_rot_deg: float = 0.5
    max_imu_gap: float = 0.5               # s
    landmark_mode: str = "euclidean"       # or 'unit' for far points

    def __post_init__(self):
        if self.num_recent_frames < 2:
            raise ValueError("num_recent_frames must be >= 2")
        if self.num_keyframes < 1:
            raise ValueError("num_keyframes must be >= 1")

    def resolved_body_model_path(self):
        return self.body_model_path or assets.path(assets.FULL_BODY_MODEL)

    def resolved_gmm_prior_path(self):
        return self.gmm_prior_path or assets.path(assets.GMM_PRIOR)

    def to_dict(self):
        d = dict(self.__dict__)
        d["weights"] = self.weights.to_dict()
        d["solve"] = self.solve.to_dict()
        d["imu"] = self.imu.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = FactorWeights.from_dict(d["weights"])
        if "solve" in d:
            d["solve"] = SolveOptions.from_dict(d["solve"])
        if "imu" in d:
            d["imu"] = ImuParams.from_dict(d["imu"])
        return EstimatorConfig(**d)


def load_config_file(path):
    """Parse a JSON or YAML mapping."""
    with open(path) as f:
        text = f.read()
    ext = os.path.splitext(path)[1].lower()
    if ext in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config %s: expected a mapping at top level" % path)
    return data


def load_estimator_config(path=None):
    if path is None:
        return EstimatorConfig()
    return EstimatorConfig.from_dict(load_config_file(path))
