"""Fit an articulated body template to raw point clouds with a Gaussian
mixture model, an outlier term and annealed correspondences."""

from .cloud import PointCloud
from .errors import ArtifitError
from .fitter import FitConfig, FitReport, fit_chamfer_icp, fit_em, init_params
from .loss import RegWeights
from .mixture import MixtureConfig, MixtureState, PosteriorMatrix
from .model import ModelParams, TemplateModel, forward, make_toy_humanoid, skin
from .synth import ScanSpec, SynthScan, generate_scan, sample_params

__version__ = "0.1.0"

__all__ = [
    "ArtifitError", "FitConfig", "FitReport", "MixtureConfig", "MixtureState",
    "ModelParams", "PointCloud", "PosteriorMatrix", "RegWeights", "ScanSpec",
    "SynthScan", "TemplateModel", "fit_chamfer_icp", "fit_em", "forward",
    "generate_scan", "init_params", "make_toy_humanoid", "sample_params", "skin",
]
