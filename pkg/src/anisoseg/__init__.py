"""Anisotropic multi-stream 3D segmentation on CPU.

Modules: ``volume`` (grids, resampling, vraw I/O), ``tensor`` and ``layers``
(reverse-mode autodiff), ``network`` (multi-stream graph), ``training``,
``fusion``, ``metrics``, ``hpo``, ``phantom`` and ``experiment``.
"""

from .fusion import fuse_planes, largest_component, majority_vote, signed_edt
from .hpo import SearchSpace, make_bracket, run_hpo
from .metrics import abd, dsc, hd95, regional_metrics, surface_points, wilcoxon_signed_rank
from .network import Hyperparams, Model, PlaneConfig, build_multistream, count_parameters, infer_shapes
from .phantom import AcquisitionSpec, PhantomSpec, generate_phantom, simulate_acquisition
from .training import AugmentationSpec, TrainConfig, soft_dice_loss, train
from .volume import Grid3, Mask, Volume

__version__ = "0.1.0"

__all__ = [
    "AcquisitionSpec",
    "AugmentationSpec",
    "Grid3",
    "Hyperparams",
    "Mask",
    "Model",
    "PhantomSpec",
    "PlaneConfig",
    "SearchSpace",
    "TrainConfig",
    "Volume",
    "abd",
    "build_multistream",
    "count_parameters",
    "dsc",
    "fuse_planes",
    "generate_phantom",
    "hd95",
    "infer_shapes",
    "largest_component",
    "majority_vote",
    "make_bracket",
    "regional_metrics",
    "run_hpo",
    "signed_edt",
    "simulate_acquisition",
    "soft_dice_loss",
    "surface_points",
    "train",
    "wilcoxon_signed_rank",
]
