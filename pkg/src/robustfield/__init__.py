"""Distractor-robust radiance fields on voxel grids.

Robust kernels and trimmed inlier masks, a synthetic scene generator with
oracle distractor masks, a voxel radiance field with hand-written adjoints,
a patch-based trainer, metrics and a CLI.
"""

from .estimator import RobustMasker, RobustRadianceField
from .field import VoxelField, create_field, load_checkpoint, save_checkpoint
from .kernels import KernelKind, KernelSpec, irls_weight, kernel_influence, kernel_value
from .mask import InlierMask, MaskConfig, MaskMode, compute_robust_mask
from .scene import build_scene, generate_dataset, load_dataset, write_dataset
from .train import LossMode, TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "InlierMask", "KernelKind", "KernelSpec", "LossMode", "MaskConfig", "MaskMode", "RobustMasker",
    "RobustRadianceField", "TrainConfig", "VoxelField", "build_scene", "compute_robust_mask",
    "create_field", "generate_dataset", "irls_weight", "kernel_influence", "kernel_value",
    "load_checkpoint", "load_dataset", "run_training", "save_checkpoint", "write_dataset",
]
