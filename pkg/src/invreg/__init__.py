"""Inverse-consistent patch-based deformable volume registration."""

__version__ = "0.1.0"

from .infer import RegistrationResult, plan_tiling, predict_full_field, register, seam_score
from .losses import LossConfig
from .model import Discriminator, Generator, ModelConfig
from .sampler import PatchSpec, SamplerConfig, patch_weight, sample_patches
from .synth import SynthConfig, make_pair
from .trainer import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train
from .volio import (
    DisplacementField,
    LandmarkSet,
    Volume,
    make_field,
    make_volume,
    normalize_intensity,
    read_field,
    read_landmarks,
    read_volume,
    write_field,
    write_landmarks,
    write_volume,
)
from .warp import compose_fields, warp_landmarks, warp_volume

__all__ = [
    "__version__",
    "Volume",
    "DisplacementField",
    "LandmarkSet",
    "make_volume",
    "make_field",
    "normalize_intensity",
    "read_volume",
    "write_volume",
    "read_field",
    "write_field",
    "read_landmarks",
    "write_landmarks",
    "warp_volume",
    "warp_landmarks",
    "compose_fields",
    "SynthConfig",
    "make_pair",
    "PatchSpec",
    "SamplerConfig",
    "patch_weight",
    "sample_patches",
    "ModelConfig",
    "Generator",
    "Discriminator",
    "LossConfig",
    "TrainConfig",
    "TrainState",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "plan_tiling",
    "predict_full_field",
    "register",
    "seam_score",
    "RegistrationResult",
]
