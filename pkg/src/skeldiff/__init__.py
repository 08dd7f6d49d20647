"""skeldiff: classifier-guided diffusion for skeleton action sequences.

Encode joint-coordinate clips as square images, train a denoiser and a
patch-attention classifier, sample label-conditioned synthetic actions via
clean-estimate guidance, and evaluate or deploy them as data augmentation.
"""

__version__ = "0.1.0"

from .codec import JointSequence, NormParams, SkeletonImage, decode, encode, fit_norm_params, resample_time
from .data import Dataset, ToyGenConfig, gen_toy, load_jsonl, mix_add, mix_replace, save_jsonl, split_by_subject
from .diffusion import NoiseSchedule, cosine_schedule, linear_schedule, q_sample, sample_loop
from .guidance import GuidanceConfig, generate_dataset, guided_sample
from .metrics import FeatureSet, FeatureStats, extract_features, fid, fit_stats
from .models import (
    ActionTransformer,
    Denoiser,
    DenoiserConfig,
    STTransConfig,
    TrainConfig,
    load_model,
    save_model,
    train_classifier,
    train_denoiser,
)

__all__ = [
    "__version__",
    "JointSequence", "NormParams", "SkeletonImage", "encode", "decode", "fit_norm_params", "resample_time",
    "Dataset", "ToyGenConfig", "gen_toy", "save_jsonl", "load_jsonl", "split_by_subject", "mix_replace", "mix_add",
    "NoiseSchedule", "linear_schedule", "cosine_schedule", "q_sample", "sample_loop",
    "GuidanceConfig", "guided_sample", "generate_dataset",
    "FeatureSet", "FeatureStats", "extract_features", "fit_stats", "fid",
    "Denoiser", "DenoiserConfig", "ActionTransformer", "STTransConfig", "TrainConfig",
    "train_denoiser", "train_classifier", "save_model", "load_model",
]
