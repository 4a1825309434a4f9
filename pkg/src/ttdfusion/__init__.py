"""Test-time dynamic image fusion with relative-dominability weights."""

from .codec import CodecSpec, ToyNetParams, TrainConfig, decode, encode, init_params, reconstruct, train_toy
from .engine import PC, RD, STATIC, WeightForm, compute_weights, fuse, fusion_loss, run_pipeline, stage_one
from .metrics import MetricRow, evaluate_all
from .synth import CorruptionSpec, SceneSpec, apply_corruption, generate_pair
from .theory import compare_strategies, convexity_check, geb_decomposition, pixel_covariance

__all__ = [
    "CodecSpec", "ToyNetParams", "TrainConfig", "decode", "encode", "init_params", "reconstruct", "train_toy",
    "PC", "RD", "STATIC", "WeightForm", "compute_weights", "fuse", "fusion_loss", "run_pipeline", "stage_one",
    "MetricRow", "evaluate_all",
    "CorruptionSpec", "SceneSpec", "apply_corruption", "generate_pair",
    "compare_strategies", "convexity_check", "geb_decomposition", "pixel_covariance",
]
