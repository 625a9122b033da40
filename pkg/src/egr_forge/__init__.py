"""Edge-graph-regularized training and evaluation of face-forgery detectors."""

__version__ = "0.1.0"

from .corruptions import Corruption, CorruptionSpec, apply_corruption
from .detector import Detector, init_detector, predict, probe_mask
from .edges import EdgeCache, EdgeGraphTransformer, edge_graph, gradient_field, to_grayscale
from .manifest import (
    Manifest,
    Sample,
    identity_disjoint_split,
    load_images,
    load_manifest,
    load_split,
    save_manifest,
    save_split,
)
from .metrics import accuracy, auc, fid, frechet_distance, psnr, roc_curve
from .synth import SynthSpec, generate_toy_dataset, render_toy_dataset
from .training import EGRClassifier, TrainConfig, edge_only_risk, egr_risk, empirical_risk, train

__all__ = [
    "Corruption",
    "CorruptionSpec",
    "Detector",
    "EGRClassifier",
    "EdgeCache",
    "EdgeGraphTransformer",
    "Manifest",
    "Sample",
    "SynthSpec",
    "TrainConfig",
    "accuracy",
    "apply_corruption",
    "auc",
    "edge_graph",
    "edge_only_risk",
    "egr_risk",
    "empirical_risk",
    "fid",
    "frechet_distance",
    "generate_toy_dataset",
    "gradient_field",
    "identity_disjoint_split",
    "init_detector",
    "load_images",
    "load_manifest",
    "load_split",
    "predict",
    "probe_mask",
    "psnr",
    "render_toy_dataset",
    "roc_curve",
    "save_manifest",
    "save_split",
    "to_grayscale",
    "train",
]
