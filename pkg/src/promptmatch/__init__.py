"""Semantic keypoint matching with prompt-tuned diffusion features."""
from __future__ import annotations

from .backbone import PositionalBackbone, ToyBackbone, build_backbone, build_schedule, corrupt, extract_features
from .datasets import DatasetSplit, MatchPair, load_split, read_canonical, write_canonical
from .evaluation import PckReport, evaluate_split, pck_pair
from .matching import FeatureMap, Keypoint, kernel_softmax_localize, matching_loss
from .prompting import ClassPromptBank, ConditionalPrompt, CpmConfig, SinglePrompt
from .training import Checkpoint, Matcher, TrainConfig, grad_check, load_checkpoint, match_pair, save_checkpoint, train

__all__ = [
    "Checkpoint",
    "ClassPromptBank",
    "ConditionalPrompt",
    "CpmConfig",
    "DatasetSplit",
    "FeatureMap",
    "Keypoint",
    "MatchPair",
    "Matcher",
    "PckReport",
    "PositionalBackbone",
    "SinglePrompt",
    "ToyBackbone",
    "TrainConfig",
    "build_backbone",
    "build_schedule",
    "corrupt",
    "evaluate_split",
    "extract_features",
    "grad_check",
    "kernel_softmax_localize",
    "load_checkpoint",
    "load_split",
    "match_pair",
    "matching_loss",
    "pck_pair",
    "read_canonical",
    "save_checkpoint",
    "train",
    "write_canonical",
]
