"""Incremental scene-graph prediction over streamed point-cloud frames.

A two-layer heterogeneous graph accumulates predicted objects and
relationships across frames; graph networks trained on top of it predict
classes and predicates for each new frame. Includes a self-contained f32
autodiff engine, synthetic data generation, and evaluation tooling.
"""

__version__ = "0.1.0"

from .datagen import DEFAULT_LABEL_SPACE, LabelSpace, SyntheticSceneSpec
from .geometry import Descriptor, compute_descriptor, sample_points
from .metrics import MetricReport
from .model import ModelConfig, forward, init_params
from .scene import HeteroSceneGraph, LabelFeatureBuilder
from .tensor import Tensor, Tape, backward, recording
from .train import TrainConfig, composite_loss, evaluate, train

__all__ = [
    "DEFAULT_LABEL_SPACE",
    "Descriptor",
    "HeteroSceneGraph",
    "LabelFeatureBuilder",
    "LabelSpace",
    "MetricReport",
    "ModelConfig",
    "SyntheticSceneSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "composite_loss",
    "compute_descriptor",
    "evaluate",
    "forward",
    "init_params",
    "recording",
    "sample_points",
    "train",
]
