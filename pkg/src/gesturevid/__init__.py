"""Hand-gesture classification from short grayscale video segments.

A from-scratch numpy stack: tensor kernels with hand-written backward
passes, 2D / 3D / (2+1)D convolutional architectures plus a residual
network with trilinear inter-stage resizing, a motion-capture-driven
segmentation pipeline, a synthetic-data generator, and a deterministic
training/evaluation harness with a small CLI.
"""

from .errors import (ConfigError, DataError, GestureVidError, NumericError,
                     ShapeError)
from .layers import mid_channels, softmax_cross_entropy
from .model import ModelSpec, Network, build, count_params, describe
from .optim import Adam
from .pipeline import (GestureSegment, compute_joint_angles, crop_and_normalize,
                       detect_peaks, extract_segments, load_dataset,
                       split_dataset, write_dataset)
from .datagen import SynthConfig, generate
from .harness import (RunReport, TrainConfig, aggregate, compare, evaluate,
                      train, train_run)

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "DataError", "GestureSegment", "GestureVidError",
    "ModelSpec", "Network", "NumericError", "RunReport", "ShapeError",
    "SynthConfig", "TrainConfig", "aggregate", "build", "compare",
    "compute_joint_angles", "count_params", "crop_and_normalize", "describe",
    "detect_peaks", "evaluate", "extract_segments", "generate", "load_dataset",
    "mid_channels", "softmax_cross_entropy", "split_dataset", "train",
    "train_run", "write_dataset", "__version__",
]
