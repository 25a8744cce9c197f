"""Blink-based drowsiness estimation.

Eye landmarks become an EAR signal, the EAR signal becomes blink events,
blinks become normalized feature sequences, and a hierarchical multiscale
LSTM regresses a drowsiness score in (0, 10) per sequence. Per-video
predictions are obtained by voting over sequence classes.
"""

__version__ = "0.1.0"

from .dataset import VideoRecord, read_manifest, write_manifest
from .detection import BlinkDetector, BlinkEvent, ClosedFrameClassifier, detect_blinks, retrieve_blinks
from .evaluation import (
    ClassLabel,
    MetricReport,
    VideoPrediction,
    bsa,
    bsre,
    crossvalidate,
    discretize,
    nearest_border,
    vote,
    vre_va,
)
from .features import GlobalStandardizer, SubjectCalibrator, extract_features
from .landmarks import EarSeries, compute_ear, load_stream
from .network import Architecture, count_parameters
from .regressor import HMLSTMRegressor
from .training import BlinkSequence, TrainConfig, make_sequences, train

__all__ = [
    "Architecture",
    "BlinkDetector",
    "BlinkEvent",
    "BlinkSequence",
    "ClassLabel",
    "ClosedFrameClassifier",
    "EarSeries",
    "GlobalStandardizer",
    "HMLSTMRegressor",
    "MetricReport",
    "SubjectCalibrator",
    "TrainConfig",
    "VideoPrediction",
    "VideoRecord",
    "bsa",
    "bsre",
    "compute_ear",
    "count_parameters",
    "crossvalidate",
    "detect_blinks",
    "discretize",
    "extract_features",
    "load_stream",
    "make_sequences",
    "nearest_border",
    "read_manifest",
    "retrieve_blinks",
    "train",
    "vote",
    "vre_va",
    "write_manifest",
]
