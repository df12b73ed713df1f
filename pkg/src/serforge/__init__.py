"""ser-forge: modular upstream+downstream speech emotion recognition.

Feature extraction (log-mel fbank, precomputed SERF files, a trainable toy
encoder), aggregation (mean pooling, ECAPA-TDNN), early/late fusion, joint
training with 5-best checkpoint averaging, and a leave-one-session-out
5-fold evaluation harness reporting weighted and unweighted accuracy.
"""

__version__ = "0.1.0"

from .audio import FbankConfig, Waveform, log_mel_fbank, read_wav, write_wav
from .downstream import (
    EcapaAggregator,
    EcapaConfig,
    MeanPoolAggregator,
    UtteranceEmbedding,
    classify,
    late_fuse,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    FrameAlignmentError,
    NumericError,
    SerForgeError,
    TrainingError,
)
from .estimator import FbankExtractor, SERClassifier
from .evaluation import (
    CLASS_NAMES,
    FoldPlan,
    Manifest,
    MetricsReport,
    UtteranceRecord,
    confusion_matrix,
    load_manifest,
    make_folds,
    uacc,
    wacc,
)
from .experiment import ExperimentConfig, load_config, run_experiment
from .features import FeatureSequence, early_fuse, load_features, write_features
from .model import BranchSpec, ModelGraph
from .training import (
    CheckpointRecord,
    TrainConfig,
    average_checkpoints,
    finetune_and_average,
    select_best_checkpoints,
    train,
)
from .upstream import ToyEncoder, fbank_upstream, toy_encode

__all__ = [
    "BranchSpec",
    "CLASS_NAMES",
    "CheckpointRecord",
    "ConfigError",
    "DataError",
    "DimensionError",
    "EcapaAggregator",
    "EcapaConfig",
    "ExperimentConfig",
    "FbankConfig",
    "FbankExtractor",
    "FeatureSequence",
    "FoldPlan",
    "FormatError",
    "FrameAlignmentError",
    "Manifest",
    "MeanPoolAggregator",
    "MetricsReport",
    "ModelGraph",
    "NumericError",
    "SERClassifier",
    "SerForgeError",
    "ToyEncoder",
    "TrainConfig",
    "TrainingError",
    "UtteranceEmbedding",
    "UtteranceRecord",
    "Waveform",
    "average_checkpoints",
    "classify",
    "confusion_matrix",
    "early_fuse",
    "fbank_upstream",
    "finetune_and_average",
    "late_fuse",
    "load_config",
    "load_features",
    "load_manifest",
    "log_mel_fbank",
    "make_folds",
    "read_wav",
    "run_experiment",
    "select_best_checkpoints",
    "toy_encode",
    "train",
    "uacc",
    "wacc",
    "write_features",
    "write_wav",
]
