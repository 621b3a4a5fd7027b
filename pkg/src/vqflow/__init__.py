"""Vector-quantized conditional normalizing flows for multi-class anomaly detection."""
from .data import FeatureSample, SynthSpec, inject_anomaly, synth_dataset
from .exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    VersionError,
    VQFlowError,
)
from .model import ABLATIONS, ModelConfig, VqFlowModel, build_model, desk_config
from .scoring import EvalReport, anomaly_map, auroc, evaluate, image_score, pixel_auroc
from .training import TrainConfig, train, unified_loss

__version__ = "0.1.0"
