"""Part-based age assessment with gated relation features and ranked part selection."""

from .config import AnchorConfig, ConfigError, DataConfig, ModelConfig, RunConfig, TrainingConfig, load_config
from .model import AgeModel, GenderCode, LossBreakdown, Prediction, confidence, forward, ranking_loss, total_loss
from .prst import PrstFormatError, read_prst, write_prst
from .relation import ContextPyramid, RelationLevelParams, build_pyramid, relation_gate
from .selection import (
    Anchor,
    AnchorSpec,
    Box,
    ScoredPart,
    crop_resize,
    generate_anchors,
    iou,
    local_feature,
    nms,
    score_anchors,
    select_top_m,
)
from .synth import SyntheticSample, decode_age, generate_dataset, generate_sample, load_dataset
from .tensor import Tensor, backward, no_grad, set_default_dtype
from .training import NumericAbortError, evaluate, load_checkpoint, lr_schedule, save_checkpoint, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "AgeModel", "Anchor", "AnchorConfig", "AnchorSpec", "Box", "ConfigError", "ContextPyramid",
    "DataConfig", "GenderCode", "LossBreakdown", "ModelConfig", "NumericAbortError", "Prediction",
    "PrstFormatError", "RelationLevelParams", "RunConfig", "ScoredPart", "SyntheticSample", "Tensor",
    "TrainingConfig", "backward", "build_pyramid", "confidence", "crop_resize", "decode_age",
    "evaluate", "forward", "generate_anchors", "generate_dataset", "generate_sample", "iou",
    "load_checkpoint", "load_config", "load_dataset", "local_feature", "lr_schedule", "nms",
    "no_grad", "ranking_loss", "read_prst", "relation_gate", "save_checkpoint", "score_anchors",
    "select_top_m", "set_default_dtype", "sgd_step", "total_loss", "train", "write_prst",
]
