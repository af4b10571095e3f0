"""Adaptive knowledge distillation for multi-invocation device-directed speech detection.

A small numpy laboratory: a reverse-mode autodiff core, transformer and
conformer encoders, per-invocation attention-pooling adapters, the four
distillation losses, baseline / conventional / adaptive training pipelines,
and EER / DET evaluation over synthetic frame-level data.
"""

from akd.config import RunConfig, desk_config, full_scale_config
from akd.data import FeatureSequence, GeneratorConfig, InvocationType, generate, load_dataset, save_dataset
from akd.distill import DistillWeights, combine, loss_ar, loss_ddsd, loss_ed, loss_pl
from akd.encoders import Encoder, EncoderConfig, preset
from akd.metrics import ScoredSet, det_curve, eer
from akd.pipelines import (
    distill_adaptive,
    distill_conventional,
    evaluate,
    pretrain_teacher,
    train_baseline,
    train_teacher_adapters,
)
from akd.tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "DistillWeights",
    "Encoder",
    "EncoderConfig",
    "FeatureSequence",
    "GeneratorConfig",
    "InvocationType",
    "RunConfig",
    "ScoredSet",
    "Tensor",
    "backward",
    "combine",
    "desk_config",
    "det_curve",
    "distill_adaptive",
    "distill_conventional",
    "eer",
    "evaluate",
    "generate",
    "load_dataset",
    "loss_ar",
    "loss_ddsd",
    "loss_ed",
    "loss_pl",
    "no_grad",
    "full_scale_config",
    "preset",
    "pretrain_teacher",
    "save_dataset",
    "train_baseline",
    "train_teacher_adapters",
]
