"""Feature-customizing knowledge distillation on a self-contained autodiff core."""

from .config import ExperimentConfig, config_hash, parse_config
from .data import DataBundle, gen_ssl_benchmark, gen_uda_benchmark, load_csv, save_csv
from .distill import (StagePlan, TrainContext, feature_customization_epoch,
                      knowledge_distillation_epoch, make_stage_plan, pretrain,
                      run_baseline, train_customkd)
from .harness import MetricsLog, run_experiment, run_sweep
from .losses import (LossWeights, composite_loss, cross_entropy, entropy_min,
                     feature_mse, logit_mse_loss, soft_target_loss)
from .metrics import FeatureMatrix, accuracy, error_rate, extract_features, linear_cka
from .models import (CustomizationPipeline, Encoder, FreezeMask, HeadClassifier,
                     Model, ProjectionHead, init_encoder, init_head,
                     init_projection, linear_probe, share_student_head)
from .optim import Sgd
from .tensor import BatchNormState, Tensor, backward, op_trace

__all__ = [
    "BatchNormState", "CustomizationPipeline", "DataBundle", "Encoder",
    "ExperimentConfig", "FeatureMatrix", "FreezeMask", "HeadClassifier",
    "LossWeights", "MetricsLog", "Model", "ProjectionHead", "Sgd", "StagePlan",
    "Tensor", "TrainContext", "accuracy", "backward", "composite_loss",
    "config_hash", "cross_entropy", "entropy_min", "error_rate",
    "extract_features", "feature_customization_epoch", "feature_mse",
    "gen_ssl_benchmark", "gen_uda_benchmark", "init_encoder", "init_head",
    "init_projection", "knowledge_distillation_epoch", "linear_cka",
    "linear_probe", "load_csv", "logit_mse_loss", "make_stage_plan",
    "op_trace", "parse_config", "pretrain", "run_baseline", "run_experiment",
    "run_sweep", "save_csv", "share_student_head", "soft_target_loss",
    "train_customkd",
]
