"""Multi-label image classification with class-specific residual attention."""

from .backbone import BackboneConfig, build_backbone, backbone_forward, desk_config
from .config import TrainConfig, desk_train_config, load_config
from .csra import (
    INF,
    AttentionHeadConfig,
    class_score_map,
    csra_single_head,
    fuse_heads,
    predict_labels,
    spatial_attention,
)
from .metrics import MetricsReport, average_precision, evaluate, mean_average_precision, overall_metrics
from .model import MultiLabelClassifier, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, grad_check
from .train import evaluate_model, predict_images, train_model

__version__ = "0.1.0"
