"""Intermediate multi-point heterogeneous supervision and regularization for segmentation nets."""

from .tensor import Tensor, backward
from .netspec import LayerSpec, ModelSpec, TapCriterion, build_model, forward_with_taps, resolve_taps
from .supervision import LossWeights, ce_loss, mi_loss, ne_reg, total_loss, adapter_apply
from .training import TrainingConfig, train, evaluate, profile_overhead
from .metrics import ConfusionMatrix, summarize

__version__ = "0.1.0"
