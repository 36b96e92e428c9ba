"""Symmetry-based alignment and symmetry-enhanced attention segmentation.

The pipeline aligns bilateral CT-like volumes into a left/right symmetric
pose without supervision, then segments hypodense lesions with a hybrid
3D-encoder / 2D-decoder network whose bridge can compare features against
their mirrored counterparts.
"""

__version__ = "0.1.0"

from .align import (AlignmentNet, RigidParams, alignment_loss, apply_rigid,
                    estimate_volume_params, invert_params, rigid_matrix, train_alignment)
from .attention import (PartitionSpec, SymmetryEnhancedAttention, attention_similarity,
                        hflip_features, partition, sea_forward, unpartition)
from .errors import ConfigError, DataError, NumericError, SeanError
from .evaluation import (EvalCase, EvalConfig, MetricsReport, alignment_error,
                         connected_components, dice_coefficient, evaluate_dataset, lesion_prf)
from .network import AttentionConfig, FusionMode, HybridUnet, model_forward
from .phantom import (CtVolume, PhantomGroundTruth, PhantomSpec, extract_slab,
                      generate_phantom, preprocess, read_volume, write_volume)
from .training import (TrainConfig, combined_loss, generalized_dice_loss, poly_lr,
                       train_segmentation)

__all__ = [
    "AlignmentNet", "RigidParams", "alignment_loss", "apply_rigid", "estimate_volume_params",
    "invert_params", "rigid_matrix", "train_alignment",
    "PartitionSpec", "SymmetryEnhancedAttention", "attention_similarity", "hflip_features",
    "partition", "sea_forward", "unpartition",
    "ConfigError", "DataError", "NumericError", "SeanError",
    "EvalCase", "EvalConfig", "MetricsReport", "alignment_error", "connected_components",
    "dice_coefficient", "evaluate_dataset", "lesion_prf",
    "AttentionConfig", "FusionMode", "HybridUnet", "model_forward",
    "CtVolume", "PhantomGroundTruth", "PhantomSpec", "extract_slab", "generate_phantom",
    "preprocess", "read_volume", "write_volume",
    "TrainConfig", "combined_loss", "generalized_dice_loss", "poly_lr", "train_segmentation",
]
