"""Two-stage cardiac cavity/scar segmentation on 2-D slices.

A transformer-style encoder whose blocks mix a self-attention branch and a
deformable-convolution branch through learnable scalars, skip connections
refined by a graph-convolution bridge, a plain U-Net baseline, and the
training / verification / synthetic-data machinery around them.
"""

from .config import ModelConfig, TrainConfig, config_to_dict, load_config_file
from .errors import UGformerError
from .graph import (GCNBridge, gcn_layer_forward, gram_adjacency,
                    gram_affinity, normalize_adjacency)
from .models import UGformer, UNet, build_model, count_parameters
from .phantom import (STYLES, PhantomSpec, generate_phantom, phantom_set,
                      random_phantom)
from .pipeline import (Roi, Sample, TwoStageResult, augment_sample,
                       compute_roi, crop_black_margins, crop_to_roi,
                       minmax_normalize, preprocess, resize_bilinear,
                       resize_nearest, restore_zero_pad, rigid_transform,
                       roi_patch_pairs, two_stage_predict)
from .tensorio import (load_checkpoint, load_dataset, read_tensor,
                       save_checkpoint, save_dataset, write_pgm, write_tensor)
from .training import (SGD, EpochRecord, TrainResult, composite_loss,
                       dice_score, evaluate_dice, lr_on_validation,
                       sgd_update, train_loop)

__version__ = "0.1.0"

__all__ = [
    "GCNBridge", "EpochRecord", "ModelConfig", "PhantomSpec", "Roi", "SGD",
    "STYLES", "Sample", "TrainConfig", "TrainResult", "TwoStageResult",
    "UGformer", "UGformerError", "UNet", "augment_sample", "build_model",
    "composite_loss", "compute_roi", "config_to_dict", "count_parameters",
    "crop_black_margins", "crop_to_roi", "dice_score", "evaluate_dice",
    "gcn_layer_forward", "generate_phantom", "gram_adjacency", "gram_affinity",
    "load_checkpoint", "load_config_file", "load_dataset", "lr_on_validation",
    "minmax_normalize", "normalize_adjacency", "phantom_set", "preprocess",
    "random_phantom", "read_tensor", "resize_bilinear", "resize_nearest",
    "restore_zero_pad", "rigid_transform", "roi_patch_pairs",
    "save_checkpoint", "save_dataset", "sgd_update", "train_loop",
    "two_stage_predict", "write_pgm", "write_tensor",
]
