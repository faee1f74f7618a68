"""Depth-shrinking encoder-decoder for 3D tumor segmentation with 2D backbones."""

from .backbones import TapSpec, backbone_forward, build_backbone, load_pretrained, register_backbone
from .config import TrainConfig, load_config
from .decoder import DecoderConfig, DimShrinkNet, build_model, decode2d, decode3d, segment
from .losses import aggregate, combined_loss, dice_metric, soft_dice
from .shrink_encoder import ShrinkConfig, build_shrink_encoder, shrink_forward
from .synthetic import make_phantom
from .trainer import ensemble_predict, train
from .volume_io import (
    Modality,
    NestedMask,
    Volume,
    center_crop,
    labels_to_nested,
    load_volume,
    nested_to_labels,
    uncrop,
    zscore_normalize,
)

__version__ = "0.1.0"
