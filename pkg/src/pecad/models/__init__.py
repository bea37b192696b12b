"""Backbone families, squeeze-excitation, patch transformer, checkpoints."""

from .registry import (
    BackboneConfig,
    ModelHandle,
    ViTConfig,
    build_backbone,
    build_vit,
    config_fingerprint,
    count_params,
    load_checkpoint,
    load_checkpoint_model,
    save_checkpoint,
)
from .se import SEBlock, se_param_count
from .vit import ViTBackbone, patchify, unpatchify
from .xception import XceptionBackbone
from .residual import ResidualBackbone

__all__ = [
    "BackboneConfig",
    "ModelHandle",
    "ResidualBackbone",
    "SEBlock",
    "ViTBackbone",
    "ViTConfig",
    "XceptionBackbone",
    "build_backbone",
    "build_vit",
    "config_fingerprint",
    "count_params",
    "load_checkpoint",
    "load_checkpoint_model",
    "patchify",
    "save_checkpoint",
    "se_param_count",
    "unpatchify",
]
