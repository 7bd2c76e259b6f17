"""
Model components: layers, frame encoder, causal head and the full model
"""

from models.layers import KVCache, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, TransformerBlock
from models.backbone import VisionEncoder, load_fixed_features, patchify, unpatchify
from models.head import CausalHead, causal_mask
from models.avt import AnticipativeModel, ModelOutputs, build_model, model_checksum

__all__ = [
    "KVCache", "LayerNorm", "Linear", "Module", "MultiHeadAttention", "Parameter", "TransformerBlock",
    "VisionEncoder", "load_fixed_features", "patchify", "unpatchify",
    "CausalHead", "causal_mask",
    "AnticipativeModel", "ModelOutputs", "build_model", "model_checksum",
]
