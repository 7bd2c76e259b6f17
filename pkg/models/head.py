"""
Causal transformer head
Projects frame features into the head space, decodes them with causally
masked self-attention into predicted future features, and classifies each
predicted feature into a distribution over actions
"""

import logging
from typing import Optional

import numpy as np

from config import HeadConfig
from errors import ConfigurationError, ShapeError, ValidationError
from models.layers import KVCache, LayerNorm, Linear, Module, Parameter, TransformerBlock, truncated_normal
from tensor_core import Tensor, softmax

logger = logging.getLogger(__name__)


def causal_mask(length: int) -> np.ndarray:
    """
    Boolean T x T matrix, entry (i, j) True when position i may attend to j

    Raises:
        ValidationError: length < 1
    """
    if length < 1:
        raise ValidationError("causal mask needs at least one position")
    return np.tril(np.ones((length, length), dtype=bool))


class CausalHead(Module):
    """
    Decoder D and classifier theta

    project_features -> decode (temporal positions, masked pre-norm blocks,
    final LayerNorm) -> classify, with the same classifier at every step.
    """

    def __init__(self, config: HeadConfig, input_dim: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.input_dim = input_dim
        self.num_classes = num_classes
        width = config.head_dim
        self.projector = Linear(input_dim, width, rng, dtype)
        self.pos_embed = Parameter(truncated_normal(rng, (config.max_T, width), dtype=dtype))
        self.blocks = [
            TransformerBlock(width, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.num_layers)
        ]
        self.final_norm = LayerNorm(width, dtype)
        self.classifier = Linear(width, num_classes, rng, dtype)

    def project_features(self, features: Tensor) -> Tensor:
        """
        Learned affine map from backbone space to head space, per frame

        Raises:
            ConfigurationError: Feature dim differs from the projector input dim
        """
        features = features if isinstance(features, Tensor) else Tensor(features)
        if features.shape[-1] != self.input_dim:
            raise ConfigurationError(
                f"features have dim {features.shape[-1]} but the head projector expects {self.input_dim}"
            )
        return self.projector(features)

    def decode(self, projected: Tensor, cache: Optional[KVCache] = None) -> Tensor:
        """
        Predict future features z_hat_1..z_hat_T from projected inputs

        Args:
            projected: (B, T, head_dim) or (T, head_dim) head-space inputs
            cache: When given, inputs are new positions appended after the
                   cached ones and keys/values are added to the cache

        Returns:
            z_hat with the same leading shape as `projected`

        Raises:
            ValidationError: Total sequence length exceeds max_T
        """
        squeeze = projected.ndim == 2
        if squeeze:
            projected = projected.reshape(1, *projected.shape)
        if projected.shape[-1] != self.config.head_dim:
            raise ShapeError("decode", projected.shape, (None, None, self.config.head_dim))

        start = cache.length if cache is not None else 0
        stop = start + projected.shape[1]
        if stop > self.config.max_T:
            raise ValidationError(f"sequence length {stop} exceeds head.max_T={self.config.max_T}")

        hidden = projected + self.pos_embed[start:stop]
        for index, block in enumerate(self.blocks):
            layer_cache = cache.layers[index] if cache is not None else None
            hidden = block(hidden, causal=True, cache=layer_cache)
        z_hat = self.final_norm(hidden)
        return z_hat[0] if squeeze else z_hat

    def classify(self, z_hat: Tensor) -> Tensor:
        """Logits over the K actions for every predicted feature"""
        return self.classifier(z_hat)

    def probabilities(self, z_hat: Tensor) -> Tensor:
        """Softmax of classify(); rows sum to 1"""
        return softmax(self.classify(z_hat), axis=-1)

    def new_cache(self) -> KVCache:
        return KVCache.empty(len(self.blocks))

    def temporal_attention(self) -> np.ndarray:
        """Last decoder layer attention from the latest call, averaged over heads, (B, Tq, Tk)"""
        return self.blocks[-1].attn.last_attention
