"""
Full anticipation model: backbone -> projector -> causal decoder -> classifier
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from config import RunConfig
from errors import ConfigurationError, ShapeError
from models.backbone import VisionEncoder
from models.head import CausalHead
from models.layers import Module, Parameter
from tensor_core import Tensor, no_grad, softmax
from utils import sha256_bytes

logger = logging.getLogger(__name__)


@dataclass
class ModelOutputs:
    """
    Per-step outputs of one forward pass

    z_proj are the projected input features (the future-feature targets), z_hat the
    predicted future features and logits the unnormalized class scores.
    """
    z_proj: Tensor
    z_hat: Tensor
    logits: Tensor

    @property
    def y_hat(self) -> np.ndarray:
        """Class distributions, (B, T, K)"""
        return softmax(self.logits.detach(), axis=-1).data

    @property
    def next_action_logits(self) -> Tensor:
        """Logits of the final step, the model's anticipation"""
        return self.logits[..., -1, :]

    @property
    def next_action_probs(self) -> np.ndarray:
        return self.y_hat[..., -1, :]


class AnticipativeModel(Module):
    """
    Backbone (optional) plus causal head

    Without a backbone the model consumes precomputed features directly.
    With one, `from_features=True` bypasses it and leaves it untouched.
    """

    def __init__(self, head: CausalHead, backbone: Optional[VisionEncoder] = None):
        self.backbone = backbone
        self.head = head

    @property
    def has_backbone(self) -> bool:
        return self.backbone is not None

    def encode(self, inputs: Union[Tensor, np.ndarray], from_features: bool = False) -> Tensor:
        """Per-frame features z_t: (B, T, dim)"""
        inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if from_features or self.backbone is None:
            if inputs.ndim != 3:
                raise ShapeError("forward (features)", inputs.shape, ("B", "T", "dim"))
            return inputs
        if inputs.ndim != 5:
            raise ShapeError("forward (frames)", inputs.shape, ("B", "T", "H", "W", "C"))
        return self.backbone.encode_clip(inputs)

    def forward(self, inputs: Union[Tensor, np.ndarray], from_features: bool = False) -> ModelOutputs:
        """
        Run the full pipeline on a batch of clips

        Args:
            inputs: (B, T, H, W, C) frames or (B, T, dim) features
            from_features: Treat inputs as features even when a backbone exists

        Returns:
            ModelOutputs with (B, T, head_dim) features and (B, T, K) logits
        """
        features = self.encode(inputs, from_features=from_features)
        z_proj = self.head.project_features(features)
        z_hat = self.head.decode(z_proj)
        logits = self.head.classify(z_hat)
        return ModelOutputs(z_proj=z_proj, z_hat=z_hat, logits=logits)

    __call__ = forward

    def extract_features(self, frames: np.ndarray) -> np.ndarray:
        """Backbone features without recording gradients, (B, T, D)"""
        if self.backbone is None:
            raise ConfigurationError("model has no backbone to extract features with")
        with no_grad():
            return self.backbone.encode_clip(frames).data

    def trainable_parameters(self, from_features: bool = False) -> List[Tuple[str, Parameter]]:
        """Named parameters the optimizer should update"""
        if from_features and self.backbone is not None:
            return list(self.head.named_parameters("head."))
        return list(self.named_parameters())


def build_model(config: RunConfig, input_dim: Optional[int], num_classes: int,
                seed: Optional[int] = None, dtype=np.float32) -> AnticipativeModel:
    """
    Construct a freshly initialized model for a run configuration

    Args:
        config: Run configuration (backbone mode and dimensions)
        input_dim: Feature dim for fixed-feature mode (ignored with a backbone)
        num_classes: K
        seed: Initialization seed (defaults to config.seed)
        dtype: Parameter dtype

    Returns:
        AnticipativeModel
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    backbone = None
    if config.backbone_mode.uses_frames:
        backbone = VisionEncoder(config.backbone, rng, dtype)
        input_dim = backbone.output_dim
    elif input_dim is None:
        raise ConfigurationError("fixed-feature mode needs the feature dimension")
    head = CausalHead(config.head, input_dim, num_classes, rng, dtype)
    model = AnticipativeModel(head=head, backbone=backbone)
    logger.info(
        f"Built {config.backbone_mode.value} model: {model.num_parameters()} parameters "
        f"(head {head.num_parameters()})"
    )
    return model


def model_checksum(params: Dict[str, np.ndarray]) -> str:
    """Digest of parameter bytes in name order"""
    blob = b"".join(name.encode("utf-8") + np.ascontiguousarray(params[name]).tobytes()
                    for name in sorted(params))
    return sha256_bytes(blob)
