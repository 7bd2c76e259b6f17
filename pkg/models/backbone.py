"""
Per-frame feature extraction
ViT-style frame encoder with a [CLASS] token and learned spatial positions,
applied with shared weights to every frame, plus the fixed-feature adapter
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from config import BackboneConfig
from data import read_features
from errors import ConfigurationError, ShapeError, ValidationError
from models.layers import LayerNorm, Linear, Module, Parameter, TransformerBlock, truncated_normal
from tensor_core import Tensor, concat

logger = logging.getLogger(__name__)


def patchify(frames: Union[Tensor, np.ndarray], patch_size: int) -> Tensor:
    """
    Cut frames into non-overlapping square patches

    Patches are ordered row-major over the patch grid and each patch is
    flattened row-major as (row, column, channel).

    Args:
        frames: (..., H, W, C) pixel array
        patch_size: Patch side P

    Returns:
        (..., (H/P)*(W/P), P*P*C) tensor

    Raises:
        ShapeError: H or W not divisible by P
    """
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    *lead, height, width, channels = frames.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"patchify (P={patch_size})", frames.shape)
    rows, cols = height // patch_size, width // patch_size
    n = len(lead)
    grid = frames.reshape(*lead, rows, patch_size, cols, patch_size, channels)
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return grid.transpose(axes).reshape(*lead, rows * cols, patch_size * patch_size * channels)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int, channels: int) -> np.ndarray:
    """Inverse of patchify for plain arrays"""
    *lead, _, _ = patches.shape
    rows, cols = height // patch_size, width // patch_size
    n = len(lead)
    grid = patches.reshape(*lead, rows, cols, patch_size, patch_size, channels)
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return grid.transpose(axes).reshape(*lead, height, width, channels)


class VisionEncoder(Module):
    """
    ViT-style frame encoder B: z_t = B(X_t)

    Each frame is processed independently; no information crosses frames.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        width = config.model_dim
        self.patch_embed = Linear(config.patch_dim, width, rng, dtype)
        self.cls_token = Parameter(truncated_normal(rng, (1, 1, width), dtype=dtype))
        self.pos_embed = Parameter(truncated_normal(rng, (1, config.tokens_per_frame, width), dtype=dtype))
        self.blocks = [
            TransformerBlock(width, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.num_layers)
        ]
        self.final_norm = LayerNorm(width, dtype)

    @property
    def output_dim(self) -> int:
        return self.config.model_dim

    def _check_frames(self, frames: Tensor) -> None:
        expected = self.config.frame_shape
        if tuple(frames.shape[-3:]) != expected:
            raise ShapeError("encode_frame", frames.shape, expected)

    def forward_tokens(self, frames: Tensor) -> Tensor:
        """
        Token states after the last block, before the final LayerNorm

        Args:
            frames: (N, H, W, C) independent frames

        Returns:
            (N, num_patches + 1, D) token states, [CLASS] at index 0
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        self._check_frames(frames)
        count = frames.shape[0]
        tokens = self.patch_embed(patchify(frames, self.config.patch_size))
        cls = self.cls_token.broadcast_to((count, 1, self.config.model_dim))
        tokens = concat([cls, tokens], axis=1) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def encode_frames(self, frames: Union[Tensor, np.ndarray]) -> Tensor:
        """(N, H, W, C) frames -> (N, D) [CLASS] features after the final LayerNorm"""
        tokens = self.final_norm(self.forward_tokens(frames))
        return tokens[:, 0, :]

    def encode_frame(self, frame: Union[Tensor, np.ndarray]) -> Tensor:
        """Single (H, W, C) frame -> (D,) feature"""
        frame = frame if isinstance(frame, Tensor) else Tensor(frame)
        if frame.ndim != 3:
            raise ShapeError("encode_frame", frame.shape, self.config.frame_shape)
        return self.encode_frames(frame.reshape(1, *frame.shape))[0]

    def encode_clip(self, frames: Union[Tensor, np.ndarray]) -> Tensor:
        """
        Encode every frame of one or more clips with shared weights

        Args:
            frames: (T, H, W, C) or (B, T, H, W, C)

        Returns:
            (T, D) or (B, T, D) features

        Raises:
            ValidationError: Empty clip
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        self._check_frames(frames)
        if frames.ndim not in (4, 5):
            raise ShapeError("encode_clip", frames.shape, ("T",) + self.config.frame_shape)
        lead = frames.shape[:-3]
        if 0 in lead:
            raise ValidationError("cannot encode an empty clip")
        flat = frames.reshape(-1, *self.config.frame_shape)
        features = self.encode_frames(flat)
        return features.reshape(*lead, self.config.model_dim)

    def spatial_attention(self) -> List[np.ndarray]:
        """Head-averaged attention of each layer from the latest call, (N, tokens, tokens) each"""
        return [block.attn.last_attention for block in self.blocks]


def load_fixed_features(path: Union[str, Path], expected_dim: Optional[int] = None,
                        vocab_hash: Optional[str] = None):
    """
    Read a feature file as ready-made z_t sequences for head-only training

    Args:
        path: Feature file written by data.write_features
        expected_dim: Input dim of the head projector, when already built
        vocab_hash: Required vocabulary hash, when known

    Returns:
        List of AnticipationSample with feature inputs

    Raises:
        ConfigurationError: Feature dim differs from the projector input dim
    """
    samples, header = read_features(path)
    if expected_dim is not None and header.dim != expected_dim:
        raise ConfigurationError(
            f"feature file {path} has dim {header.dim} but the head projector expects {expected_dim}"
        )
    if vocab_hash is not None and header.vocab_hash != vocab_hash:
        raise ConfigurationError(f"feature file {path} was written for a different action vocabulary")
    logger.info(f"Loaded {len(samples)} fixed-feature samples (T={header.num_frames}, dim={header.dim})")
    return samples
