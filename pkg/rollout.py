"""
Long-term anticipation and attention export
Autoregressive rollout in head space with a key/value cache, spatial
attention rollout over the frame encoder, temporal attention of the head,
and heatmap files
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from errors import ShapeError, UnsupportedModeError, ValidationError
from models import AnticipativeModel
from tensor_core import Tensor, concat, no_grad, softmax
from utils import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)


@dataclass
class RolloutStep:
    step: int
    action: int
    probability: float


@dataclass
class RolloutTrace:
    """Predicted action per future step; steps are numbered from 1"""
    steps: List[RolloutStep] = field(default_factory=list)
    logits: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if [s.step for s in self.steps] != list(range(1, len(self.steps) + 1)):
            raise ValueError("rollout steps must be contiguous from 1")

    @property
    def actions(self) -> List[int]:
        return [s.action for s in self.steps]

    def compressed(self) -> List[Tuple[int, int]]:
        """Run-length view: (action, number of consecutive steps)"""
        runs: List[Tuple[int, int]] = []
        for action in self.actions:
            if runs and runs[-1][0] == action:
                runs[-1] = (action, runs[-1][1] + 1)
            else:
                runs.append((action, 1))
        return runs

    def format(self, names: Sequence[str] = ()) -> str:
        parts = []
        for action, count in self.compressed():
            label = names[action] if action < len(names) else str(action)
            parts.append(f"{label} x{count}")
        return " -> ".join(parts)


def _trace(logits: List[np.ndarray]) -> RolloutTrace:
    stacked = np.stack(logits)
    probs = softmax(Tensor(stacked.astype(np.float64)), axis=-1).data
    steps = [
        RolloutStep(step=i + 1, action=int(np.argmax(row)), probability=float(row.max()))
        for i, row in enumerate(probs)
    ]
    return RolloutTrace(steps=steps, logits=stacked)


def _prepare(model: AnticipativeModel, clip: np.ndarray, n_steps: int, from_features: bool) -> Tensor:
    if n_steps < 1:
        raise ValidationError("n_steps must be at least 1")
    length = clip.shape[0]
    max_T = model.head.config.max_T
    if n_steps + length > max_T:
        raise ValidationError(f"rollout of {n_steps} steps after {length} frames exceeds head.max_T={max_T}")
    features = model.encode(np.asarray(clip)[None], from_features=from_features)
    return model.head.project_features(features)


def rollout(model: AnticipativeModel, clip: np.ndarray, n_steps: int, from_features: bool = False) -> RolloutTrace:
    """
    Anticipate n_steps future actions from one observed clip

    Step 1 is the prediction at the last observed frame. Each later step
    appends the last predicted feature z_hat (in head space, after the
    projector) as a new input and decodes only that position, reusing the
    cached keys and values of every earlier position.

    Args:
        model: Trained model
        clip: (T, H, W, C) frames or (T, dim) features
        n_steps: Number of future steps
        from_features: Treat clip as features even when the model has a backbone

    Raises:
        ValidationError: n_steps < 1 or n_steps + T > max_T
    """
    with no_grad():
        projected = _prepare(model, clip, n_steps, from_features)
        cache = model.head.new_cache()
        z_hat = model.head.decode(projected, cache=cache)
        logits = [model.head.classify(z_hat).data[0, -1]]
        for _ in range(n_steps - 1):
            z_hat = model.head.decode(z_hat[:, -1:, :], cache=cache)
            logits.append(model.head.classify(z_hat).data[0, -1])
    return _trace(logits)


def rollout_recompute(model: AnticipativeModel, clip: np.ndarray, n_steps: int,
                      from_features: bool = False) -> RolloutTrace:
    """Same as rollout() but re-decodes the whole extended sequence every step"""
    with no_grad():
        sequence = _prepare(model, clip, n_steps, from_features)
        z_hat = model.head.decode(sequence)
        logits = [model.head.classify(z_hat).data[0, -1]]
        for _ in range(n_steps - 1):
            sequence = concat([sequence, z_hat[:, -1:, :]], axis=1)
            z_hat = model.head.decode(sequence)
            logits.append(model.head.classify(z_hat).data[0, -1])
    return _trace(logits)


def attention_rollout(per_layer_attention: Sequence[np.ndarray]) -> np.ndarray:
    """
    Aggregate head-averaged attention over layers

    Each layer's A becomes 0.5 * A + 0.5 * I, rows renormalized, and the
    layers are multiplied from the last down to the first.

    Args:
        per_layer_attention: Row-stochastic (N, N) matrices, first layer first;
                             a leading batch axis is allowed

    Returns:
        (N, N) (or batched) row-stochastic matrix

    Raises:
        ShapeError: A matrix is not square or layers disagree in size
    """
    if not per_layer_attention:
        raise ValidationError("attention rollout needs at least one layer")
    result = None
    for attention in per_layer_attention:
        attention = np.asarray(attention, dtype=np.float64)
        if attention.ndim < 2 or attention.shape[-1] != attention.shape[-2]:
            raise ShapeError("attention_rollout", attention.shape)
        mixed = 0.5 * attention + 0.5 * np.eye(attention.shape[-1])
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        if result is not None and result.shape != mixed.shape:
            raise ShapeError("attention_rollout", result.shape, mixed.shape)
        result = mixed if result is None else mixed @ result
    return result


def cls_heatmap(rolled: np.ndarray, grid_size: int) -> np.ndarray:
    """[CLASS]-token row of a rollout matrix over the patches, as a (grid, grid) map"""
    row = rolled[..., 0, 1:]
    if row.shape[-1] != grid_size * grid_size:
        raise ShapeError("cls_heatmap", rolled.shape, (grid_size * grid_size + 1,) * 2)
    return row.reshape(*row.shape[:-1], grid_size, grid_size)


def spatial_attention_maps(model: AnticipativeModel, frames: np.ndarray) -> np.ndarray:
    """
    Attention-rollout heatmap of every frame of a clip

    Args:
        frames: (T, H, W, C)

    Returns:
        (T, grid, grid) maps

    Raises:
        UnsupportedModeError: The model has no frame encoder
    """
    if not model.has_backbone:
        raise UnsupportedModeError("spatial attention needs a frame encoder; this model runs on fixed features")
    with no_grad():
        model.backbone.forward_tokens(frames)
    rolled = attention_rollout(model.backbone.spatial_attention())
    return cls_heatmap(rolled, model.backbone.config.grid_size)


def head_temporal_attention(model: AnticipativeModel, clip: np.ndarray, from_features: bool = False) -> np.ndarray:
    """
    Last decoder layer attention over the observed frames, averaged over heads

    Returns:
        (T, T) matrix; row t is the attention of query t and is zero after t.
        The final row is the one exported for visualization.
    """
    with no_grad():
        model.forward(np.asarray(clip)[None], from_features=from_features)
    return model.head.temporal_attention()[0]


def heatmap_to_csv(heatmap: np.ndarray) -> str:
    heatmap = np.atleast_2d(heatmap)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in heatmap)


def heatmap_to_pgm(heatmap: np.ndarray) -> bytes:
    """Binary 8-bit PGM, min-max normalized (a constant map is all zeros)"""
    heatmap = np.atleast_2d(np.asarray(heatmap, dtype=np.float64))
    low, high = heatmap.min(), heatmap.max()
    scaled = np.zeros_like(heatmap) if high == low else (heatmap - low) / (high - low)
    pixels = np.round(scaled * 255).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_heatmap(path_stem: Union[str, Path], heatmap: np.ndarray) -> Tuple[Path, Path]:
    """Write <stem>.csv and <stem>.pgm"""
    stem = Path(path_stem)
    csv_path, pgm_path = stem.with_suffix(".csv"), stem.with_suffix(".pgm")
    atomic_write_text(csv_path, heatmap_to_csv(heatmap))
    atomic_write_bytes(pgm_path, heatmap_to_pgm(heatmap))
    logger.info(f"Heatmap {heatmap.shape} written to {csv_path} and {pgm_path}")
    return csv_path, pgm_path
