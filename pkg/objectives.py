"""
Training objectives
Next-action, intermediate-class and future-feature losses, and their
combination into the naive and anticipative settings
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from config import IGNORE_LABEL, FeatLoss, LossConfig, LossMode
from errors import ClassIndexError, ShapeError, ValidationError
from tensor_core import Tensor, cross_entropy, l2_normalize, log_softmax, no_grad

logger = logging.getLogger(__name__)


@dataclass
class LabelTrack:
    """
    Labels c_1..c_{T+1} of one sample

    c_t (t <= T) is the action at observed frame t, or IGNORE_LABEL;
    c_{T+1} is the future action to anticipate.
    """
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 2:
            raise ValidationError("a label track needs at least one observed label and a target")
        if self.labels[-1] < 0:
            raise ValidationError("the target action c_{T+1} must be a valid class")
        if np.any(self.labels < IGNORE_LABEL):
            raise ValidationError(f"labels must be >= {IGNORE_LABEL}")

    @property
    def num_frames(self) -> int:
        return self.labels.size - 1

    @property
    def observed(self) -> np.ndarray:
        return self.labels[:-1]

    @property
    def next_action(self) -> int:
        return int(self.labels[-1])

    def check_classes(self, num_classes: int) -> None:
        """
        Raises:
            ClassIndexError: A label lies at or above num_classes
        """
        if np.any(self.labels >= num_classes):
            raise ClassIndexError(f"label {int(self.labels.max())} outside [0, {num_classes})")


LabelInput = Union[LabelTrack, Sequence[LabelTrack], np.ndarray]


def label_matrix(labels: LabelInput) -> np.ndarray:
    """Stack one or many label tracks into a (B, T+1) integer array"""
    if isinstance(labels, LabelTrack):
        return labels.labels.reshape(1, -1)
    if isinstance(labels, np.ndarray):
        return np.atleast_2d(labels.astype(np.int64, copy=False))
    return np.stack([track.labels for track in labels])


@dataclass
class LossReport:
    """Scalar loss terms of one step; `loss` is the differentiable total"""
    l_next: float
    l_cls: float
    l_feat: float
    total: float
    mode: LossMode
    loss: Tensor = field(repr=False)

    def as_row(self) -> dict:
        return {"l_next": self.l_next, "l_cls": self.l_cls, "l_feat": self.l_feat, "total": self.total}


def _batched(x: Tensor, ndim: int) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == ndim - 1 else x


def loss_next(logits_T: Tensor, c_next: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Next-action cross-entropy, -log y_hat_T[c_next], averaged over the batch

    Args:
        logits_T: (K,) or (B, K) logits at the final observed step
        c_next: Target action per sample

    Raises:
        ClassIndexError: Target outside [0, K)
    """
    return cross_entropy(logits_T, c_next)


def loss_cls(logits: Tensor, labels: LabelInput) -> Tensor:
    """
    Intermediate future-action loss

    Position t (t < T) is supervised with c_{t+1} whenever c_{t+1} is not
    IGNORE_LABEL. Each sample averages over its supervised positions (zero
    if there are none), then samples are averaged.

    Args:
        logits: (T, K) or (B, T, K)
        labels: Label tracks with T+1 entries each
    """
    logits = _batched(logits, 3)
    track = label_matrix(labels)
    batch, steps, num_classes = logits.shape
    if track.shape != (batch, steps + 1):
        raise ShapeError("loss_cls", logits.shape, track.shape)
    if steps < 2:
        return Tensor(np.zeros((), dtype=logits.dtype))

    targets = track[:, 1:steps]
    supervised = targets != IGNORE_LABEL
    if np.any(targets[supervised] >= num_classes) or np.any(targets[supervised] < 0):
        raise ClassIndexError(f"intermediate label outside [0, {num_classes})")
    counts = supervised.sum(axis=1, keepdims=True)
    weights = np.where(supervised, 1.0 / np.maximum(counts, 1), 0.0).astype(logits.dtype)

    log_probs = log_softmax(logits[:, :steps - 1, :], axis=-1)
    rows = np.arange(batch)[:, None]
    cols = np.arange(steps - 1)[None, :]
    picked = log_probs[rows, cols, np.where(supervised, targets, 0)]
    return -(picked * weights).sum() / batch


def loss_feat(z_hat: Tensor, z: Tensor) -> Tensor:
    """
    Future-feature regression: sum over t < T of ||z_hat_t - z_{t+1}||^2,
    normalized by (T-1)*d and averaged over the batch

    The targets z are detached. With T = 1 there is nothing to predict and
    the loss is 0.

    Args:
        z_hat: (T, d) or (B, T, d) predicted features
        z: Same shape, true (projected) features
    """
    z_hat, z = _batched(z_hat, 3), _batched(z, 3)
    if z_hat.shape != z.shape:
        raise ShapeError("loss_feat", z_hat.shape, z.shape)
    batch, steps, dim = z_hat.shape
    if steps < 2:
        logger.warning("future-feature loss undefined for T=1; using 0")
        return Tensor(np.zeros((), dtype=z_hat.dtype))
    diff = z_hat[:, :-1, :] - z.detach()[:, 1:, :]
    return (diff * diff).sum() / (batch * (steps - 1) * dim)


def loss_feat_nce(z_hat: Tensor, z: Tensor, temperature: float = 0.1) -> Tensor:
    """
    InfoNCE alternative to loss_feat

    Each prediction z_hat_t is scored against every target z_{s+1} in the
    batch by cosine similarity / temperature; its own z_{t+1} is the positive.

    Raises:
        ValidationError: Fewer than 2 candidates
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    z_hat, z = _batched(z_hat, 3), _batched(z, 3)
    if z_hat.shape != z.shape:
        raise ShapeError("loss_feat_nce", z_hat.shape, z.shape)
    batch, steps, dim = z_hat.shape
    count = batch * (steps - 1)
    if count < 2:
        raise ValidationError(f"InfoNCE needs at least 2 candidates, got {count}")
    queries = l2_normalize(z_hat[:, :-1, :].reshape(count, dim))
    keys = l2_normalize(z.detach()[:, 1:, :].reshape(count, dim))
    scores = (queries @ keys.transpose()) * (1.0 / temperature)
    return cross_entropy(scores, np.arange(count))


def _weighted(term: Tensor, weight: float) -> Tensor:
    return term if weight == 1.0 else term * weight


def _scaled(value: float, weight: float) -> float:
    return value if weight == 1.0 else value * weight


def total_loss(outputs, labels: LabelInput, mode: Union[LossMode, str] = LossMode.ANTICIPATIVE,
               z_true: Optional[Tensor] = None, config: Optional[LossConfig] = None) -> LossReport:
    """
    Combine the loss terms for one batch

    Args:
        outputs: ModelOutputs of the batch
        labels: Label tracks, T+1 entries each
        mode: naive (next-action loss only) or anticipative (all three terms)
        z_true: future-feature targets; defaults to outputs.z_proj
        config: Term weights and the feature-loss variant

    Returns:
        LossReport; every term is reported even when it does not contribute
    """
    mode = LossMode(mode)
    config = config or LossConfig(mode=mode)
    track = label_matrix(labels)
    logits = _batched(outputs.logits, 3)
    z_hat = _batched(outputs.z_hat, 3)
    z_true = _batched(outputs.z_proj if z_true is None else z_true, 3)

    l_next = loss_next(logits[:, -1, :], track[:, -1])

    def auxiliary():
        l_cls = loss_cls(logits, track)
        if config.feat_loss is FeatLoss.NCE:
            l_feat = loss_feat_nce(z_hat, z_true, config.nce_temperature)
        else:
            l_feat = loss_feat(z_hat, z_true)
        return l_cls, l_feat

    if mode is LossMode.NAIVE:
        with no_grad():
            l_cls, l_feat = auxiliary()
        total = l_next
    else:
        l_cls, l_feat = auxiliary()
        total = l_next + _weighted(l_cls, config.cls_weight) + _weighted(l_feat, config.feat_weight)

    # total == l_next + l_cls + l_feat exactly, at either precision
    next_value, cls_value, feat_value = l_next.item(), l_cls.item(), l_feat.item()
    if mode is LossMode.NAIVE:
        total_value = next_value
    else:
        total_value = next_value + _scaled(cls_value, config.cls_weight) + _scaled(feat_value, config.feat_weight)

    return LossReport(
        l_next=next_value,
        l_cls=cls_value,
        l_feat=feat_value,
        total=total_value,
        mode=mode,
        loss=total,
    )
