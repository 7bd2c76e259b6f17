"""
Differentiable operations built on Tensor
Fused kernels with hand-written backward passes for the numerically
sensitive pieces (softmax family, LayerNorm, GELU)
"""

import logging
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from errors import ClassIndexError, ShapeError
from tensor_core.tensor import Tensor, _as_tensor, unbroadcast

logger = logging.getLogger(__name__)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast"""
    return _as_tensor(a).matmul(b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Max-stabilized softmax along one axis

    Args:
        x: Input scores
        axis: Normalization axis

    Returns:
        Tensor whose slices along `axis` sum to one
    """
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return Tensor._result(out_data, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log of softmax"""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        x._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_data, (x,), "log_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize the last axis to zero mean and unit variance, then apply gain and bias

    Args:
        x: Input of shape (..., D)
        gain: Scale of shape (D,)
        bias: Shift of shape (D,)
        eps: Variance floor

    Returns:
        Tensor of the same shape as x
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(variance + eps)
    normed = centered * rstd
    out_data = normed * gain.data + bias.data
    lead_axes = tuple(range(x.ndim - 1))

    def backward(g):
        if x.requires_grad:
            g_normed = g * gain.data
            mean_g = g_normed.mean(axis=-1, keepdims=True)
            mean_gn = (g_normed * normed).mean(axis=-1, keepdims=True)
            x._accumulate(rstd * (g_normed - mean_g - normed * mean_gn))
        if gain.requires_grad:
            gain._accumulate((g * normed).sum(axis=lead_axes))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead_axes))

    return Tensor._result(out_data, (x, gain, bias), "layer_norm", backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using the Gaussian error function"""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._result(out_data, (x,), "gelu", backward)


def cross_entropy(logits: Tensor, target: Union[int, Sequence[int], np.ndarray],
                  ignore_index: Optional[int] = None, reduction: str = "mean") -> Tensor:
    """
    Negative log-likelihood of target classes under softmax(logits)

    Args:
        logits: (K,) or (N, K) unnormalized scores
        target: Class index, or one index per row
        ignore_index: Rows with this target contribute nothing
        reduction: "mean" over kept rows, "sum", or "none" (per kept row)

    Returns:
        Scalar loss (or per-row losses for reduction="none")

    Raises:
        ClassIndexError: A kept target lies outside [0, K)
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)

    num_classes = logits.shape[1]
    keep = np.ones(len(targets), dtype=bool) if ignore_index is None else targets != ignore_index
    bad = targets[keep & ((targets < 0) | (targets >= num_classes))]
    if bad.size:
        raise ClassIndexError(f"class index {int(bad[0])} outside [0, {num_classes})")

    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        return Tensor(np.zeros((0,) if reduction == "none" else (), dtype=logits.dtype))

    picked = log_softmax(logits, axis=-1)[rows, targets[rows]]
    losses = -picked
    if reduction == "none":
        return losses
    if reduction == "sum":
        return losses.sum()
    return losses.mean()


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis"""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def backward(g):
        for part, grad in zip(tensors, np.split(g, boundaries, axis=axis)):
            part._accumulate(grad)

    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out_data, tensors, "concat", backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """
    Replace entries where mask is True with a constant

    The filled entries receive exactly zero gradient.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def backward(g):
        x._accumulate(unbroadcast(np.where(mask, 0.0, g).astype(x.dtype, copy=False), x.shape))

    return Tensor._result(out_data, (x,), "masked_fill", backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale slices along axis to unit Euclidean norm"""
    x = _as_tensor(x)
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm
