"""
Central finite-difference gradient checking
"""

import logging
from typing import Callable, List, Optional, Sequence

import numpy as np

from tensor_core.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def _scalarize(out: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if weights is None:
        return out.sum() if out.size == 1 and out.ndim else out
    return (out * weights).sum()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-8)"""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              max_checks: Optional[int] = None, seed: int = 0) -> List[float]:
    """
    Compare backward() gradients against central finite differences

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry participates.

    Args:
        fn: Callable mapping the inputs to a Tensor
        inputs: Tensors with requires_grad=True whose data is perturbed in place
        eps: Finite-difference step
        max_checks: Coordinates sampled per input (all when None)
        seed: Seed for the projection and coordinate sampling

    Returns:
        Relative error per input
    """
    rng = np.random.default_rng(seed)
    for tensor in inputs:
        if tensor.dtype != np.float64:
            logger.warning(f"gradcheck on {tensor.dtype} input; finite differences want float64")
        tensor.grad = None

    out = fn(*inputs)
    weights = None if out.size == 1 else rng.standard_normal(out.shape).astype(out.dtype)
    _scalarize(out, weights).backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    errors = []
    for position, tensor in enumerate(inputs):
        count = tensor.size if max_checks is None else min(max_checks, tensor.size)
        flat_coords = np.sort(rng.choice(tensor.size, size=count, replace=False))
        numeric = np.empty(count, dtype=np.float64)
        for j, flat in enumerate(flat_coords):
            coord = np.unravel_index(flat, tensor.shape)
            original = tensor.data[coord]
            with no_grad():
                tensor.data[coord] = original + eps
                plus = float(_scalarize(fn(*inputs), weights).data)
                tensor.data[coord] = original - eps
                minus = float(_scalarize(fn(*inputs), weights).data)
            tensor.data[coord] = original
            numeric[j] = (plus - minus) / (2.0 * eps)
        picked = analytic[position].reshape(-1)[flat_coords]
        errors.append(relative_error(picked, numeric))
    for tensor in inputs:
        tensor.grad = None
    return errors
