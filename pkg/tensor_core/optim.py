"""
SGD with momentum and the warmup + cosine learning-rate schedule
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import AVTError, ValidationError
from tensor_core.tensor import Tensor

logger = logging.getLogger(__name__)


class GradientError(AVTError):
    """A registered parameter has no gradient at step time"""


@dataclass
class OptimizerState:
    """Momentum buffers and hyperparameters of a running SGD optimizer"""
    momentum_buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    base_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValidationError("base_lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")


class SGD:
    """
    Classical momentum SGD with weight decay folded into the gradient

    Update per parameter: g <- g + wd * theta; v <- mu * v + g; theta <- theta - lr * v
    """

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 1e-4,
                 momentum: float = 0.9, weight_decay: float = 1e-6):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate parameter names registered with optimizer")
        self.state = OptimizerState(
            momentum_buffers={name: np.zeros_like(p.data) for name, p in self.params},
            base_lr=lr,
            momentum=momentum,
            weight_decay=weight_decay,
        )
        self.lr = lr

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.grad = None

    def step(self) -> None:
        """
        Apply one update to every registered parameter and clear its gradient

        Raises:
            GradientError: A parameter has no gradient
        """
        missing = [name for name, p in self.params if p.grad is None]
        if missing:
            raise GradientError(f"no gradient for parameter(s): {', '.join(missing)}")

        mu = self.state.momentum
        wd = self.state.weight_decay
        for name, param in self.params:
            grad = param.grad
            if wd:
                grad = grad + wd * param.data
            buf = self.state.momentum_buffers[name]
            buf *= mu
            buf += grad
            param.data -= self.lr * buf
            param.grad = None
        self.state.step += 1

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: buf.copy() for name, buf in self.state.momentum_buffers.items()}

    def load_state_dict(self, buffers: Dict[str, np.ndarray]) -> None:
        for name, param in self.params:
            if name not in buffers:
                raise ValidationError(f"checkpoint has no momentum buffer for {name}")
            if buffers[name].shape != param.data.shape:
                raise ValidationError(
                    f"momentum buffer shape {buffers[name].shape} does not match {name} {param.data.shape}"
                )
            self.state.momentum_buffers[name] = np.array(buffers[name], dtype=param.data.dtype)


def lr_at_epoch(epoch: float, total: int = 50, warmup: int = 20, base: float = 1e-4) -> float:
    """
    Learning rate at a (possibly fractional) epoch

    Linear ramp from 0 to base over [0, warmup), then cosine decay from base
    to 0 over [warmup, total].

    Args:
        epoch: Epoch position, 0 <= epoch <= total
        total: Total training epochs
        warmup: Warmup epochs
        base: Peak learning rate

    Returns:
        Learning rate

    Raises:
        ValidationError: epoch outside [0, total]
    """
    if epoch < 0 or epoch > total:
        raise ValidationError(f"epoch {epoch} outside schedule range [0, {total}]")
    if epoch < warmup:
        return base * epoch / warmup
    if total == warmup:
        return base
    progress = (epoch - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))
