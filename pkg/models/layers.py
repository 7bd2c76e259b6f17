"""
Neural network building blocks on top of tensor_core
Module registry, linear/normalization/MLP layers, and multi-head
self-attention with optional causal masking and key/value caching
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from config import INIT_STD, LAYER_NORM_EPS, MASK_FILL_FLOAT32
from errors import ShapeError, ValidationError
from tensor_core import Tensor, concat, gelu, layer_norm, masked_fill, softmax

logger = logging.getLogger(__name__)


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD,
                     dtype=None) -> np.ndarray:
    """Normal(0, std) samples truncated to +-2 std"""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype or np.float32)


class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True)


class Module:
    """
    Minimal module base: parameters and submodules are discovered from
    instance attributes in assignment order, which fixes parameter naming
    and the order of every reduction over parameters.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into parameters by name

        Raises:
            ValidationError: Missing name or shape mismatch
        """
        for name, param in self.named_parameters():
            if name not in state:
                raise ValidationError(f"state has no entry for parameter {name}")
            value = np.asarray(state[name])
            if value.shape != param.data.shape:
                raise ValidationError(
                    f"parameter {name} expects shape {param.data.shape}, state has {value.shape}"
                )
            param.data = value.astype(param.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float64 for gradient checks)"""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    """Affine map y = x W + b applied over the last axis"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(truncated_normal(rng, (in_features, out_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        return x @ self.weight + self.bias


class LayerNorm(Module):

    def __init__(self, width: int, dtype=np.float32):
        self.gain = Parameter(np.ones(width, dtype=dtype))
        self.bias = Parameter(np.zeros(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=LAYER_NORM_EPS)


class MLP(Module):
    """Two-layer GELU feed-forward network"""

    def __init__(self, width: int, ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(width, width * ratio, rng, dtype)
        self.fc2 = Linear(width * ratio, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class LayerCache:
    """Keys and values of all positions seen so far for one attention layer"""
    keys: Optional[np.ndarray] = None    # (B, H, S, dh)
    values: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.shape[2]


@dataclass
class KVCache:
    """Per-layer caches used by incremental decoding"""
    layers: List[LayerCache] = field(default_factory=list)

    @classmethod
    def empty(cls, num_layers: int) -> "KVCache":
        return cls(layers=[LayerCache() for _ in range(num_layers)])

    @property
    def length(self) -> int:
        return self.layers[0].length if self.layers else 0


def mask_fill_value(dtype: np.dtype) -> float:
    """-inf at 64-bit, a large negative constant at 32-bit"""
    return -np.inf if np.dtype(dtype) == np.float64 else MASK_FILL_FLOAT32


class MultiHeadAttention(Module):
    """
    Multi-head scaled dot-product self-attention

    The head-averaged attention weights of the latest call are kept in
    `last_attention` (shape (B, Tq, Tk)) for visualization.
    """

    def __init__(self, width: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if width % num_heads:
            raise ValidationError(f"width {width} not divisible by {num_heads} heads")
        self.width = width
        self.num_heads = num_heads
        self.head_width = width // num_heads
        self.query = Linear(width, width, rng, dtype)
        self.key = Linear(width, width, rng, dtype)
        self.value = Linear(width, width, rng, dtype)
        self.out = Linear(width, width, rng, dtype)
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.num_heads, self.head_width).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, causal: bool = False, cache: Optional[LayerCache] = None) -> Tensor:
        """
        Args:
            x: (B, T, width) input
            causal: Restrict position t to keys at positions <= t
            cache: Incremental decoding state; new keys/values are appended
                   and queries sit at positions cache.length .. cache.length + T - 1

        Returns:
            (B, T, width) output
        """
        batch, length, _ = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))

        offset = 0
        if cache is not None:
            offset = cache.length
            if cache.keys is not None:
                k = concat([Tensor(cache.keys), k], axis=2)
                v = concat([Tensor(cache.values), v], axis=2)
            cache.keys, cache.values = k.data, v.data

        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_width))
        if causal:
            total = k.shape[2]
            query_pos = np.arange(offset, offset + length)[:, None]
            blocked = np.arange(total)[None, :] > query_pos
            scores = masked_fill(scores, blocked, mask_fill_value(scores.dtype))
        weights = softmax(scores, axis=-1)
        self.last_attention = weights.data.mean(axis=1)

        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, self.width)
        return self.out(mixed)


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))"""

    def __init__(self, width: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, num_heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.mlp = MLP(width, mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor, causal: bool = False, cache: Optional[LayerCache] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), causal=causal, cache=cache)
        return x + self.mlp(self.norm2(x))
