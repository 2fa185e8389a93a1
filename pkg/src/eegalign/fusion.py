"""Token fusion between the original and the filtered image streams.

The default strategy attends from original-image patch tokens (queries)
to filtered-image tokens (keys/values), feeds the attended summary
through a small gate network, and blends the two streams per token with
the resulting sigmoid gate. The fallback strategy skips tokens entirely
and mixes the two images pixelwise with one learnable scalar.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .tensor import Parameter, Tensor, attention, gelu, matmul, sigmoid, transpose

STRATEGIES = ("catf", "bilinear")


class CrossAttentionFusion:
    """Gated cross-attention blending of two aligned token sequences."""

    def __init__(self, dim: int, heads: int = 1, gate_bias_init: float = -2.0,
                 rng: np.random.Generator | None = None):
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"heads must divide the token dim, got {heads} for dim {dim}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.heads = heads
        scale = 1.0 / math.sqrt(dim)
        self.wq = Parameter("fusion.wq", Tensor(rng.normal(size=(dim, dim)) * scale), group="B")
        self.wk = Parameter("fusion.wk", Tensor(rng.normal(size=(dim, dim)) * scale), group="B")
        self.wv = Parameter("fusion.wv", Tensor(rng.normal(size=(dim, dim)) * scale), group="B")
        half = max(dim // 2, 1)
        self.gate_w1 = Parameter("fusion.gate.w1", Tensor(rng.normal(size=(dim, half)) * scale), group="B")
        self.gate_b1 = Parameter("fusion.gate.b1", Tensor(np.zeros(half)), group="B")
        self.gate_w2 = Parameter("fusion.gate.w2", Tensor(rng.normal(size=(half, 1)) / math.sqrt(half)), group="B")
        self.gate_b2 = Parameter("fusion.gate.b2", Tensor(np.full(1, float(gate_bias_init))), group="B")

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return transpose(x.reshape((b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return transpose(x, (0, 2, 1, 3)).reshape((b, n, h * dh))

    def gate(self, x_orig: Tensor, x_filt: Tensor) -> Tensor:
        """Per-token blend weight in (0, 1), shape (B, N, 1)."""
        if x_orig.shape != x_filt.shape:
            raise DimensionError(f"token streams differ: {x_orig.shape} vs {x_filt.shape}")
        if x_orig.ndim != 3 or x_orig.shape[2] != self.dim:
            raise DimensionError(f"expected (B, N, {self.dim}) tokens, got {x_orig.shape}")
        q = matmul(x_orig, self.wq.value)
        k = matmul(x_filt, self.wk.value)
        v = matmul(x_filt, self.wv.value)
        if self.heads > 1:
            z = self._merge_heads(attention(self._split_heads(q), self._split_heads(k), self._split_heads(v)))
        else:
            z = attention(q, k, v)
        hidden = gelu(matmul(z, self.gate_w1.value) + self.gate_b1.value)
        return sigmoid(matmul(hidden, self.gate_w2.value) + self.gate_b2.value)

    def fuse(self, x_orig: Tensor, x_filt: Tensor) -> Tensor:
        alpha = self.gate(x_orig, x_filt)
        return alpha * x_filt + (1.0 - alpha) * x_orig

    def params(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.gate_w1, self.gate_b1, self.gate_w2, self.gate_b2]


def bilinear_mix(image: Tensor, filtered: Tensor, lam) -> Tensor:
    """Pixelwise blend lam * filtered + (1 - lam) * image, lam in (0, 1)."""
    if image.shape != filtered.shape:
        raise DimensionError(f"image streams differ: {image.shape} vs {filtered.shape}")
    if isinstance(lam, Tensor):
        value = lam.item()
    else:
        value = float(lam)
        lam = Tensor(value)
    if not 0.0 < value < 1.0:
        raise DomainError(f"mix coefficient must lie strictly inside (0, 1), got {value}")
    return lam * filtered + (1.0 - lam) * image


class BilinearMix:
    """Single learnable mixing scalar, kept in (0, 1) via a sigmoid."""

    def __init__(self, mix_init: float = 0.5):
        if not 0.0 < mix_init < 1.0:
            raise DomainError(f"mix_init must lie strictly inside (0, 1), got {mix_init}")
        logit = math.log(mix_init / (1.0 - mix_init))
        self.mix_logit = Parameter("fusion.mix_logit", Tensor(logit), group="B")

    def coefficient(self) -> Tensor:
        return sigmoid(self.mix_logit.value)

    def mix(self, image: Tensor, filtered: Tensor) -> Tensor:
        return bilinear_mix(image, filtered, self.coefficient())

    def params(self) -> list[Parameter]:
        return [self.mix_logit]
