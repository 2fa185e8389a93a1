"""Instance-conditioned dynamic filtering of input images.

A small convolutional generator looks at each image and emits one
kernel per color channel; the kernels are then applied to that same
image as a zero-padded, size-preserving, channel-wise convolution. The
generator head starts out biased toward the delta kernel, so filtering
is close to the identity at initialization and the rest of the pipeline
sees familiar images early in training.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, gelu, matmul, transpose, unfold

STEM_CHANNELS = (8, 16)
HIDDEN = 64
MIN_INPUT = 7  # receptive field of the two stride-2 3x3 stem convolutions


def _conv2d(x: Tensor, weight: Parameter, bias: Parameter, stride: int, padding: int) -> Tensor:
    """Standard convolution via unfold + matmul; weight is (out, in, kh, kw)."""
    c_out, c_in, kh, kw = weight.value.shape
    bsz, ch, h, w = x.shape
    if ch != c_in:
        raise DimensionError(f"conv expects {c_in} input channels, got {ch}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = unfold(x, kh, kw, stride=stride, padding=padding)              # (B, L, Cin*kh*kw)
    flat_w = weight.value.reshape((c_out, c_in * kh * kw)).transpose()    # (Cin*kh*kw, Cout)
    out = matmul(cols, flat_w) + bias.value                               # (B, L, Cout)
    return transpose(out, (0, 2, 1)).reshape((bsz, c_out, oh, ow))


class FilterGenerator:
    """Conv stem, global average pool, MLP head emitting 3 kernels."""

    def __init__(self, fh: int = 5, fw: int = 5, rng: np.random.Generator | None = None):
        if fh % 2 == 0 or fw % 2 == 0 or fh < 1 or fw < 1:
            raise ConfigError(f"filter size must be odd and positive, got {fh}x{fw}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.fh = fh
        self.fw = fw
        c1, c2 = STEM_CHANNELS
        out_dim = 3 * fh * fw

        def dense(shape, fan_in, scale=1.0):
            return Tensor(rng.normal(size=shape) * (scale / np.sqrt(fan_in)))

        self.conv1_w = Parameter("filter.conv1.weight", dense((c1, 3, 3, 3), 3 * 9), group="B")
        self.conv1_b = Parameter("filter.conv1.bias", Tensor(np.zeros(c1)), group="B")
        self.conv2_w = Parameter("filter.conv2.weight", dense((c2, c1, 3, 3), c1 * 9), group="B")
        self.conv2_b = Parameter("filter.conv2.bias", Tensor(np.zeros(c2)), group="B")
        self.fc1_w = Parameter("filter.fc1.weight", dense((c2, HIDDEN), c2), group="B")
        self.fc1_b = Parameter("filter.fc1.bias", Tensor(np.zeros(HIDDEN)), group="B")
        # small head weights plus a center-spike bias keep the initial kernels near-delta
        self.fc2_w = Parameter("filter.fc2.weight", dense((HIDDEN, out_dim), HIDDEN, scale=0.01), group="B")
        delta = np.zeros((3, fh, fw))
        delta[:, fh // 2, fw // 2] = 1.0
        self.fc2_b = Parameter("filter.fc2.bias", Tensor(delta.reshape(-1)), group="B")

    def generate(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> per-instance kernels (B, 3, fh, fw)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected images (B, 3, H, W), got {images.shape}")
        if images.shape[2] < MIN_INPUT or images.shape[3] < MIN_INPUT:
            raise ConfigError(
                f"filter generator needs images of at least {MIN_INPUT}x{MIN_INPUT}, got "
                f"{images.shape[2]}x{images.shape[3]}"
            )
        h = gelu(_conv2d(images, self.conv1_w, self.conv1_b, stride=2, padding=1))
        h = gelu(_conv2d(h, self.conv2_w, self.conv2_b, stride=2, padding=1))
        pooled = h.mean(axis=(2, 3))                                     # (B, C2)
        hid = gelu(matmul(pooled, self.fc1_w.value) + self.fc1_b.value)
        flat = matmul(hid, self.fc2_w.value) + self.fc2_b.value          # (B, 3*fh*fw)
        return flat.reshape((images.shape[0], 3, self.fh, self.fw))

    def params(self) -> list[Parameter]:
        return [
            self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]


def apply_dynamic_filter(images: Tensor, kernels: Tensor) -> Tensor:
    """Convolve each image with its own per-channel kernel.

    Zero padding keeps the spatial size; each output channel sees only
    the matching input channel. Linear in the image for fixed kernels
    and linear in the kernels for a fixed image.
    """
    if images.ndim != 4:
        raise DimensionError(f"expected images (B, C, H, W), got {images.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != images.shape[0] or kernels.shape[1] != images.shape[1]:
        raise DimensionError(
            f"kernels {kernels.shape} do not match images {images.shape} on batch/channels"
        )
    bsz, ch, h, w = images.shape
    kh, kw = kernels.shape[2], kernels.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"dynamic filter kernels must be odd-sized, got {kh}x{kw}")
    cols = unfold(images, kh, kw, stride=1, padding=(kh // 2, kw // 2))   # (B, H*W, C*kh*kw)
    cols = cols.reshape((bsz, h * w, ch, kh * kw))
    taps = kernels.reshape((bsz, 1, ch, kh * kw))
    mixed = (cols * taps).sum(axis=-1)                                    # (B, H*W, C)
    return transpose(mixed, (0, 2, 1)).reshape((bsz, ch, h, w))


def delta_kernels(bsz: int, ch: int, fh: int, fw: int) -> Tensor:
    """Identity kernels: convolution with these returns the input exactly."""
    k = np.zeros((bsz, ch, fh, fw))
    k[:, :, fh // 2, fw // 2] = 1.0
    return Tensor(k)
