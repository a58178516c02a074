"""Compact-enhanced transformer layer (CETL).

A CETL is two residual sublayers::

    u   = z + local_enhance(compact_attention(feature_sample(norm1(z))))
    out = u + ffn(norm2(u))

Compact attention works along the channel axis: the sampled feature is split
into two channel halves, each half attends over its own channels, and the
halves swap their value tensors before the attention-weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Conv, ConvTranspose, Module, Norm, avg_pool2d, upsample_nearest
from .tensor import (
    Tensor,
    concat_channels,
    matmul,
    relu,
    reshape,
    scale,
    slice_channels,
    softmax_rows,
    swap_last,
)


@dataclass(frozen=True)
class CetlConfig:
    channels: int
    sample_stride: int = 4
    heads_per_half: int = 1
    ffn_expansion: int = 2
    use_norm: bool = True
    use_feature_sampling: bool = True
    use_channel_split: bool = True
    use_local_enhancement: bool = True

    def __post_init__(self) -> None:
        c, h = self.channels, self.heads_per_half
        if c < 1 or h < 1 or self.sample_stride < 1 or self.ffn_expansion < 1:
            raise ConfigError(f"invalid CETL config {self}")
        if self.use_channel_split:
            if c % 2:
                raise ConfigError(f"channel split needs an even channel count, got {c}")
            if (c // 2) % h:
                raise ConfigError(f"{c // 2} channels per half not divisible by {h} heads")
        elif c % h:
            raise ConfigError(f"{c} channels not divisible by {h} heads")

    @property
    def stride(self) -> int:
        """Effective sampler stride (1 when feature sampling is ablated)."""
        return self.sample_stride if self.use_feature_sampling else 1


def feature_sample(z: Tensor, r: int) -> Tensor:
    return z if r == 1 else avg_pool2d(z, r)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Channel attention ``softmax(q k^T / sqrt(hw)) v`` on (N, c, h, w) maps.

    The c rows are partitioned into ``heads`` groups that attend independently.
    Returns an (N, c, h, w) tensor.
    """
    n, c, h, w = q.shape
    d, hw = c // heads, h * w
    qs = reshape(q, (n, heads, d, hw))
    ks = reshape(k, (n, heads, d, hw))
    vs = reshape(v, (n, heads, d, hw))
    logits = scale(matmul(qs, swap_last(ks)), 1.0 / math.sqrt(hw))
    return reshape(matmul(softmax_rows(logits), vs), (n, c, h, w))


class CompactAttention(Module):
    """Split-channel attention with exchanged values.

    With ``use_channel_split`` off this degrades to a single full-width
    channel attention without any exchange.
    """

    def __init__(self, rng, config: CetlConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        c = config.channels
        if config.use_channel_split:
            half = c // 2
            self.q1 = Conv(rng, half, half, dtype=dtype)
            self.k1 = Conv(rng, half, half, dtype=dtype)
            self.v1 = Conv(rng, half, half, dtype=dtype)
            self.q2 = Conv(rng, half, half, dtype=dtype)
            self.k2 = Conv(rng, half, half, dtype=dtype)
            self.v2 = Conv(rng, half, half, dtype=dtype)
        else:
            self.q = Conv(rng, c, c, dtype=dtype)
            self.k = Conv(rng, c, c, dtype=dtype)
            self.v = Conv(rng, c, c, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        heads = self.config.heads_per_half
        if not self.config.use_channel_split:
            return attend(self.q(z), self.k(z), self.v(z), heads)
        half = z.shape[1] // 2
        z1 = slice_channels(z, 0, half)
        z2 = slice_channels(z, half, 2 * half)
        v1, v2 = self.v1(z1), self.v2(z2)
        out1 = attend(self.q1(z1), self.k1(z1), v2, heads)
        out2 = attend(self.q2(z2), self.k2(z2), v1, heads)
        return concat_channels([out1, out2])


class LocalEnhance(Module):
    """Transposed conv (kernel = stride = r) followed by a 1x1 conv."""

    def __init__(self, rng, channels: int, r: int, dtype=np.float32):
        super().__init__()
        self.deconv = ConvTranspose(rng, channels, channels, kernel=r, stride=r, dtype=dtype)
        self.proj = Conv(rng, channels, channels, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        return self.proj(self.deconv(z))


class FeedForward(Module):
    def __init__(self, rng, channels: int, expansion: int = 2, dtype=np.float32):
        super().__init__()
        self.fc1 = Conv(rng, channels, channels * expansion, dtype=dtype)
        self.fc2 = Conv(rng, channels * expansion, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class CETL(Module):
    def __init__(self, rng, config: CetlConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        c = config.channels
        if config.use_norm:
            self.norm1 = Norm(c, dtype)
            self.norm2 = Norm(c, dtype)
        self.attn = CompactAttention(rng, config, dtype)
        if config.use_local_enhancement:
            self.enhance = LocalEnhance(rng, c, config.stride, dtype)
        self.ffn = FeedForward(rng, c, config.ffn_expansion, dtype)

    def forward(self, z: Tensor) -> Tensor:
        cfg = self.config
        r = cfg.stride
        h = self.norm1(z) if cfg.use_norm else z
        a = self.attn(feature_sample(h, r))
        if cfg.use_local_enhancement:
            a = self.enhance(a)
        elif r > 1:
            a = upsample_nearest(a, r)
        u = z + a
        return u + self.ffn(self.norm2(u) if cfg.use_norm else u)
