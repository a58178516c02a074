"""Residual dense transformer layers and blocks.

An RDTB keeps a dense state that starts at the block input and grows by
``growth`` channels per RDTL::

    state_0 = x                         (C channels)
    state_k = [state_{k-1}, rdtl_k(state_{k-1})]   (C + k*G channels)
    out     = fuse(state_3) + x

Each RDTL narrows its input to C working channels with a 1x1 entry conv, runs
a stack of CETLs (each followed by ReLU), and projects to G channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cesa import CETL, CetlConfig
from .errors import ConfigError, ShapeError
from .nn import Conv, Module, ModuleList
from .tensor import Tensor, concat_channels, relu


@dataclass(frozen=True)
class RdtbConfig:
    channels: int
    growth: int = 16
    num_rdtl: int = 3
    cetls_per_rdtl: int = 2
    sample_stride: int = 4
    heads_per_half: int = 1
    ffn_expansion: int = 2
    use_norm: bool = True
    use_feature_sampling: bool = True
    use_channel_split: bool = True
    use_local_enhancement: bool = True
    use_dense: bool = True
    use_local_fusion: bool = True
    use_local_skip: bool = True

    def __post_init__(self) -> None:
        if self.growth < 1 or self.num_rdtl < 1 or self.cetls_per_rdtl < 1:
            raise ConfigError(f"invalid RDTB config {self}")

    def cetl_config(self) -> CetlConfig:
        return CetlConfig(
            channels=self.channels,
            sample_stride=self.sample_stride,
            heads_per_half=self.heads_per_half,
            ffn_expansion=self.ffn_expansion,
            use_norm=self.use_norm,
            use_feature_sampling=self.use_feature_sampling,
            use_channel_split=self.use_channel_split,
            use_local_enhancement=self.use_local_enhancement,
        )

    def rdtl_in_width(self, k: int) -> int:
        """Input width of RDTL ``k`` (0-based)."""
        if self.use_dense:
            return self.channels + k * self.growth
        return self.channels if k == 0 else self.growth


class RDTL(Module):
    def __init__(self, rng, in_width: int, config: RdtbConfig, dtype=np.float32):
        super().__init__()
        c = config.channels
        self.in_width = in_width
        self.entry = Conv(rng, in_width, c, dtype=dtype)
        self.cetls = ModuleList(CETL(rng, config.cetl_config(), dtype) for _ in range(config.cetls_per_rdtl))
        self.out = Conv(rng, c, config.growth, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_width:
            raise ShapeError(f"RDTL expects {self.in_width} input channels, got {x.shape[1]}")
        h = self.entry(x)
        for cetl in self.cetls:
            h = relu(cetl(h))
        return self.out(h)


class RDTB(Module):
    """One GridFormer layer.

    Ablations: without dense connections each RDTL reads only its
    predecessor's output; without local fusion the last RDTL output is
    projected G -> C instead of fusing the whole dense state.
    """

    def __init__(self, rng, config: RdtbConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.layers = ModuleList(RDTL(rng, config.rdtl_in_width(k), config, dtype) for k in range(config.num_rdtl))
        c, g = config.channels, config.growth
        fuse_in = c + config.num_rdtl * g if (config.use_dense and config.use_local_fusion) else g
        self.fuse = Conv(rng, fuse_in, c, bias=False, dtype=dtype)

    def forward(self, x: Tensor, widths: list | None = None) -> Tensor:
        cfg = self.config
        state = x
        out = x
        if widths is not None:
            widths.append(state.shape[1])
        for layer in self.layers:
            out = layer(state if cfg.use_dense else out)
            if cfg.use_dense:
                state = concat_channels([state, out])
                if widths is not None:
                    widths.append(state.shape[1])
        fused = self.fuse(state if (cfg.use_dense and cfg.use_local_fusion) else out)
        return fused + x if cfg.use_local_skip else fused
