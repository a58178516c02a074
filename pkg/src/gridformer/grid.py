"""GridFormer: grid head, grid fusion module and grid tail.

Row ``i`` carries features of width ``2**i * C`` at scale ``1/2**i``.  The
head embeds each pyramid level and adds the down-sampled features of the row
above; the fusion module is a sequence of columns that exchange information
between rows (top-down columns first, then an optional horizontal column, then
bottom-up columns); the tail maps every row back to an RGB residual that is
added to the corresponding input level.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import make_pyramid
from .errors import ConfigError, ContractError, ShapeError
from .nn import Conv, Module, ModuleList, pixel_shuffle, pixel_unshuffle
from .rdtb import RDTB, RdtbConfig
from .tensor import Parameter, Tensor, channel_mul, no_grad


@dataclass(frozen=True)
class GridConfig:
    rows: int = 3
    fusion_columns: int = 5
    base_channels: int = 48
    growth: int = 16
    sampler_strides: tuple[int, ...] = (4, 2, 2)
    num_rdtl: int = 3
    cetls_per_rdtl: int = 2
    heads_per_half: int = 1
    ffn_expansion: int = 2
    use_norm: bool = True
    use_feature_sampling: bool = True
    use_channel_split: bool = True
    use_local_enhancement: bool = True
    use_dense: bool = True
    use_local_fusion: bool = True
    use_local_skip: bool = True
    image_channels: int = 3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "sampler_strides", tuple(int(r) for r in self.sampler_strides))
        if self.rows < 1 or self.fusion_columns < 0 or self.base_channels < 1:
            raise ConfigError(f"invalid grid config {self}")
        if len(self.sampler_strides) != self.rows:
            raise ConfigError(
                f"sampler_strides has {len(self.sampler_strides)} entries for {self.rows} rows"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def width(self, row: int) -> int:
        return self.base_channels * 2**row

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    @property
    def pad_multiple(self) -> int:
        """Input extents must be a multiple of this for every row to tile."""
        m = 16
        for i, r in enumerate(self.sampler_strides):
            m = math.lcm(m, 2**i * (r if self.use_feature_sampling else 1))
        return m

    def rdtb_config(self, row: int) -> RdtbConfig:
        return RdtbConfig(
            channels=self.width(row),
            growth=self.growth,
            num_rdtl=self.num_rdtl,
            cetls_per_rdtl=self.cetls_per_rdtl,
            sample_stride=self.sampler_strides[row],
            heads_per_half=self.heads_per_half,
            ffn_expansion=self.ffn_expansion,
            use_norm=self.use_norm,
            use_feature_sampling=self.use_feature_sampling,
            use_channel_split=self.use_channel_split,
            use_local_enhancement=self.use_local_enhancement,
            use_dense=self.use_dense,
            use_local_fusion=self.use_local_fusion,
            use_local_skip=self.use_local_skip,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "GridConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def column_directions(n: int) -> list[str]:
    """Fusion-column flow pattern, e.g. 5 -> down, down, plain, up, up."""
    return ["down"] * (n // 2) + ["plain"] * (n % 2) + ["up"] * (n // 2)


class Downsample(Module):
    """Pixel-unshuffle (x2) then 3x3 conv 4C' -> 2C'."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        super().__init__()
        self.conv = Conv(rng, 4 * channels, 2 * channels, kernel=3, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"downsample needs even extents, got {x.shape}")
        return self.conv(pixel_unshuffle(x, 2))


class Upsample(Module):
    """3x3 conv 2C' -> 4C' then pixel-shuffle (x2) to C'; ``channels`` is 2C'."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        super().__init__()
        self.conv = Conv(rng, channels, 2 * channels, kernel=3, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(self.conv(x), 2)


class WeightedFusion(Module):
    """``w1 * a + w2 * b`` with trainable per-channel weights (init 0.5)."""

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.w1 = Parameter(np.full(channels, 0.5, dtype))
        self.w2 = Parameter(np.full(channels, 0.5, dtype))

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return channel_mul(a, self.w1) + channel_mul(b, self.w2)


class GridHead(Module):
    def __init__(self, rng, cfg: GridConfig, dtype=np.float32):
        super().__init__()
        self.embed = ModuleList(
            Conv(rng, cfg.image_channels, cfg.width(i), kernel=3, dtype=dtype) for i in range(cfg.rows)
        )
        self.gfl = ModuleList(RDTB(rng, cfg.rdtb_config(i), dtype) for i in range(cfg.rows))
        self.down = ModuleList(Downsample(rng, cfg.width(i), dtype) for i in range(cfg.rows - 1))

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        feats: list[Tensor] = []
        for i, x in enumerate(pyramid):
            f = self.gfl[i](self.embed[i](x))
            if i > 0:
                f = f + self.down[i - 1](feats[-1])
            feats.append(f)
        return feats


class FusionColumn(Module):
    def __init__(self, rng, cfg: GridConfig, direction: str, dtype=np.float32):
        super().__init__()
        self.direction = direction
        self.gfl = ModuleList(RDTB(rng, cfg.rdtb_config(i), dtype) for i in range(cfg.rows))
        if direction == "down":
            # trans[i] carries row i -> row i+1; fuse[i] merges into row i+1
            self.trans = ModuleList(Downsample(rng, cfg.width(i), dtype) for i in range(cfg.rows - 1))
            self.fuse = ModuleList(WeightedFusion(cfg.width(i + 1), dtype) for i in range(cfg.rows - 1))
        elif direction == "up":
            # trans[i] carries row i+1 -> row i; fuse[i] merges into row i
            self.trans = ModuleList(Upsample(rng, cfg.width(i + 1), dtype) for i in range(cfg.rows - 1))
            self.fuse = ModuleList(WeightedFusion(cfg.width(i), dtype) for i in range(cfg.rows - 1))
        elif direction != "plain":
            raise ConfigError(f"unknown fusion direction {direction!r}")

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        rows = len(feats)
        out: list[Tensor | None] = [None] * rows
        if self.direction == "up":
            for i in reversed(range(rows)):
                h = self.gfl[i](feats[i])
                if i < rows - 1:
                    h = self.fuse[i](h, self.trans[i](out[i + 1]))
                out[i] = h
        else:
            for i in range(rows):
                h = self.gfl[i](feats[i])
                if self.direction == "down" and i > 0:
                    h = self.fuse[i - 1](h, self.trans[i - 1](out[i - 1]))
                out[i] = h
        return out


class GridFusion(Module):
    def __init__(self, rng, cfg: GridConfig, dtype=np.float32):
        super().__init__()
        self.columns = ModuleList(
            FusionColumn(rng, cfg, d, dtype) for d in column_directions(cfg.fusion_columns)
        )

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        for col in self.columns:
            feats = col(feats)
        return feats


class GridTail(Module):
    def __init__(self, rng, cfg: GridConfig, dtype=np.float32):
        super().__init__()
        self.gfl = ModuleList(RDTB(rng, cfg.rdtb_config(i), dtype) for i in range(cfg.rows))
        self.conv = ModuleList(
            Conv(rng, cfg.width(i), cfg.image_channels, kernel=3, dtype=dtype) for i in range(cfg.rows)
        )

    def forward(self, feats: list[Tensor], pyramid: list[Tensor]) -> list[Tensor]:
        return [self.conv[i](self.gfl[i](f)) + x for i, (f, x) in enumerate(zip(feats, pyramid))]


class GridFormer(Module):
    def __init__(self, config: GridConfig | None = None):
        super().__init__()
        cfg = config or GridConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.np_dtype
        self.head = GridHead(rng, cfg, dtype)
        self.fusion = GridFusion(rng, cfg, dtype)
        self.tail = GridTail(rng, cfg, dtype)
        self.assign_paths()

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        self.check_pyramid(pyramid)
        return self.tail(self.fusion(self.head(pyramid)), pyramid)

    def check_pyramid(self, pyramid: list[Tensor]) -> None:
        cfg = self.config
        if len(pyramid) != cfg.rows:
            raise ContractError(f"expected a {cfg.rows}-level pyramid, got {len(pyramid)} levels")
        n, c, h, w = pyramid[0].shape
        if c != cfg.image_channels:
            raise ContractError(f"expected {cfg.image_channels}-channel images, got {c}")
        m = cfg.pad_multiple
        if h % m or w % m:
            raise ContractError(f"input extents {h}x{w} are not multiples of {m}; pad first")
        for i, x in enumerate(pyramid):
            want = (n, c, h >> i, w >> i)
            if x.shape != want:
                raise ContractError(f"pyramid level {i} has shape {x.shape}, expected {want}")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def restore_pyramid(self, image: np.ndarray) -> list[np.ndarray]:
        """Restore an (N,3,H,W) or (3,H,W) image of any extents.

        The image is reflect-padded to a tileable size, restored, and every
        output level is cropped back to ``ceil(extent / 2**level)``.
        """
        arr = np.asarray(image, dtype=self.config.np_dtype)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        h, w = arr.shape[2:]
        m = self.config.pad_multiple
        ph, pw = -h % m, -w % m
        if ph or pw:
            arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        levels = make_pyramid(arr, self.config.rows)
        with no_grad():
            out = self.forward([Tensor(x) for x in levels])
        cropped = []
        for i, t in enumerate(out):
            hi, wi = -(-h // 2**i), -(-w // 2**i)
            y = t.data[:, :, :hi, :wi]
            cropped.append(y[0] if single else y)
        return cropped

    def restore(self, image: np.ndarray) -> np.ndarray:
        return self.restore_pyramid(image)[0]
