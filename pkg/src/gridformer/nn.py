"""Convolution, pooling, pixel (un)shuffle, layer norm and the Module base.

Convolutions use an im2col layout of ``(N, Cin*k*k, H'*W')`` so that the
forward pass is a single batched matmul against the flattened weight and no
output transposes are needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Op, Parameter, Tensor, apply, module_scope, register

LN_EPS = 1e-5


def conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv spec {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_extent(self, n: int) -> int:
        return conv_out_extent(n, self.kernel, self.stride, self.padding)


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = conv_out_extent(h, k, s, p), conv_out_extent(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple, k: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return out


def _check_conv(x, w, stride, padding):
    if len(x) != 4:
        raise ShapeError(f"conv2d expects N,C,H,W input, got {x}")
    cout, cin, k, k2 = w
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {w}")
    if x[1] != cin:
        raise ShapeError(f"conv2d: input channels {x[1]} do not match weight {w}")
    ho, wo = conv_out_extent(x[2], k, stride, padding), conv_out_extent(x[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent for input {x} and kernel {k}")
    return (x[0], cout, ho, wo)


@register
class Conv2d(Op):
    kind = "conv2d"

    @staticmethod
    def shape(x, w, b=None, stride=1, padding=0):
        return _check_conv(x, w, stride, padding)

    @staticmethod
    def forward(x, w, b=None, stride=1, padding=0):
        _check_conv(x.shape, w.shape, stride, padding)
        n = x.shape[0]
        cout, cin, k, _ = w.shape
        wm = w.reshape(cout, -1)
        if k == 1 and stride == 1 and padding == 0:
            ho, wo = x.shape[2], x.shape[3]
            cols = x.reshape(n, cin, ho * wo)
        else:
            cols, ho, wo = _im2col(x, k, stride, padding)
        out = np.matmul(wm, cols)
        if b is not None:
            out += b[None, :, None]
        return out.reshape(n, cout, ho, wo), (x.shape, w, cols)

    @staticmethod
    def backward(saved, g, needs, stride=1, padding=0):
        xshape, w, cols = saved
        n, cout, ho, wo = g.shape
        k = w.shape[2]
        gm = g.reshape(n, cout, ho * wo)
        dx = dw = db = None
        if needs[0]:
            dcols = np.matmul(w.reshape(cout, -1).T, gm)
            if k == 1 and stride == 1 and padding == 0:
                dx = dcols.reshape(xshape)
            else:
                dx = _col2im(dcols, xshape, k, stride, padding, ho, wo)
        if needs[1]:
            dw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            db = gm.sum(axis=(0, 2))
        return dx, dw, db

    @staticmethod
    def macs(x, w, b=None, stride=1, padding=0):
        n, cout, ho, wo = _check_conv(x, w, stride, padding)
        return n * cout * w[1] * w[2] * w[3] * ho * wo


def _check_deconv(y, w, stride, padding, output_padding=0):
    if len(y) != 4:
        raise ShapeError(f"conv_transpose2d expects N,C,H,W input, got {y}")
    cin, cout, k, k2 = w
    if k != k2 or y[1] != cin:
        raise ShapeError(f"conv_transpose2d: input {y} does not match weight {w}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must be in [0, {stride})")
    ho = (y[2] - 1) * stride - 2 * padding + k + output_padding
    wo = (y[3] - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output extent for {y}")
    return (y[0], cout, ho, wo)


@register
class ConvTranspose2d(Op):
    """Adjoint of :class:`Conv2d`; weight is laid out (Cin, Cout, k, k)."""

    kind = "conv_transpose2d"

    @staticmethod
    def shape(y, w, b=None, stride=1, padding=0, output_padding=0):
        return _check_deconv(y, w, stride, padding, output_padding)

    @staticmethod
    def forward(y, w, b=None, stride=1, padding=0, output_padding=0):
        n, cout, ho, wo = _check_deconv(y.shape, w.shape, stride, padding, output_padding)
        cin, _, k, _ = w.shape
        h, wd = y.shape[2], y.shape[3]
        ym = y.reshape(n, cin, h * wd)
        cols = np.matmul(w.reshape(cin, -1).T, ym)
        if k == stride and padding == 0 and output_padding == 0:
            out = cols.reshape(n, cout, k, k, h, wd).transpose(0, 1, 4, 2, 5, 3).reshape(n, cout, ho, wo)
        else:
            out = _col2im(cols, (n, cout, ho, wo), k, stride, padding, h, wd)
        if b is not None:
            out = out + b[None, :, None, None]
        return out, (ym, w)

    @staticmethod
    def backward(saved, g, needs, stride=1, padding=0, output_padding=0):
        ym, w = saved
        cin, cout, k, _ = w.shape
        n, _, hw = ym.shape
        cols, h, wd = _im2col(g, k, stride, padding)
        dy = dw = db = None
        if needs[0]:
            dy = np.matmul(w.reshape(cin, -1), cols).reshape(n, cin, h, wd)
        if needs[1]:
            dw = np.tensordot(ym, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        return dy, dw, db

    @staticmethod
    def macs(y, w, b=None, stride=1, padding=0, output_padding=0):
        _check_deconv(y, w, stride, padding, output_padding)
        return y[0] * y[1] * y[2] * y[3] * w[1] * w[2] * w[3]


def _check_divisible(name, x, r):
    if len(x) != 4 or x[2] % r or x[3] % r:
        raise ShapeError(f"{name}: extents of {x} are not divisible by {r}")


@register
class AvgPool2d(Op):
    kind = "avg_pool2d"

    @staticmethod
    def shape(x, r):
        _check_divisible("avg_pool2d", x, r)
        return (x[0], x[1], x[2] // r, x[3] // r)

    @staticmethod
    def forward(x, r):
        n, c, h, w = AvgPool2d.shape(x.shape, r)
        return x.reshape(n, c, h, r, w, r).mean(axis=(3, 5)), x.shape

    @staticmethod
    def backward(xshape, g, needs, r):
        n, c, h, w = g.shape
        gr = g * g.dtype.type(1.0 / (r * r))
        return (np.broadcast_to(gr[:, :, :, None, :, None], (n, c, h, r, w, r)).reshape(xshape),)


@register
class UpsampleNearest(Op):
    kind = "upsample_nearest"

    @staticmethod
    def shape(x, r):
        return (x[0], x[1], x[2] * r, x[3] * r)

    @staticmethod
    def forward(x, r):
        n, c, h, w = x.shape
        out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, r, w, r)).reshape(n, c, h * r, w * r)
        return out, None

    @staticmethod
    def backward(saved, g, needs, r):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // r, r, w // r, r).sum(axis=(3, 5)),)


@register
class PixelUnshuffle(Op):
    """(N,C,H,W) -> (N,C*r*r,H/r,W/r); channel index c*r*r + dy*r + dx."""

    kind = "pixel_unshuffle"

    @staticmethod
    def shape(x, r):
        _check_divisible("pixel_unshuffle", x, r)
        return (x[0], x[1] * r * r, x[2] // r, x[3] // r)

    @staticmethod
    def forward(x, r):
        n, c, h, w = x.shape
        PixelUnshuffle.shape(x.shape, r)
        out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
        return out.reshape(n, c * r * r, h // r, w // r), None

    @staticmethod
    def backward(saved, g, needs, r):
        return (PixelShuffle.forward(g, r)[0],)


@register
class PixelShuffle(Op):
    kind = "pixel_shuffle"

    @staticmethod
    def shape(x, r):
        if len(x) != 4 or x[1] % (r * r):
            raise ShapeError(f"pixel_shuffle: channels of {x} not divisible by {r * r}")
        return (x[0], x[1] // (r * r), x[2] * r, x[3] * r)

    @staticmethod
    def forward(x, r):
        n, c, h, w = PixelShuffle.shape(x.shape, r)
        out = x.reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3)
        return out.reshape(n, c, h, w), None

    @staticmethod
    def backward(saved, g, needs, r):
        return (PixelUnshuffle.forward(g, r)[0],)


@register
class LayerNorm(Op):
    """Normalize over channels at every spatial position, then scale/shift."""

    kind = "layer_norm"

    @staticmethod
    def shape(x, gain, offset, eps=LN_EPS):
        if gain != (x[1],) or offset != (x[1],):
            raise ShapeError(f"layer_norm: affine shapes {gain}/{offset} do not match {x}")
        return x

    @staticmethod
    def forward(x, gain, offset, eps=LN_EPS):
        LayerNorm.shape(x.shape, gain.shape, offset.shape)
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        out = xhat * gain[None, :, None, None] + offset[None, :, None, None]
        return out, (xhat, inv, gain)

    @staticmethod
    def backward(saved, g, needs, eps=LN_EPS):
        xhat, inv, gain = saved
        dx = dgain = doffset = None
        if needs[0]:
            dxhat = g * gain[None, :, None, None]
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        if needs[1]:
            dgain = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            doffset = g.sum(axis=(0, 2, 3))
        return dx, dgain, doffset


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    args = (x, weight) if bias is None else (x, weight, bias)
    return apply(Conv2d, *args, stride=stride, padding=padding)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    args = (x, weight) if bias is None else (x, weight, bias)
    return apply(ConvTranspose2d, *args, stride=stride, padding=padding, output_padding=output_padding)


def avg_pool2d(x: Tensor, r: int) -> Tensor:
    return apply(AvgPool2d, x, r=int(r))


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    return apply(UpsampleNearest, x, r=int(r))


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    return apply(PixelUnshuffle, x, r=int(r))


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    return apply(PixelShuffle, x, r=int(r))


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LN_EPS) -> Tensor:
    return apply(LayerNorm, x, gain, offset, eps=eps)


# ---------------------------------------------------------------------- modules


class Module:
    """Container that registers Parameter and Module attributes by name."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_path", "")

    def __setattr__(self, name, value) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        with module_scope(self._path):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mpath, m in self.named_modules(prefix):
            for name, p in m._params.items():
                yield (f"{mpath}.{name}" if mpath else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_paths(self) -> None:
        """Stamp module scopes and parameter paths; rejects shared parameters."""
        seen: dict[int, str] = {}
        for mpath, m in self.named_modules():
            object.__setattr__(m, "_path", mpath)
        for path, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter registered twice: {seen[id(p)]} and {path}")
            seen[id(p)] = path
            p.path = path

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Module):
    """k x k convolution with zero padding; ``padding=None`` keeps extents."""

    def __init__(self, rng, cin, cout, kernel=1, stride=1, padding=None, bias=True, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = kernel // 2
        self.spec = ConvSpec(cin, cout, kernel, stride, padding, bias)
        self.weight = Parameter(uniform_init(rng, self.spec.weight_shape, cin * kernel * kernel, dtype))
        self.bias = Parameter(np.zeros(cout, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class ConvTranspose(Module):
    def __init__(self, rng, cin, cout, kernel, stride, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        # each output pixel sees cin * ceil(k/s)^2 inputs
        fan_in = cin * math.ceil(kernel / stride) ** 2
        self.weight = Parameter(uniform_init(rng, (cin, cout, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(cout, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Norm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gain = Parameter(np.ones(channels, dtype))
        self.offset = Parameter(np.zeros(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset)
