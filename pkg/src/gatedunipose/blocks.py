"""Architectural building blocks.

Gated convolution, the strided embedding used for the stem and stage
downsampling, the dilated re-parameterisable large-kernel mixer, squeeze-excite,
the offset-driven upsampler and the composite backbone block.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import InvalidSpecError, ShapeError, StateError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import ConvSpec, Tensor

# (kernel, dilation) pairs trained alongside a K x K main kernel.
DEFAULT_BRANCHES = {
    7: ((5, 1), (3, 2), (3, 3)),
    9: ((5, 1), (3, 2), (3, 3), (3, 4)),
    11: ((5, 1), (5, 2), (3, 3), (3, 4), (3, 5)),
    13: ((5, 1), (7, 2), (3, 3), (3, 4), (3, 5)),
}

FFN_EXPANSION = 4


def default_branches(kernel_size: int):
    if kernel_size in DEFAULT_BRANCHES:
        return DEFAULT_BRANCHES[kernel_size]
    if kernel_size >= 7 and kernel_size % 2:
        return DEFAULT_BRANCHES[7]
    raise InvalidSpecError(f"no default branch set for kernel size {kernel_size}")


class GatedConv(Module):
    """sigmoid(gate(x)) * value(x) with both branches sharing one ConvSpec."""

    def __init__(self, spec: ConvSpec):
        self.spec = spec
        self.gate = Conv2d(spec)
        self.value = Conv2d(spec)
        if self.gate.bias is not None:
            self.gate.bias.init = ("const", 0.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"gated conv expects {self.spec.in_channels} input channels, got {x.shape}")
        return T.sigmoid(self.gate(x)) * self.value(x)


def gconv_forward(layer: GatedConv, x: Tensor) -> Tensor:
    return layer(x)


def dilated_to_dense(weight: np.ndarray, dilation: int) -> np.ndarray:
    """Spread a k x k kernel onto the ((k-1)*r+1)^2 grid it touches when dilated by r."""
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 == 0:
        raise InvalidSpecError(f"dilated kernels must be square and odd, got {weight.shape[-2:]}")
    if dilation < 1:
        raise InvalidSpecError(f"dilation must be >= 1, got {dilation}")
    if dilation == 1:
        return weight.copy()
    extent = (k - 1) * dilation + 1
    dense = np.zeros(weight.shape[:-2] + (extent, extent), dtype=weight.dtype)
    dense[..., ::dilation, ::dilation] = weight
    return dense


def _depthwise(channels, kernel, dilation=1, bias=False):
    return ConvSpec(channels, channels, kernel, 1, dilation * (kernel - 1) // 2, dilation,
                    groups=channels, has_bias=bias)


class DilatedReparamBranch(Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int):
        if kernel_size % 2 == 0:
            raise InvalidSpecError(f"branch kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.conv = Conv2d(_depthwise(channels, kernel_size, dilation))
        self.norm = BatchNorm2d(channels)

    @property
    def extent(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    def forward(self, x):
        return self.norm(self.conv(x))


class DilatedReparamBlock(Module):
    """Large depthwise kernel plus parallel dilated small kernels.

    After :meth:`merge` the block is a single K x K depthwise conv with bias
    whose eval-mode output matches the multi-branch form.
    """

    def __init__(self, channels: int, kernel_size: int, branches=None):
        if kernel_size < 7 or kernel_size % 2 == 0:
            raise InvalidSpecError(f"main kernel must be odd and >= 7, got {kernel_size}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.deployed = False
        self.main = Conv2d(_depthwise(channels, kernel_size))
        self.main_norm = BatchNorm2d(channels)
        if branches is None:
            branches = default_branches(kernel_size)
        self.branches = [DilatedReparamBranch(channels, k, r) for k, r in branches]
        for b in self.branches:
            if b.extent > kernel_size:
                raise InvalidSpecError(
                    f"branch (k={b.kernel_size}, r={b.dilation}) spans {b.extent} > main kernel {kernel_size}")
        self.merged = None

    def forward(self, x):
        if self.deployed:
            return self.merged(x)
        out = self.main_norm(self.main(x))
        for branch in self.branches:
            out = out + branch(x)
        return out

    def merged_kernel(self):
        """Folded (weight, bias) of the equivalent single depthwise conv, in float64."""
        K = self.kernel_size
        scale, shift = self.main_norm.folded()
        weight = self.main.weight.data.astype(np.float64) * scale[:, None, None, None]
        bias = shift.copy()
        for b in self.branches:
            s, t = b.norm.folded()
            dense = dilated_to_dense(b.conv.weight.data.astype(np.float64) * s[:, None, None, None], b.dilation)
            pad = (K - dense.shape[-1]) // 2
            weight += np.pad(dense, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            bias += t
        return weight, bias

    def merge(self):
        if self.deployed:
            raise StateError("block is already deployed")
        weight, bias = self.merged_kernel()
        dtype = self.main.weight.dtype
        merged = Conv2d(_depthwise(self.channels, self.kernel_size, bias=True))
        merged.weight.data = weight.astype(dtype)
        merged.bias.data = bias.astype(dtype)
        self.merged = merged
        self.main = None
        self.main_norm = None
        self.branches = []
        self.deployed = True
        return self


def merge_reparam(block: DilatedReparamBlock) -> DilatedReparamBlock:
    return block.merge()


class DepthwiseMixer(Module):
    """Plain depthwise conv + norm, used for kernels smaller than 7."""

    def __init__(self, channels: int, kernel_size: int):
        if kernel_size % 2 == 0:
            raise InvalidSpecError(f"kernel size must be odd, got {kernel_size}")
        self.conv = Conv2d(_depthwise(channels, kernel_size))
        self.norm = BatchNorm2d(channels)

    def forward(self, x):
        return self.norm(self.conv(x))


class SqueezeExcite(Module):
    def __init__(self, channels: int, ratio: int = 4):
        hidden = max(1, channels // ratio)
        self.ratio = ratio
        self.reduce = Linear(channels, hidden)
        self.expand = Linear(hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        s = T.gelu(self.reduce(T.global_avg_pool(x)))
        return T.channel_scale(x, T.sigmoid(self.expand(s)))


def se_forward(se: SqueezeExcite, x: Tensor) -> Tensor:
    return se(x)


class DySampleUpsampler(Module):
    """Upsample by perturbing the regular output grid with learned offsets.

    A 1x1 conv predicts 2*s^2 offset channels per input pixel (one (dx, dy)
    pair for every output pixel it spawns). Offsets are in input-pixel units,
    scaled by ``offset_range`` and clamped to +/- ``offset_range * s``. The
    generator starts at zero so the layer begins as plain bilinear upsampling.
    """

    def __init__(self, channels: int, scale: int, offset_range: float = 0.25):
        if scale < 2:
            raise InvalidSpecError(f"upsampling scale must be >= 2, got {scale}")
        self.channels = channels
        self.scale = scale
        self.offset_range = offset_range
        self.offset = Conv2d(ConvSpec(channels, 2 * scale * scale, 1), zero_init=True)

    def offsets(self, x: Tensor) -> Tensor:
        """[N, 2, H*s, W*s] offsets in input pixels."""
        n, _, h, w = x.shape
        s = self.scale
        raw = T.scale(self.offset(x), self.offset_range)
        bound = self.offset_range * s
        raw = T.clip(raw, -bound, bound)
        raw = raw.reshape(n, 2, s, s, h, w).permute(0, 1, 4, 2, 5, 3)
        return raw.reshape(n, 2, h * s, w * s)

    def base_grid(self, n: int, h: int, w: int) -> Tensor:
        s = self.scale
        gx = (np.arange(w * s) + 0.5) / s - 0.5
        gy = (np.arange(h * s) + 0.5) / s - 0.5
        grid = np.stack(np.broadcast_arrays(gx[None, :], gy[:, None]))
        return Tensor(np.broadcast_to(grid, (n, 2, h * s, w * s)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"upsampler expects {self.channels} channels, got {x.shape}")
        n, _, h, w = x.shape
        coords = self.base_grid(n, h, w) + self.offsets(x)
        return T.grid_sample_bilinear(x, coords)


def dysample_forward(up: DySampleUpsampler, x: Tensor) -> Tensor:
    return up(x)


class GlaceUnit(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        self.conv = Conv2d(ConvSpec(in_channels, out_channels, 3, stride, 1, has_bias=False))
        self.norm = BatchNorm2d(out_channels)

    def forward(self, x):
        return T.gelu(self.norm(self.conv(x)))


class GlaceEmbed(Module):
    """Strided 3x3 conv/BN/GELU stack.

    As a stem it runs in -> out/2 -> out with log2(total_stride) stride-2 units
    (plus one stride-1 unit when a single halving is requested). As a stage
    downsampler it is one stride-2 unit.
    """

    def __init__(self, in_channels: int, out_channels: int, total_stride: int = 2, stem: bool = True):
        n_halvings = int(np.log2(total_stride)) if total_stride >= 1 else -1
        if total_stride < 2 or 2 ** n_halvings != total_stride:
            raise InvalidSpecError(f"total_stride must be a power of two >= 2, got {total_stride}")
        if not stem and total_stride != 2:
            raise InvalidSpecError("downsampling embeds halve resolution exactly once")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.total_stride = total_stride
        if stem:
            n_units = max(n_halvings, 2)
            widths = [max(1, out_channels // 2)] + [out_channels] * (n_units - 1)
            strides = [2 if i < n_halvings else 1 for i in range(n_units)]
        else:
            widths, strides = [out_channels], [2]
        units, c_in = [], in_channels
        for c_out, stride in zip(widths, strides):
            units.append(GlaceUnit(c_in, c_out, stride))
            c_in = c_out
        self.units = units

    def forward(self, x: Tensor) -> Tensor:
        _check_divisible(x, self.total_stride)
        for unit in self.units:
            x = unit(x)
        return x


def glace_forward(embed: GlaceEmbed, image: Tensor) -> Tensor:
    return embed(image)


class PlainDownsample(Module):
    """Non-overlapping stride-s patch conv + norm (the embedding ablation)."""

    def __init__(self, in_channels: int, out_channels: int, total_stride: int = 2):
        self.total_stride = total_stride
        self.conv = Conv2d(ConvSpec(in_channels, out_channels, total_stride, total_stride, 0, has_bias=False))
        self.norm = BatchNorm2d(out_channels)

    def forward(self, x):
        _check_divisible(x, self.total_stride)
        return self.norm(self.conv(x))


def _check_divisible(x: Tensor, stride: int):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if h % stride or w % stride:
        raise ShapeError(f"input extents {h}x{w} are not divisible by stride {stride}")


class GatedFFN(Module):
    def __init__(self, channels: int, expansion: int = FFN_EXPANSION):
        hidden = channels * expansion
        self.gconv = GatedConv(ConvSpec(channels, hidden, 1))
        self.proj = Conv2d(ConvSpec(hidden, channels, 1))

    def forward(self, x):
        return self.proj(self.gconv(x))


class ConvFFN(Module):
    def __init__(self, channels: int, expansion: int = FFN_EXPANSION):
        hidden = channels * expansion
        self.expand = Conv2d(ConvSpec(channels, hidden, 1))
        self.proj = Conv2d(ConvSpec(hidden, channels, 1))

    def forward(self, x):
        return self.proj(T.gelu(self.expand(x)))


class GatedUniPoseBlock(Module):
    """x + SE(mixer(x)), then + FFN(norm(x)); shape preserving."""

    def __init__(self, channels: int, kernel_size: int, use_gconv: bool = True, se_ratio: int = 4):
        self.channels = channels
        self.kernel_size = kernel_size
        if kernel_size >= 7:
            self.mixer = DilatedReparamBlock(channels, kernel_size)
        else:
            self.mixer = DepthwiseMixer(channels, kernel_size)
        self.se = SqueezeExcite(channels, se_ratio)
        self.norm = BatchNorm2d(channels)
        self.ffn = GatedFFN(channels) if use_gconv else ConvFFN(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"block expects {self.channels} channels, got {x.shape}")
        x = x + self.se(self.mixer(x))
        return x + self.ffn(self.norm(x))


def block_forward(b: GatedUniPoseBlock, x: Tensor) -> Tensor:
    return b(x)
