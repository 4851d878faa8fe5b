"""U-net style DIP architectures generated from a compact spec.

The search space is depth x width-mode x skip: depth counts the
downsampling levels, width is either uniform across levels or doubles per
level down to 512 feature maps at the deepest one, and skip links tap 4
channels from each encoder level into the matching decoder level through a
1x1 convolution. Weight initialization is fully determined by the spec seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH_RANGE = (4, 5, 6, 7, 8)
UNIFORM_WIDTHS = (16, 32, 64, 128, 256, 512)
WIDTH_MODES = ("uniform", "progressive512")
SKIP_CHANNELS = 4
NOISE_CHANNELS = 32


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: depth, width mode, skip flag and init seed."""

    depth: int
    width_mode: str = "uniform"
    width: int | None = None
    skip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.depth not in DEPTH_RANGE:
            raise ValueError(f"depth must be in {DEPTH_RANGE}, got {self.depth}")
        if self.width_mode not in WIDTH_MODES:
            raise ValueError(f"width_mode must be one of {WIDTH_MODES}, got {self.width_mode!r}")
        if self.width_mode == "uniform":
            if self.width not in UNIFORM_WIDTHS:
                raise ValueError(f"uniform width must be in {UNIFORM_WIDTHS}, got {self.width}")
        elif self.width is not None:
            raise ValueError("progressive512 specs must leave width unset")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def uniform(cls, depth: int, width: int, skip: bool = True, seed: int = 0) -> "NetworkSpec":
        return cls(depth=depth, width_mode="uniform", width=width, skip=skip, seed=seed)

    @classmethod
    def progressive(cls, depth: int, skip: bool = True, seed: int = 0) -> "NetworkSpec":
        return cls(depth=depth, width_mode="progressive512", width=None, skip=skip, seed=seed)

    def reseeded(self, seed: int) -> "NetworkSpec":
        return NetworkSpec(self.depth, self.width_mode, self.width, self.skip, seed)

    def short_name(self) -> str:
        width = "v512" if self.width_mode == "progressive512" else f"w{self.width}"
        return f"d{self.depth}-{width}-{'skip' if self.skip else 'noskip'}"


def level_widths(spec: NetworkSpec) -> list[int]:
    """Feature-map count per level, shallow to deep.

    Uniform mode repeats the configured width; progressive mode doubles per
    level, ``2**(9 - depth + j)`` for level ``j``, reaching 512 at the
    deepest one.
    """
    if spec.width_mode == "uniform":
        return [spec.width] * spec.depth
    return [2 ** (9 - spec.depth + j) for j in range(1, spec.depth + 1)]


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form learnable parameter count of :func:`build_network`.

    Kept independent of the torch module so tests can cross-check it against
    a brute-force sum over the constructed network's weight shapes.
    """
    widths = level_widths(spec)
    # conv kernel + bias, plus the affine batch-norm pair on every unit
    unit = lambda c_in, c_out, k: c_in * c_out * k * k + 3 * c_out
    total = 0
    c = NOISE_CHANNELS
    for w in widths:
        total += unit(c, w, 3) + unit(w, w, 3)
        c = w
    if spec.skip:
        total += sum(unit(w, SKIP_CHANNELS, 1) for w in widths)
    x_ch = widths[-1]
    for j in range(spec.depth - 1, -1, -1):
        c_in = x_ch + (SKIP_CHANNELS if spec.skip else 0)
        total += unit(c_in, widths[j], 3) + unit(widths[j], widths[j], 3)
        x_ch = widths[j]
    total += widths[0] * 1 + 1  # plain 1x1 output head
    return total


def _pad_reflect(x: torch.Tensor, pad: int = 1) -> torch.Tensor:
    # reflect padding requires dim > pad; 1px bottleneck maps fall back to replicate
    mode = "reflect" if x.shape[-1] > pad and x.shape[-2] > pad else "replicate"
    return F.pad(x, (pad, pad, pad, pad), mode=mode)


class _ConvUnit(nn.Module):
    """Reflection-padded convolution + batch norm, the repeated building block."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.pad = kernel // 2
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=0)
        self.norm = nn.BatchNorm2d(c_out)

    def forward(self, x):
        if self.pad:
            x = _pad_reflect(x, self.pad)
        return self.norm(self.conv(x))


class DipNetwork(nn.Module):
    """Symmetric encoder-decoder built from a :class:`NetworkSpec`.

    Encoder levels pair a stride-2 convolution with a stride-1 convolution;
    decoder levels bilinearly upsample and apply a pair of convolutions.
    All convolutions are 3x3 with reflection padding, batch norm and
    leaky-rectifier activations (slope 0.2); the head is a 1x1 convolution
    with a sigmoid, so outputs live in (0, 1) at the input's spatial size.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        widths = level_widths(spec)
        self.enc = nn.ModuleList()
        c = NOISE_CHANNELS
        for w in widths:
            self.enc.append(nn.ModuleList([_ConvUnit(c, w, stride=2), _ConvUnit(w, w)]))
            c = w
        self.taps = (
            nn.ModuleList([_ConvUnit(w, SKIP_CHANNELS, kernel=1) for w in widths])
            if spec.skip else None
        )
        self.dec = nn.ModuleList()
        x_ch = widths[-1]
        for j in range(spec.depth - 1, -1, -1):
            c_in = x_ch + (SKIP_CHANNELS if spec.skip else 0)
            self.dec.append(nn.ModuleList([_ConvUnit(c_in, widths[j]), _ConvUnit(widths[j], widths[j])]))
            x_ch = widths[j]
        self.head = nn.Conv2d(widths[0], 1, 1)
        self._init_weights(spec.seed)

    def _init_weights(self, seed: int):
        # torch's default conv init (uniform +-1/sqrt(fan_in) for weight and
        # bias) redrawn from a dedicated generator so no global RNG state is
        # touched and identical seeds give bit-identical weights
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                    m.bias.copy_((torch.rand(m.bias.shape, generator=gen) * 2 - 1) * bound)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] % 2**self.spec.depth or z.shape[-1] % 2**self.spec.depth:
            raise ValueError(
                f"input spatial size {tuple(z.shape[-2:])} must be divisible by "
                f"2**depth = {2**self.spec.depth}"
            )
        x = z
        feats = []
        for down, conv in self.enc:
            x = F.leaky_relu(down(x), 0.2)
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        for k, (conv1, conv2) in enumerate(self.dec):
            j = self.spec.depth - 1 - k
            if self.taps is not None:
                x = torch.cat([x, self.taps[j](feats[j])], dim=1)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.leaky_relu(conv1(x), 0.2)
            x = F.leaky_relu(conv2(x), 0.2)
        return torch.sigmoid(self.head(x))


def build_network(spec: NetworkSpec) -> DipNetwork:
    """Construct the network for a spec with seed-determined initial weights."""
    return DipNetwork(spec)
