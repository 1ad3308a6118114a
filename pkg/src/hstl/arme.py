"""Region-wise 3D convolution (adaptive region-based motion extractor).

Feature maps are batched tensors shaped ``(B, C, T, H, W)``. A partition level
cuts the rows into contiguous bands; each band goes through its own conv stack
with zero same-padding, so no information crosses a band boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from hstl.errors import ShapeError
from hstl.gradcheck import max_relative_error
from hstl.hierarchy import PartitionLevel

# per region: list of (kernel, bias) per conv layer
RegionWeights = Sequence[Sequence[tuple[torch.Tensor, torch.Tensor]]]


@dataclass(frozen=True)
class RegionConvSpec:
    """Channel chain of one conv stack, e.g. ``(32, 32, 64)`` is two convs 32->32->64."""

    channels: tuple[int, ...]
    kernel: tuple[int, int, int] = (3, 3, 3)
    negative_slope: float = 0.01
    norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if len(self.channels) < 2:
            raise ShapeError(f"channel chain needs at least in and out, got {self.channels}")
        if any(k % 2 == 0 for k in self.kernel):
            raise ShapeError(f"kernel dims must be odd for same padding, got {self.kernel}")

    @property
    def in_channels(self) -> int:
        return self.channels[0]

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def conv_layers_per_region(self) -> int:
        return len(self.channels) - 1

    @property
    def padding(self) -> tuple[int, int, int]:
        return tuple(k // 2 for k in self.kernel)


def split_regions(x: torch.Tensor, level: PartitionLevel) -> list[torch.Tensor]:
    """Cut ``x`` along rows into the level's bands (views, top to bottom)."""
    return list(torch.split(x, level.region_heights(x.shape[-2]), dim=-2))


def activate(x: torch.Tensor, negative_slope: float) -> torch.Tensor:
    if negative_slope == 1.0:
        return x
    return F.leaky_relu(x, negative_slope)


def arme_forward(x: torch.Tensor, level: PartitionLevel, spec: RegionConvSpec,
                 weights: RegionWeights) -> torch.Tensor:
    """Apply one independent conv stack per region and re-stack the rows."""
    if x.dim() != 5:
        raise ShapeError(f"expected (B, C, T, H, W), got {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if len(weights) != level.num_groups:
        raise ShapeError(f"{len(weights)} weight sets for {level.num_groups} regions")
    outs = []
    for region, layers in zip(split_regions(x, level), weights):
        if len(layers) != spec.conv_layers_per_region:
            raise ShapeError(f"expected {spec.conv_layers_per_region} conv layers per region, got {len(layers)}")
        y = region
        for kernel, bias in layers:
            y = activate(F.conv3d(y, kernel, bias, padding=spec.padding), spec.negative_slope)
        outs.append(y)
    return torch.cat(outs, dim=-2)


class ARME(nn.Module):
    """Independent conv stacks for the regions of one partition level."""

    def __init__(self, level: PartitionLevel, spec: RegionConvSpec):
        super().__init__()
        self.level = level
        self.spec = spec
        self.regions = nn.ModuleList()
        for _ in level.groups:
            convs = nn.ModuleDict()
            for n, (cin, cout) in enumerate(zip(spec.channels, spec.channels[1:]), start=1):
                convs[f"conv{n}"] = nn.Conv3d(cin, cout, spec.kernel, padding=spec.padding)
                if spec.norm:
                    convs[f"norm{n}"] = nn.BatchNorm3d(cout)
            self.regions.append(convs)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, a=self.spec.negative_slope, mode="fan_in",
                                        nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def region_weights(self) -> list[list[tuple[torch.Tensor, torch.Tensor]]]:
        return [[(convs[f"conv{n}"].weight, convs[f"conv{n}"].bias)
                 for n in range(1, self.spec.conv_layers_per_region + 1)] for convs in self.regions]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.spec.norm:
            return arme_forward(x, self.level, self.spec, self.region_weights())
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, spec expects {self.spec.in_channels}")
        outs = []
        for region, convs in zip(split_regions(x, self.level), self.regions):
            y = region
            for n in range(1, self.spec.conv_layers_per_region + 1):
                y = convs[f"norm{n}"](convs[f"conv{n}"](y))
                y = activate(y, self.spec.negative_slope)
            outs.append(y)
        return torch.cat(outs, dim=-2)


def arme_backward_check(spec: RegionConvSpec, level: PartitionLevel, *, batch: int = 1, frames: int = 4,
                        height: int | None = None, width: int = 4, h: float = 1e-3, seed: int = 0,
                        zero_point: bool = False) -> float:
    """Max relative error between autograd and finite-difference gradients.

    Checks the input and every kernel/bias of a freshly drawn region stack in
    float64 against a random linear functional of the output.
    """
    gen = torch.Generator().manual_seed(seed)
    height = height or level.k
    shape = (batch, spec.in_channels, frames, height, width)
    x = torch.zeros(shape, dtype=torch.float64) if zero_point else torch.randn(shape, generator=gen, dtype=torch.float64)
    x.requires_grad_(True)
    weights, params = [], []
    for _ in level.groups:
        layers = []
        for cin, cout in zip(spec.channels, spec.channels[1:]):
            if zero_point:
                k = torch.zeros(cout, cin, *spec.kernel, dtype=torch.float64)
            else:
                k = torch.randn(cout, cin, *spec.kernel, generator=gen, dtype=torch.float64) * 0.3
            b = torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1
            k.requires_grad_(True)
            b.requires_grad_(True)
            layers.append((k, b))
            params += [k, b]
        weights.append(layers)
    probe = torch.randn(batch, spec.out_channels, frames, height, width, generator=gen, dtype=torch.float64)

    def loss():
        return (arme_forward(x, level, spec, weights) * probe).sum()

    return max_relative_error(loss, [x] + params, h=h)
