"""Adaptive spatio-temporal pooling: temporal max, shared channel map, per-region GeM."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from hstl.arme import split_regions
from hstl.errors import ShapeError
from hstl.hierarchy import PartitionLevel

GEM_EPS = 1e-6
GEM_P_INIT = 6.5


def temporal_max(x: torch.Tensor) -> torch.Tensor:
    """Max over frames, keeping a singleton frame axis: (B, C, T, H, W) -> (B, C, 1, H, W)."""
    if x.shape[2] == 0:
        raise ShapeError("temporal max over zero frames")
    return x.max(dim=2, keepdim=True).values


def channel_map(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-location linear map of channels; ``kernel`` is (C_in, C_out)."""
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"channel map expects {kernel.shape[0]} input channels, got {x.shape[1]}")
    y = torch.einsum("bcthw,cd->bdthw", x, kernel)
    if bias is not None:
        y = y + bias.view(1, -1, 1, 1, 1)
    return y


def gem_pool(x: torch.Tensor, p, eps: float = GEM_EPS) -> torch.Tensor:
    """Generalized mean over the last two axes of a clamped map, (B, C, 1, h, w) -> (B, C).

    Evaluated as ``m * mean((x / m) ** p) ** (1 / p)`` with ``m`` the per-channel
    max so large exponents do not overflow; the value is unchanged.
    """
    if x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError("GeM over an empty region")
    x = x.clamp(min=eps).flatten(2)
    m = x.amax(dim=-1, keepdim=True).detach()
    return (m * (x / m).pow(p).mean(dim=-1, keepdim=True).pow(1.0 / p)).squeeze(-1)


def astp_forward(x: torch.Tensor, level: PartitionLevel, kernel: torch.Tensor, bias: torch.Tensor | None,
                 p: Sequence | torch.Tensor, eps: float = GEM_EPS) -> torch.Tensor:
    """Pool a feature map into one vector per region: (B, C, T, H, W) -> (B, C_out, K)."""
    if len(p) != level.num_groups:
        raise ShapeError(f"{len(p)} GeM exponents for {level.num_groups} regions")
    mapped = channel_map(temporal_max(x), kernel, bias)
    cols = [gem_pool(r, p[j], eps) for j, r in enumerate(split_regions(mapped, level))]
    return torch.stack(cols, dim=-1)


class ASTP(nn.Module):
    def __init__(self, level: PartitionLevel, in_channels: int, out_channels: int | None = None,
                 p_init: float = GEM_P_INIT, eps: float = GEM_EPS):
        super().__init__()
        out_channels = out_channels or in_channels
        self.level = level
        self.eps = eps
        self.kernel = nn.Parameter(torch.empty(in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.p = nn.Parameter(torch.full((level.num_groups,), float(p_init)))
        nn.init.normal_(self.kernel, std=math.sqrt(2.0 / in_channels))

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return astp_forward(x, self.level, self.kernel, self.bias, self.p, self.eps)
