"""Frame-level temporal aggregation.

Each region is compressed from T to T/3 frames by two temporal max pools
(kernel 3 and kernel 5, both stride 3) whose outputs are blended with
per-channel, per-frame softmax weights generated from the fused pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from hstl.arme import split_regions
from hstl.errors import ShapeError
from hstl.hierarchy import PartitionLevel


@dataclass
class ScaleWeights:
    w1: torch.Tensor
    w2: torch.Tensor


def multiscale_pool(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(U1, U2, U1 + U2)``, each (B, C, T/3, H, W).

    The kernel-5 window is centred on the middle frame of the matching
    kernel-3 window, with the first and last frame replicated once.
    """
    t = x.shape[2]
    if t == 0 or t % 3:
        raise ShapeError(f"frame count {t} must be a positive multiple of 3")
    u1 = F.max_pool3d(x, kernel_size=(3, 1, 1), stride=(3, 1, 1))
    padded = torch.cat([x[:, :, :1], x, x[:, :, -1:]], dim=2)
    u2 = F.max_pool3d(padded, kernel_size=(5, 1, 1), stride=(3, 1, 1))
    return u1, u2, u1 + u2


def _linear(g: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    # g: (B, C, T'); kernel (C_in, C_out)
    return torch.einsum("bct,cd->bdt", g, kernel) + bias.view(1, -1, 1)


def frame_weights(fused: torch.Tensor, fc1: tuple[torch.Tensor, torch.Tensor],
                  fc2: tuple[torch.Tensor, torch.Tensor]) -> ScaleWeights:
    """Softmax over the two scales of channel maps of the spatially averaged fused pool."""
    if fused.shape[1] != fc1[0].shape[0] or fc1[0].shape != fc2[0].shape:
        raise ShapeError(f"frame-weight maps {tuple(fc1[0].shape)}/{tuple(fc2[0].shape)} "
                         f"do not fit {fused.shape[1]} channels")
    g = fused.mean(dim=(-2, -1))
    logits = torch.stack([_linear(g, *fc1), _linear(g, *fc2)], dim=0)
    w = torch.softmax(logits, dim=0)[..., None, None]
    return ScaleWeights(w[0], w[1])


def fta_region(x: torch.Tensor, fc1, fc2) -> torch.Tensor:
    u1, u2, fused = multiscale_pool(x)
    w = frame_weights(fused, fc1, fc2)
    return w.w1 * u1 + w.w2 * u2


def fta_forward(x: torch.Tensor, level: PartitionLevel, params) -> torch.Tensor:
    """``params`` holds one ``(fc1, fc2)`` pair per region, each fc a (kernel, bias) pair."""
    if len(params) != level.num_groups:
        raise ShapeError(f"{len(params)} frame-weight parameter sets for {level.num_groups} regions")
    outs = [fta_region(r, fc1, fc2) for r, (fc1, fc2) in zip(split_regions(x, level), params)]
    return torch.cat(outs, dim=-2)


class FTA(nn.Module):
    def __init__(self, level: PartitionLevel, channels: int):
        super().__init__()
        self.level = level
        self.regions = nn.ModuleList()
        for _ in level.groups:
            region = nn.ParameterDict()
            for s in (1, 2):
                region[f"fc{s}_kernel"] = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))
                region[f"fc{s}_bias"] = nn.Parameter(torch.zeros(channels))
            self.regions.append(region)

    def params(self):
        return [((r["fc1_kernel"], r["fc1_bias"]), (r["fc2_kernel"], r["fc2_bias"])) for r in self.regions]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return fta_forward(x, self.level, self.params())
