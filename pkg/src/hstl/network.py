"""Full HSTL network: stacked region convs, one temporal aggregation, pooled taps.

The main branch runs the ARME stages level by level, inserts the frame
aggregation after the last stage at ``fta_level`` and ends with a pooling at
the finest level. Every ARME stage and the aggregation also feed a pooling
tap. Strips are ordered as ``[main, taps in reverse pipeline order]`` and each
strip has its own linear embedding head and classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from hstl.arme import ARME
from hstl.astp import ASTP
from hstl.config import HstlConfig
from hstl.errors import ShapeError, NumericError
from hstl.fta import FTA


def spatial_downsample(x: torch.Tensor) -> torch.Tensor:
    """2x2 spatial max pooling with stride 2; frames untouched."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"spatial downsampling needs even H and W, got {tuple(x.shape[-2:])}")
    return F.max_pool3d(x, kernel_size=(1, 2, 2), stride=(1, 2, 2))


def pad_frames(x: torch.Tensor, multiple: int = 3) -> torch.Tensor:
    """Repeat the last frame until the frame count is a multiple of ``multiple``."""
    extra = (-x.shape[2]) % multiple
    if extra == 0:
        return x
    return torch.cat([x, x[:, :, -1:].expand(-1, -1, extra, -1, -1)], dim=2)


@dataclass
class Stage:
    kind: str  # "arme" | "fta"
    name: str  # checkpoint prefix, e.g. "level2" or "fta"
    tap: str  # checkpoint prefix of its pooling tap
    level: int


class HSTL(nn.Module):
    def __init__(self, config: HstlConfig, num_classes: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.num_classes = num_classes
        h = config.hierarchy
        self.stages: list[Stage] = []
        self.blocks = nn.ModuleList()
        self.taps = nn.ModuleList()
        tap_channels = []
        seen: dict[int, int] = {}
        last_at = {s.level: i for i, s in enumerate(config.arme)}
        for i, stage in enumerate(config.arme):
            seen[stage.level] = seen.get(stage.level, 0) + 1
            suffix = "" if seen[stage.level] == 1 else f"_{seen[stage.level]}"
            name = f"level{stage.level}{suffix}"
            level = h.level(stage.level)
            c = stage.channels[-1]
            self.blocks.append(ARME(level, config.conv_spec(stage)))
            self.taps.append(ASTP(level, c, c, config.gem_p))
            self.stages.append(Stage("arme", name, name, stage.level))
            tap_channels.append((c, level.num_groups))
            if i == last_at.get(config.fta_level):
                self.blocks.append(FTA(level, c))
                self.taps.append(ASTP(level, c, c, config.gem_p))
                self.stages.append(Stage("fta", "fta", f"level{stage.level}_fta", stage.level))
                tap_channels.append((c, level.num_groups))
        c_last = config.arme[-1].channels[-1]
        self.final = ASTP(h.levels[-1], c_last, c_last, config.gem_p)
        strip_channels = [c_last] * h.levels[-1].num_groups
        for c, n in reversed(tap_channels):
            strip_channels += [c] * n
        self.strip_channels = strip_channels
        self.heads = nn.ModuleList(nn.Linear(c, config.embedding_dim) for c in strip_channels)
        self.classifiers = nn.ModuleList(
            nn.Linear(config.embedding_dim, num_classes, bias=False) for _ in strip_channels
        ) if num_classes else None

    @property
    def num_strips(self) -> int:
        return len(self.strip_channels)

    def _check(self, x: torch.Tensor, where: str) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations in network.{where}")
        return x

    def features(self, clips: torch.Tensor) -> dict[str, torch.Tensor]:
        """Run the backbone and return every intermediate map and pooled tap."""
        if clips.dim() == 4:
            clips = clips.unsqueeze(1)
        if clips.dim() != 5 or clips.shape[1] != 1:
            raise ShapeError(f"expected clips (B, 1, T, H, W), got {tuple(clips.shape)}")
        x = pad_frames(clips)
        out: dict[str, torch.Tensor] = {}
        for i, (stage, block, tap) in enumerate(zip(self.stages, self.blocks, self.taps)):
            x = self._check(block(x), f"{stage.name}.{stage.kind}")
            out[stage.name] = x
            pooled = self._check(tap(x), f"astp.{stage.tap}")
            out[f"astp.{stage.tap}"] = pooled
            if i == 0 and self.config.spatial_downsample_after_level1:
                x = spatial_downsample(x)
        main = self._check(self.final(x), f"astp.level{self.config.num_levels}")
        out[f"astp.level{self.config.num_levels}"] = main
        return out

    def forward(self, clips: torch.Tensor):
        """Returns ``(embeddings (B, E, S), logits (B, S, N) or None)``."""
        feats = self.features_list(clips)
        emb = torch.stack([head(v) for head, v in zip(self.heads, feats)], dim=-1)
        logits = None
        if self.classifiers is not None:
            logits = torch.stack([clf(emb[:, :, s]) for s, clf in enumerate(self.classifiers)], dim=1)
        return emb, logits

    def features_list(self, clips: torch.Tensor) -> list[torch.Tensor]:
        """Per-strip pooled vectors (channel counts differ across strips)."""
        f = self.features(clips)
        main_name = f"astp.level{self.config.num_levels}"
        groups = [f[main_name]] + [f[f"astp.{s.tap}"] for s in reversed(self.stages)]
        return [g[:, :, j] for g in groups for j in range(g.shape[-1])]

    def parameter_count_by_level(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for stage, block in zip(self.stages, self.blocks):
            counts[stage.name] = sum(p.numel() for p in block.parameters())
        return counts


def build_model(config: HstlConfig, seed: int = 0, num_classes: int = 0) -> HSTL:
    """Deterministically initialised model (He fan-in convs, zero biases, GeM p from config)."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return HSTL(config, num_classes)
