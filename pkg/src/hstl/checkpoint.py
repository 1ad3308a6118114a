"""Keyed tensor checkpoints with a run manifest.

Parameter keys follow the block layout, e.g. ``level2.region1.conv2.kernel``,
``fta.region2.fc1.bias``, ``astp.level2_fta.region1.p``. The container is a
``torch.save`` dict ``{"manifest", "config", "tensors", "state"}``.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from hstl.arme import ARME
from hstl.astp import ASTP
from hstl.errors import DataError
from hstl.fta import FTA
from hstl.network import HSTL


def key_map(model: HSTL) -> dict[str, torch.Tensor]:
    """Checkpoint key -> live parameter (or buffer) of ``model``."""
    out: dict[str, torch.Tensor] = {}

    def astp(prefix: str, m: ASTP):
        out[f"{prefix}.fc.kernel"] = m.kernel
        out[f"{prefix}.fc.bias"] = m.bias
        for j in range(m.level.num_groups):
            out[f"{prefix}.region{j + 1}.p"] = m.p[j:j + 1]

    for stage, block, tap in zip(model.stages, model.blocks, model.taps):
        if isinstance(block, ARME):
            for j, convs in enumerate(block.regions, start=1):
                for name, mod in convs.items():
                    base = f"{stage.name}.region{j}.{name}"
                    if name.startswith("conv"):
                        out[f"{base}.kernel"] = mod.weight
                        out[f"{base}.bias"] = mod.bias
                    else:
                        for pname, t in list(mod.named_parameters()) + list(mod.named_buffers()):
                            out[f"{base}.{pname}"] = t
        elif isinstance(block, FTA):
            for j, region in enumerate(block.regions, start=1):
                for s in (1, 2):
                    out[f"fta.region{j}.fc{s}.kernel"] = region[f"fc{s}_kernel"]
                    out[f"fta.region{j}.fc{s}.bias"] = region[f"fc{s}_bias"]
        astp(f"astp.{stage.tap}", tap)
    astp(f"astp.level{model.config.num_levels}", model.final)
    for s, head in enumerate(model.heads, start=1):
        out[f"head.strip{s}.kernel"] = head.weight
        out[f"head.strip{s}.bias"] = head.bias
    if model.classifiers is not None:
        for s, clf in enumerate(model.classifiers, start=1):
            out[f"classifier.strip{s}.kernel"] = clf.weight
    return out


def export_state(model: HSTL) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in key_map(model).items()}


@torch.no_grad()
def import_state(model: HSTL, tensors: dict[str, torch.Tensor], strict: bool = True) -> None:
    live = key_map(model)
    missing = sorted(set(live) - set(tensors))
    unexpected = sorted(set(tensors) - set(live))
    if strict and (missing or unexpected):
        raise DataError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for k, t in live.items():
        if k in tensors:
            if tensors[k].shape != t.shape:
                raise DataError(f"checkpoint tensor {k} has shape {tuple(tensors[k].shape)}, "
                                f"model expects {tuple(t.shape)}")
            t.copy_(tensors[k])


def atomic_save(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
