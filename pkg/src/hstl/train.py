"""Training loop, embedding export and the run manifest."""

from __future__ import annotations

import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from hstl import __version__
from hstl.checkpoint import atomic_save, export_state, import_state, load_checkpoint
from hstl.config import RunConfig
from hstl.data import SilhouetteSequence, make_pk_batch, resize_frames
from hstl.errors import ConfigError, NumericError
from hstl.evaluation import EmbeddingSet
from hstl.losses import combined_loss
from hstl.network import HSTL, build_model

log = logging.getLogger(__name__)


def configure_threads() -> None:
    workers = os.environ.get("HSTL_NUM_WORKERS")
    if workers:
        torch.set_num_threads(max(1, int(workers)))


def make_optimizer(model: torch.nn.Module, cfg: RunConfig):
    t = cfg.train
    if t.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(t.milestones), gamma=t.gamma)
    return opt, sched


def artifact_version() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"hstl-{__version__}" + (f"+{rev}" if rev else "")


def prepare_sequences(seqs: Sequence[SilhouetteSequence], size) -> list[SilhouetteSequence]:
    return [s if s.frames.shape[1:] == tuple(size) else
            SilhouetteSequence(resize_frames(s.frames, size), s.subject, s.condition, s.view, s.source)
            for s in seqs]


@dataclass
class TrainResult:
    model: HSTL
    losses: list[dict] = field(default_factory=list)
    label_of: dict[str, int] = field(default_factory=dict)
    iteration: int = 0


def train(cfg: RunConfig, sequences: Sequence[SilhouetteSequence], out_dir=None, resume: bool = True,
          iterations: int | None = None, stop_at: int | None = None) -> TrainResult:
    """Train on ``sequences``; with ``out_dir`` writes checkpoints, ``losses.jsonl`` and a manifest.

    ``iterations`` rescales the schedule of ``cfg.train``; ``stop_at`` halts early
    (used to exercise resumption) without changing the schedule.
    """
    cfg.validate()
    if iterations is not None:
        cfg = RunConfig(cfg.model, cfg.train.scaled(iterations))
    t = cfg.train
    seqs = prepare_sequences(sequences, cfg.model.input_size)
    subjects = sorted({s.subject for s in seqs})
    if len(subjects) < t.batch_p:
        raise ConfigError(f"train.batch_p={t.batch_p} exceeds the {len(subjects)} subjects in the data")
    if t.batch_k < 2:
        raise ConfigError("train.batch_k must be at least 2 for triplet mining")
    label_of = {s: i for i, s in enumerate(subjects)}
    torch.manual_seed(t.seed)
    model = build_model(cfg.model, seed=t.seed, num_classes=len(subjects))
    opt, sched = make_optimizer(model, cfg)
    rng = np.random.default_rng(t.seed)
    start, losses = 0, []
    started = time.time()
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "losses.jsonl" if out else None
    ckpt_path = out / "checkpoint.pt" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.yaml")
    if resume and ckpt_path and ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        if ck["manifest"]["config_hash"] != cfg.config_hash():
            raise ConfigError(f"checkpoint {ckpt_path} was written with a different config")
        import_state(model, ck["tensors"])
        opt.load_state_dict(ck["state"]["optimizer"])
        sched.load_state_dict(ck["state"]["scheduler"])
        rng.bit_generator.state = ck["state"]["numpy_rng"]
        torch.set_rng_state(ck["state"]["torch_rng"])
        start = ck["state"]["iteration"]
        losses = [json.loads(ln) for ln in log_path.read_text().splitlines()][:start] if log_path.exists() else []
        log.info("resumed from iteration %d", start)
    if log_path:
        log_path.write_text("".join(json.dumps(r) + "\n" for r in losses))
    end = min(t.iterations, stop_at) if stop_at else t.iterations
    model.train()
    report_every = max(1, (end - start) // 10)
    for it in range(start, end):
        batch = make_pk_batch(seqs, t.batch_p, t.batch_k, cfg.model.clip_length, rng, label_of)
        clips = torch.from_numpy(batch.clips)
        labels = torch.from_numpy(batch.labels)
        emb, logits = model(clips)
        loss, rep = combined_loss(emb, logits, labels, cfg.model.margin, cfg.model.label_smoothing)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it + 1}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        record = {"iter": it + 1, "lr": opt.param_groups[0]["lr"], **rep.as_dict()}
        losses.append(record)
        if (it + 1 - start) % report_every == 0 or it + 1 == end:
            log.info("iteration %d", it + 1, extra={"fields": record})
        if log_path and (it + 1) % t.log_every == 0:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if ckpt_path and ((it + 1) % t.checkpoint_every == 0 or it + 1 == end):
            save_checkpoint(ckpt_path, model, cfg, opt, sched, rng, it + 1, label_of)
    result = TrainResult(model, losses, label_of, end)
    if out:
        write_manifest(out / "manifest.json", cfg, started, {"final_loss": losses[-1] if losses else None,
                                                             "iterations": end})
    return result


def save_checkpoint(path, model, cfg: RunConfig, opt, sched, rng, iteration: int, label_of) -> None:
    atomic_save({
        "manifest": {"config_hash": cfg.config_hash(), "seed": cfg.train.seed, "version": artifact_version(),
                     "iteration": iteration},
        "config": cfg.to_dict(),
        "tensors": export_state(model),
        "labels": label_of,
        "state": {"optimizer": opt.state_dict(), "scheduler": sched.state_dict(),
                  "numpy_rng": rng.bit_generator.state, "torch_rng": torch.get_rng_state(),
                  "iteration": iteration},
    }, path)


def load_model(path) -> tuple[HSTL, RunConfig]:
    ck = load_checkpoint(path)
    cfg = RunConfig.from_dict(ck["config"])
    model = build_model(cfg.model, seed=cfg.train.seed, num_classes=len(ck.get("labels", {})))
    import_state(model, ck["tensors"])
    model.eval()
    return model, cfg


def write_manifest(path, cfg: RunConfig, started: float, metrics: dict) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "seeds": {"train": cfg.train.seed},
        "version": artifact_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metrics": metrics,
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=str))
    os.replace(tmp, path)


@torch.no_grad()
def embed_sequences(model: HSTL, sequences: Sequence[SilhouetteSequence], size=None,
                    max_frames: int | None = None) -> EmbeddingSet:
    """Embed whole sequences one at a time (all frames, padded to a multiple of 3)."""
    model.eval()
    size = size or model.config.input_size
    embs = []
    for s in sequences:
        frames = resize_frames(s.frames, size)
        if max_frames:
            frames = frames[:max_frames]
        x = torch.from_numpy(frames.astype(np.float32))[None, None]
        emb, _ = model(x)
        embs.append(emb[0].numpy())
    e = np.stack(embs) if embs else np.zeros((0, model.config.embedding_dim, model.num_strips))
    return EmbeddingSet(e, [s.subject for s in sequences], [s.condition for s in sequences],
                        [s.view for s in sequences])
