"""Training objective: per-strip batch-all triplet loss plus label-smoothed cross-entropy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from hstl.errors import ShapeError

DEFAULT_MARGIN = 0.2


@dataclass
class LossReport:
    triplet: float
    ce: float
    active_triplet_fraction: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """Euclidean distances per strip: (B, E, S) -> (S, B, B)."""
    x = x.permute(2, 0, 1)
    sq = (x.unsqueeze(2) - x.unsqueeze(1)).pow(2).sum(-1)
    return sq.clamp(min=1e-12).sqrt()


def triplet_batch_all(embeddings: torch.Tensor, labels: torch.Tensor,
                      margin: float = DEFAULT_MARGIN) -> tuple[torch.Tensor, float]:
    """Mean hinge over active triples, averaged over strips.

    ``embeddings`` is (B, E, S). Returns the loss and the fraction of valid
    (anchor, positive, negative) triples with a positive hinge.
    """
    if embeddings.dim() == 2:
        embeddings = embeddings.unsqueeze(-1)
    labels = labels.view(-1)
    b = labels.numel()
    if embeddings.shape[0] != b:
        raise ShapeError(f"{embeddings.shape[0]} embeddings for {b} labels")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    pos = same & ~torch.eye(b, dtype=torch.bool, device=labels.device)
    valid = pos.unsqueeze(2) & ~same.unsqueeze(1)  # [a, p, n]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("batch has no valid triplets (need >= 2 subjects and a repeated subject)")
    d = pairwise_distances(embeddings)
    hinge = F.relu(d.unsqueeze(3) - d.unsqueeze(2) + margin) * valid
    active = (hinge > 0).flatten(1).sum(1)
    per_strip = hinge.flatten(1).sum(1) / active.clamp(min=1)
    frac = active.sum().item() / (n_valid * d.shape[0])
    return per_strip.mean(), frac


def cross_entropy_smoothed(logits: torch.Tensor, labels: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Cross-entropy with ``1 - eps`` on the true class and ``eps / (N - 1)`` elsewhere.

    ``logits`` is (B, N) or (B, S, N); the mean runs over batch and strips.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    if logits.dim() == 2:
        logits = logits.unsqueeze(1)
    n_cls = logits.shape[-1]
    labels = labels.view(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels outside 0..{n_cls - 1}")
    logp = torch.log_softmax(logits, dim=-1)
    off = eps / (n_cls - 1) if n_cls > 1 else 0.0
    target = torch.full_like(logp, off)
    target.scatter_(-1, labels.view(-1, 1, 1).expand(-1, logits.shape[1], 1), 1.0 - eps)
    return -(target * logp).sum(-1).mean()


def combined_loss(embeddings: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor,
                  margin: float = DEFAULT_MARGIN, label_smoothing: float = 0.0):
    tri, frac = triplet_batch_all(embeddings, labels, margin)
    ce = cross_entropy_smoothed(logits, labels, label_smoothing)
    total = tri + ce
    return total, LossReport(tri.item(), ce.item(), frac, total.item())
