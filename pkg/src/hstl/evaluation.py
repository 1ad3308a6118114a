"""Retrieval metrics: cross-view rank-k (identical views excluded) and rank-k / mAP / mINP.

Ties in distance are broken by gallery index everywhere (stable sort).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from hstl.errors import ShapeError


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray  # (N, E, S)
    subjects: list[str]
    conditions: list[str]
    views: list[int]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim == 2:
            self.embeddings = self.embeddings[:, :, None]
        n = len(self.embeddings)
        if not (len(self.subjects) == len(self.conditions) == len(self.views) == n):
            raise ShapeError("embedding metadata lengths disagree")

    def __len__(self) -> int:
        return len(self.embeddings)

    def select(self, mask) -> "EmbeddingSet":
        idx = np.flatnonzero(np.asarray(mask))
        return EmbeddingSet(self.embeddings[idx], [self.subjects[i] for i in idx],
                            [self.conditions[i] for i in idx], [self.views[i] for i in idx])

    def save(self, path) -> None:
        np.savez(path, embeddings=self.embeddings, subjects=np.array(self.subjects),
                 conditions=np.array(self.conditions), views=np.array(self.views))

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        with np.load(path) as z:
            return cls(z["embeddings"], [str(s) for s in z["subjects"]],
                       [str(c) for c in z["conditions"]], [int(v) for v in z["views"]])


def distance_matrix(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Sum over strips of Euclidean distances: (P, E, S), (G, E, S) -> (P, G)."""
    probe, gallery = np.asarray(probe, dtype=np.float64), np.asarray(gallery, dtype=np.float64)
    if probe.ndim == 2:
        probe, gallery = probe[:, :, None], gallery[:, :, None]
    if probe.shape[1:] != gallery.shape[1:]:
        raise ShapeError(f"strip layouts differ: {probe.shape[1:]} vs {gallery.shape[1:]}")
    out = np.zeros((len(probe), len(gallery)))
    for s in range(probe.shape[2]):
        out += cdist(probe[:, :, s], gallery[:, :, s])
    return out


def ranking(dist_row: np.ndarray) -> np.ndarray:
    """Gallery order for one probe; equal distances keep gallery-index order."""
    return np.argsort(dist_row, kind="stable")


@dataclass
class EvalReport:
    protocol: str
    ranks: list[int]
    # condition -> {"per_view": {probe_view: {gallery_view: acc}}, "view_mean": {v: acc}, "mean", "std"}
    rank1_table: dict = field(default_factory=dict)
    rank_k: dict = field(default_factory=dict)  # condition (or "all") -> {k: acc}
    mAP: float | None = None
    mINP: float | None = None
    missing_probes: int = 0
    excluded_probes: int = 0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol, "ranks": self.ranks, "rank1_table": self.rank1_table,
            "rank_k": self.rank_k, "mAP": self.mAP, "mINP": self.mINP,
            "missing_probes": self.missing_probes, "excluded_probes": self.excluded_probes,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def mean_rank1(self, condition: str) -> float:
        return self.rank1_table[condition]["mean"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def rank_k_cross_view(dist: np.ndarray, probe_subjects: Sequence, probe_views: Sequence,
                      gallery_subjects: Sequence, gallery_views: Sequence,
                      ks: Sequence[int] = (1, 5)) -> tuple[dict, int]:
    """Per-view-pair rank-k accuracy, excluding gallery items that share the probe's view.

    Returns ``({k: {probe_view: {gallery_view: acc}}}, missing)`` where
    ``missing`` counts probe/gallery-view pairs whose subject is absent from
    that gallery view (each scored as a miss).
    """
    dist = np.asarray(dist)
    g_subj = np.asarray(gallery_subjects)
    g_view = np.asarray(gallery_views)
    hits: dict[int, dict] = {k: {} for k in ks}
    counts: dict = {}
    missing = 0
    for qi in range(dist.shape[0]):
        qv = probe_views[qi]
        for gv in sorted(set(g_view.tolist())):
            if gv == qv:
                continue
            cols = np.flatnonzero(g_view == gv)
            order = cols[ranking(dist[qi, cols])]
            matched = g_subj[order] == probe_subjects[qi]
            if not matched.any():
                missing += 1
            first = int(np.argmax(matched)) if matched.any() else np.inf
            counts[(qv, gv)] = counts.get((qv, gv), 0) + 1
            for k in ks:
                cell = hits[k].setdefault(qv, {})
                cell[gv] = cell.get(gv, 0) + (first < k)
    acc = {k: {qv: {gv: n / counts[(qv, gv)] for gv, n in row.items()} for qv, row in hits[k].items()}
           for k in ks}
    return acc, missing


def summarize_views(table: dict) -> dict:
    """Average over gallery views per probe view, then over probe views; sample std across probe views."""
    view_mean = {qv: float(np.mean(list(row.values()))) for qv, row in sorted(table.items())}
    vals = np.array(list(view_mean.values()))
    std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return {"per_view": table, "view_mean": view_mean, "mean": float(vals.mean()) if len(vals) else 0.0,
            "std": std}


def map_minp(dist: np.ndarray, probe_subjects: Sequence, gallery_subjects: Sequence) -> tuple[float, float, int]:
    """Mean average precision and mean inverse negative penalty.

    Probes without any true match in the gallery are excluded; their count is
    returned as the third value.
    """
    g_subj = np.asarray(gallery_subjects)
    aps, inps, excluded = [], [], 0
    for qi in range(dist.shape[0]):
        matched = g_subj[ranking(dist[qi])] == probe_subjects[qi]
        n_true = int(matched.sum())
        if n_true == 0:
            excluded += 1
            continue
        pos = np.flatnonzero(matched) + 1  # 1-based ranks of true matches
        aps.append(float(np.mean(np.arange(1, n_true + 1) / pos)))
        inps.append(n_true / pos[-1])
    if not aps:
        return 0.0, 0.0, excluded
    return float(np.mean(aps)), float(np.mean(inps)), excluded


def rank_k_open(dist: np.ndarray, probe_subjects: Sequence, gallery_subjects: Sequence,
                ks: Sequence[int] = (1, 5, 10, 20)) -> dict[int, float]:
    g_subj = np.asarray(gallery_subjects)
    first = []
    for qi in range(dist.shape[0]):
        matched = g_subj[ranking(dist[qi])] == probe_subjects[qi]
        first.append(int(np.argmax(matched)) if matched.any() else np.inf)
    first = np.array(first)
    return {k: float((first < k).mean()) if len(first) else 0.0 for k in ks}


def evaluate_cross_view(probe: EmbeddingSet, gallery: EmbeddingSet, ks: Sequence[int] = (1, 5)) -> EvalReport:
    """Gallery/probe protocol with identical-view pairs excluded, reported per probe condition type."""
    dist = distance_matrix(probe.embeddings, gallery.embeddings)
    report = EvalReport("casia", list(ks))
    conds = np.array([c.split("-", 1)[0].upper() for c in probe.conditions])
    for cond in sorted(set(conds.tolist())):
        rows = np.flatnonzero(conds == cond)
        acc, missing = rank_k_cross_view(dist[rows], [probe.subjects[i] for i in rows],
                                         [probe.views[i] for i in rows], gallery.subjects, gallery.views, ks)
        report.missing_probes += missing
        report.rank1_table[cond] = summarize_views(acc[ks[0]])
        report.rank_k[cond] = {k: summarize_views(acc[k])["mean"] for k in ks}
    report.mAP, report.mINP, report.excluded_probes = map_minp(dist, probe.subjects, gallery.subjects)
    return report


def evaluate_open(probe: EmbeddingSet, gallery: EmbeddingSet, ks: Sequence[int] = (1, 5, 10, 20)) -> EvalReport:
    """Open-set style protocol: plain rank-k over the whole gallery plus mAP and mINP."""
    dist = distance_matrix(probe.embeddings, gallery.embeddings)
    report = EvalReport("open", list(ks))
    report.rank_k["all"] = rank_k_open(dist, probe.subjects, gallery.subjects, ks)
    report.mAP, report.mINP, report.excluded_probes = map_minp(dist, probe.subjects, gallery.subjects)
    return report


def plot_view_grid(report: EvalReport, condition: str, path) -> None:
    """Render the probe-view x gallery-view rank-1 grid for one condition."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = report.rank1_table[condition]["per_view"]
    qv = sorted(table)
    gv = sorted({g for row in table.values() for g in row})
    grid = np.full((len(qv), len(gv)), np.nan)
    for i, q in enumerate(qv):
        for j, g in enumerate(gv):
            grid[i, j] = table[q].get(g, np.nan)
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(gv), 1 + 0.5 * len(qv)))
    im = ax.imshow(grid * 100, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(gv)), [str(g) for g in gv])
    ax.set_yticks(range(len(qv)), [str(q) for q in qv])
    ax.set_xlabel("gallery view")
    ax.set_ylabel("probe view")
    ax.set_title(f"rank-1 (%), {condition}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
