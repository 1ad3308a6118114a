"""Body-part partition hierarchy.

A silhouette frame is cut into ``k`` uniform horizontal parts (1 = top). A
hierarchy is a list of levels; each level groups the parts into contiguous
bands, level 1 being the whole body and every level refining the previous one.

The hierarchy can be loaded from text or recovered from a corpus with a
contiguity-constrained Ward agglomeration over per-part motion summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from hstl.errors import ConfigError, DataError, ShapeError

DEFAULT_FOURIER_TERMS = 4


@dataclass(frozen=True)
class PartitionLevel:
    level_index: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(p) for p in g) for g in self.groups))

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def k(self) -> int:
        return sum(len(g) for g in self.groups)

    def region_heights(self, height: int) -> list[int]:
        """Row count of every group for a feature map of the given height."""
        k = self.k
        if height % k:
            raise ShapeError(f"height {height} is not divisible by part count k={k}")
        band = height // k
        return [len(g) * band for g in self.groups]

    def to_text(self) -> str:
        return ",".join(_format_range(g) for g in self.groups)


@dataclass(frozen=True)
class PartitionHierarchy:
    k: int
    levels: tuple[PartitionLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, index: int) -> PartitionLevel:
        """1-based level lookup."""
        if not 1 <= index <= len(self.levels):
            raise ConfigError(f"level {index} outside 1..{len(self.levels)}")
        return self.levels[index - 1]

    def group_counts(self) -> list[int]:
        return [lv.num_groups for lv in self.levels]

    @classmethod
    def from_groups(cls, k: int, levels: Sequence[Sequence[Sequence[int]]]) -> "PartitionHierarchy":
        return cls(k, tuple(PartitionLevel(i + 1, tuple(map(tuple, g))) for i, g in enumerate(levels)))

    def to_text(self) -> str:
        return "\n".join([str(self.k)] + [lv.to_text() for lv in self.levels]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartitionHierarchy":
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ConfigError("empty hierarchy text")
        head = lines[0].removeprefix("k").lstrip("=: ").strip()
        try:
            k = int(head)
        except ValueError:
            raise ConfigError(f"first hierarchy line must be the part count, got {lines[0]!r}") from None
        levels = [[_parse_range(tok) for tok in ln.split(",")] for ln in lines[1:]]
        return cls.from_groups(k, levels)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PartitionHierarchy":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read hierarchy file {path}: {exc}") from exc
        return cls.from_text(text)


def _format_range(group: Sequence[int]) -> str:
    if len(group) == 1:
        return str(group[0])
    if list(group) == list(range(group[0], group[-1] + 1)):
        return f"{group[0]}-{group[-1]}"
    return "+".join(map(str, group))


def _parse_range(token: str) -> tuple[int, ...]:
    token = token.strip()
    try:
        if "+" in token:
            return tuple(int(t) for t in token.split("+"))
        if "-" in token:
            lo, hi = token.split("-", 1)
            return tuple(range(int(lo), int(hi) + 1))
        return (int(token),)
    except ValueError:
        raise ConfigError(f"bad part range {token!r}") from None


def default_hierarchy() -> PartitionHierarchy:
    """The fixed 8-part, 4-level hierarchy used by the shipping architecture."""
    return PartitionHierarchy.from_groups(
        8,
        [
            [range(1, 9)],
            [range(1, 6), range(6, 9)],
            [[1], range(2, 6), [6, 7], [8]],
            [[p] for p in range(1, 9)],
        ],
    )


def flat_hierarchy(k: int = 8, grouped_levels: int = 3) -> PartitionHierarchy:
    """Ablation hierarchy: ``grouped_levels`` whole-body levels, then singletons."""
    whole = [list(range(1, k + 1))]
    return PartitionHierarchy.from_groups(k, [whole] * grouped_levels + [[[p] for p in range(1, k + 1)]])


class Violation(NamedTuple):
    kind: str
    level: int
    group: int | None
    message: str

    def __str__(self):
        where = f"level {self.level}" + (f", group {self.group}" if self.group is not None else "")
        return f"{self.kind} ({where}): {self.message}"


def validate_hierarchy(h: PartitionHierarchy) -> list[Violation]:
    """Report every invariant breach; never raises."""
    out: list[Violation] = []
    k = h.k
    if not isinstance(k, int) or k < 1:
        return [Violation("part-count", 0, None, f"k must be a positive integer, got {k!r}")]
    if not h.levels:
        return [Violation("empty", 0, None, "hierarchy has no levels")]
    universe = set(range(1, k + 1))
    for li, level in enumerate(h.levels, start=1):
        if level.level_index != li:
            out.append(Violation("level-index", li, None, f"level stored as {level.level_index}"))
        seen: set[int] = set()
        for gi, group in enumerate(level.groups, start=1):
            if not group:
                out.append(Violation("empty-group", li, gi, "group has no parts"))
                continue
            bad = [p for p in group if p not in universe]
            if bad:
                out.append(Violation("range", li, gi, f"parts {bad} outside 1..{k}"))
            dup = seen.intersection(group)
            if dup or len(set(group)) != len(group):
                out.append(Violation("overlap", li, gi, f"parts {sorted(dup) or list(group)} appear twice"))
            seen.update(group)
            if list(group) != list(range(group[0], group[0] + len(group))):
                out.append(Violation("contiguity", li, gi, f"group {list(group)} is not a contiguous run"))
        if seen != universe:
            missing = sorted(universe - seen)
            if missing:
                out.append(Violation("coverage", li, None, f"parts {missing} not covered"))
        starts = [min(g) for g in level.groups if g]
        if starts != sorted(starts):
            out.append(Violation("order", li, None, "groups not in ascending spatial order"))
    if h.levels[0].groups != (tuple(range(1, k + 1)),):
        out.append(Violation("root", 1, None, "level 1 must be the single whole-body group"))
    for li in range(1, len(h.levels)):
        upper, lower = h.levels[li - 1], h.levels[li]
        if lower.num_groups < upper.num_groups:
            out.append(Violation("monotone", li + 1, None,
                                 f"group count drops from {upper.num_groups} to {lower.num_groups}"))
        parents = [set(g) for g in upper.groups]
        for gi, group in enumerate(lower.groups, start=1):
            owners = [pi for pi, par in enumerate(parents, start=1) if par.intersection(group)]
            if len(owners) != 1 or not set(group) <= parents[owners[0] - 1]:
                out.append(Violation("nesting", li + 1, gi,
                                     f"group {list(group)} straddles level-{li} groups {owners}"))
    return out


def check_hierarchy(h: PartitionHierarchy) -> PartitionHierarchy:
    problems = validate_hierarchy(h)
    if problems:
        raise ConfigError("invalid hierarchy: " + "; ".join(map(str, problems)))
    return h


# --- part summaries -------------------------------------------------------

@dataclass(frozen=True)
class PartSummary:
    part_index: int
    vector: np.ndarray


def slice_parts(frames: np.ndarray, k: int) -> list[np.ndarray]:
    """Cut a (T, H, W) stack into k uniform horizontal bands, top to bottom."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ShapeError(f"expected (T, H, W) frames, got shape {frames.shape}")
    height = frames.shape[1]
    if k < 1 or height % k:
        raise ConfigError(f"frame height H={height} is not divisible by k={k}")
    band = height // k
    return [frames[:, j * band:(j + 1) * band] for j in range(k)]


def summarize_part(part_stream: np.ndarray, part_index: int = 0,
                   fourier_terms: int = DEFAULT_FOURIER_TERMS) -> PartSummary:
    """Foreground-fraction statistics of one part stream.

    The vector is ``[mean, std, |F_1|, ..., |F_n|]`` where ``F_m`` are the
    DFT coefficients of the per-frame foreground fraction divided by the
    sequence length. Missing harmonics (short streams) are zero.
    """
    stream = np.asarray(part_stream, dtype=np.float64)
    if stream.size == 0 or stream.shape[0] == 0:
        raise ShapeError("cannot summarize an empty part stream")
    frac = stream.reshape(stream.shape[0], -1).mean(axis=1)
    spectrum = np.abs(np.fft.rfft(frac)) / len(frac)
    harmonics = np.zeros(fourier_terms)
    avail = spectrum[1:fourier_terms + 1]
    harmonics[:len(avail)] = avail
    return PartSummary(part_index, np.concatenate([[frac.mean(), frac.std()], harmonics]))


def summarize_sequence(frames: np.ndarray, k: int,
                       fourier_terms: int = DEFAULT_FOURIER_TERMS) -> list[PartSummary]:
    return [summarize_part(p, j + 1, fourier_terms) for j, p in enumerate(slice_parts(frames, k))]


# --- clustering -----------------------------------------------------------

def _part_means(summaries: Sequence[Sequence[PartSummary]]) -> np.ndarray:
    if not summaries:
        raise ConfigError("need at least one sequence to build a hierarchy")
    k = len(summaries[0])
    dims = {len(s.vector) for seq in summaries for s in seq}
    if any(len(seq) != k for seq in summaries):
        raise ShapeError("sequences disagree on the number of parts")
    if len(dims) != 1:
        raise ShapeError(f"inconsistent summary lengths {sorted(dims)}")
    stacked = np.array([[s.vector for s in seq] for seq in summaries], dtype=np.float64)
    if not np.all(np.isfinite(stacked)):
        raise ShapeError("summary vectors must be finite")
    # fsum keeps the average exact-rounded, so corpus order cannot change it
    n = stacked.shape[0]
    return np.array([[math.fsum(stacked[:, j, d]) / n for d in range(stacked.shape[2])]
                     for j in range(k)])


def ward_cost(size_a: int, mean_a: np.ndarray, size_b: int, mean_b: np.ndarray) -> float:
    """Increase of the within-cluster sum of squares when two clusters merge."""
    diff = mean_a - mean_b
    return size_a * size_b / (size_a + size_b) * float(diff @ diff)


def contiguous_ward_tree(points: np.ndarray) -> list[list[tuple[int, ...]]]:
    """Adjacent-only Ward agglomeration of k ordered points.

    Returns the partition at every cluster count, index ``c - 1`` holding the
    ``c``-cluster partition (1-based part indices). Among equal-cost merges the
    one joining at the largest boundary is taken first, so the lowest split
    points survive longest.
    """
    k = len(points)
    clusters = [((j + 1,), 1, points[j].copy()) for j in range(k)]
    partitions: list[list[tuple[int, ...]]] = [None] * k  # type: ignore[list-item]
    partitions[k - 1] = [c[0] for c in clusters]
    # ties are judged relative to the data scale so running-mean rounding cannot break them
    ref = 1e-6 * float((points ** 2).sum(axis=1).mean()) if k else 0.0
    while len(clusters) > 1:
        costs = [ward_cost(a[1], a[2], b[1], b[2]) for a, b in zip(clusters, clusters[1:])]
        tol = 1e-9 * max(max(costs), ref)
        best = min(costs)
        pick = max(i for i, c in enumerate(costs) if c <= best + tol)
        (ga, na, ma), (gb, nb, mb) = clusters[pick], clusters[pick + 1]
        merged = (ga + gb, na + nb, (na * ma + nb * mb) / (na + nb))
        clusters[pick:pick + 2] = [merged]
        partitions[len(clusters) - 1] = [c[0] for c in clusters]
    return partitions


def build_hierarchy(summaries: Sequence[Sequence[PartSummary]],
                    target_group_counts: Iterable[int]) -> PartitionHierarchy:
    """Recover a nested hierarchy from per-sequence part summaries."""
    counts = [int(c) for c in target_group_counts]
    means = _part_means(summaries)
    k = len(means)
    if not counts or counts[0] != 1:
        raise ConfigError(f"target group counts must start at 1, got {counts}")
    if any(c > k for c in counts):
        raise ConfigError(f"target group counts {counts} exceed part count k={k}")
    if counts[-1] != k:
        raise ConfigError(f"target group counts must end at k={k}, got {counts}")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"target group counts must be strictly ascending, got {counts}")
    partitions = contiguous_ward_tree(means)
    return check_hierarchy(PartitionHierarchy.from_groups(k, [partitions[c - 1] for c in counts]))


def hierarchy_from_sequences(sequences: Iterable[np.ndarray], k: int, counts: Sequence[int],
                             fourier_terms: int = DEFAULT_FOURIER_TERMS) -> PartitionHierarchy:
    return build_hierarchy([summarize_sequence(s, k, fourier_terms) for s in sequences], counts)
