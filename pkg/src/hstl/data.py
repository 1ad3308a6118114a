"""Silhouette sequences: synthetic walker, on-disk corpus, clip and P x K batch sampling.

The synthetic walker is a 2D articulated capsule figure (head, torso, arms,
thighs, calves, feet) driven by sinusoidal joint angles. Each subject has its
own body proportions, stride period and swing amplitudes; the viewing angle
rotates the walking direction out of the image plane and the condition adds a
bag or widens the clothing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from hstl.errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".pgm", ".tif", ".tiff"}
CONDITIONS = ("NM", "BG", "CL")


@dataclass
class SilhouetteSequence:
    frames: np.ndarray  # (T, H, W) uint8 in {0, 1}
    subject: str
    condition: str  # e.g. "NM-01"; the part before "-" is the condition type
    view: int
    source: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"sequence needs (T>=1, H, W) frames, got {self.frames.shape}")
        if not np.isin(self.frames, (0, 1)).all():
            raise ShapeError("silhouette masks must be binary")
        self.frames = self.frames.astype(np.uint8)

    @property
    def condition_type(self) -> str:
        return self.condition.split("-", 1)[0].upper()

    def __len__(self) -> int:
        return self.frames.shape[0]


# --- procedural walker ----------------------------------------------------

# name: (low, high) ranges drawn uniformly per subject
PARAM_RANGES = {
    "height": (0.80, 0.92),  # figure height as a fraction of the frame
    "build": (0.80, 1.25),  # limb and torso thickness multiplier
    "torso_ratio": (0.27, 0.36),  # hip-to-shoulder length / height
    "thigh_ratio": (0.42, 0.58),  # thigh share of the leg length
    "head_ratio": (0.055, 0.080),  # head radius / height
    "period": (12.0, 22.0),  # frames per stride
    "thigh_amp": (0.22, 0.55),  # radians
    "knee_amp": (0.25, 0.95),  # radians of peak knee flexion
    "knee_lag": (0.0, 1.4),  # radians
    "arm_amp": (0.10, 0.70),  # radians
    "elbow_flex": (0.0, 0.7),  # radians
    "lean": (-0.12, 0.18),  # forward torso lean, radians
    "bob": (0.0, 0.025),  # vertical bounce / height
    "sway": (0.0, 0.06),  # torso side sway, radians
    "stride_width": (0.05, 0.11),  # lateral hip half-width / height
    "foot_ratio": (0.08, 0.14),  # foot length / height
}


@dataclass(frozen=True)
class SubjectGaitParams:
    height: float
    build: float
    torso_ratio: float
    thigh_ratio: float
    head_ratio: float
    period: float
    thigh_amp: float
    knee_amp: float
    knee_lag: float
    arm_amp: float
    elbow_flex: float
    lean: float
    bob: float
    sway: float
    stride_width: float
    foot_ratio: float
    bag_size: float = 0.09  # bag radius / height
    coat_widen: float = 1.45  # thickness multiplier for coat-covered segments

    def vector(self) -> np.ndarray:
        return np.array(list(asdict(self).values()), dtype=np.float64)


def generate_subject(seed: int) -> SubjectGaitParams:
    rng = np.random.default_rng([seed, 0x5EED])
    vals = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES.items()}
    vals["period"] = float(round(vals["period"]))
    vals["bag_size"] = float(rng.uniform(0.07, 0.11))
    vals["coat_widen"] = float(rng.uniform(1.3, 1.6))
    return SubjectGaitParams(**vals)


@dataclass
class _Capsule:
    a: np.ndarray  # (2,) endpoint, (forward, up, lateral) projected later
    b: np.ndarray
    radius: float


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _pose(p: SubjectGaitParams, phase: float, view_deg: float, condition: str, jitter: dict) -> list[_Capsule]:
    """Capsules in figure units (height 1) on the image plane, x right, y up, hip-ground origin."""
    cond = condition.split("-", 1)[0].upper()
    theta = math.radians(view_deg)
    fwd, lat = math.sin(theta), math.cos(theta)  # projection weights of forward / lateral axes
    depth_shrink = 0.75 + 0.25 * abs(fwd)  # mild perspective shortening away from side views
    leg = 1.0 - p.torso_ratio - 2 * p.head_ratio - 0.02
    thigh, calf = leg * p.thigh_ratio, leg * (1 - p.thigh_ratio)
    amp = jitter.get("amp", 1.0)
    bob = p.bob * math.cos(2 * phase)
    hip = np.array([0.0, leg + bob, 0.0])
    lean = p.lean + p.sway * math.sin(phase) * abs(lat)
    shoulder = hip + p.torso_ratio * np.array([math.sin(lean), math.cos(lean), 0.0])
    neck = shoulder + np.array([0.0, 0.02, 0.0])
    head_c = neck + np.array([0.0, p.head_ratio, 0.0])
    thick = 0.045 * p.build
    coat = p.coat_widen if cond == "CL" else 1.0
    caps: list[tuple[np.ndarray, np.ndarray, float]] = []
    torso_r = thick * (1.6 * abs(fwd) + 2.3 * abs(lat)) * (1.25 if cond == "CL" else 1.0)
    caps.append((hip + [0, 0.03, 0], shoulder - [0, 0.02, 0], torso_r))
    caps.append((head_c, head_c, p.head_ratio))
    for side in (1.0, -1.0):
        swing = amp * p.thigh_amp * math.sin(phase + (0 if side > 0 else math.pi))
        flex = amp * p.knee_amp * max(0.0, math.sin(phase + p.knee_lag + (0 if side > 0 else math.pi)))
        off = np.array([0.0, 0.0, side * p.stride_width])
        h0 = hip + off
        knee = h0 + thigh * np.array([math.sin(swing), -math.cos(swing), 0.0])
        shin = swing - flex
        ankle = knee + calf * np.array([math.sin(shin), -math.cos(shin), 0.0])
        toe = ankle + p.foot_ratio * np.array([math.cos(shin * 0.5), math.sin(shin * 0.5) * 0.3, 0.0])
        caps.append((h0, knee, thick * 1.15 * coat))
        caps.append((knee, ankle, thick * 0.85 * (1.0 + 0.4 * (coat - 1.0))))
        caps.append((ankle, toe, thick * 0.6))
        arm_swing = amp * p.arm_amp * math.sin(phase + (math.pi if side > 0 else 0.0))
        s0 = shoulder + np.array([0.0, -0.02, side * (p.stride_width + 0.06)])
        upper = 0.17 * (1 + p.torso_ratio)
        elbow = s0 + upper * np.array([math.sin(arm_swing), -math.cos(arm_swing), 0.0])
        fore = arm_swing + p.elbow_flex
        hand = elbow + upper * 0.9 * np.array([math.sin(fore), -math.cos(fore), 0.0])
        caps.append((s0, elbow, thick * 0.7 * coat))
        caps.append((elbow, hand, thick * 0.6 * (1.0 + 0.5 * (coat - 1.0))))
    if cond == "CL":
        caps.append((hip + [0, 0.02, 0], hip - [0, thigh * 0.7, 0], torso_r * 1.05))
    if cond == "BG":
        # shoulder bag hanging at the hip on the right side of the body
        bag = hip + np.array([-0.06, 0.05, 0.12])
        caps.append((bag, bag + [0.0, -0.04, 0.0], p.bag_size))

    def project(v: np.ndarray) -> np.ndarray:
        return np.array([(v[0] * fwd + v[2] * lat) * depth_shrink, v[1]])

    return [_Capsule(project(a), project(b), r) for a, b, r in caps]


def align_frame(mask: np.ndarray) -> np.ndarray:
    """Shift a mask horizontally so its column centre of mass sits at the frame centre."""
    total = mask.sum()
    if total == 0:
        return mask
    w = mask.shape[1]
    com = float((mask.sum(axis=0) * np.arange(w)).sum() / total)
    shift = int(round((w - 1) / 2 - com))
    out = np.zeros_like(mask)
    if shift >= 0:
        out[:, shift:] = mask[:, :w - shift]
    else:
        out[:, :w + shift] = mask[:, -shift:]
    return out


def render_sequence(params: SubjectGaitParams, view: float, condition: str = "NM", frames: int = 60,
                    height: int = 64, width: int = 44, noise_seed: int = 0, noise: float = 0.002,
                    start_phase: float = 0.0, amp_jitter: float = 1.0, supersample: int = 2,
                    subject: str = "", source: str | None = None) -> SilhouetteSequence:
    """Rasterise the walker into ``frames`` binary masks of size ``height x width``.

    ``start_phase`` is in frames. Speckle noise flips each pixel independently
    with probability ``noise`` using ``noise_seed``.
    """
    if height < 8 or width < 8 or frames < 1:
        raise ShapeError(f"invalid render size T={frames}, H={height}, W={width}")
    s = supersample
    hh, ww = height * s, width * s
    ys, xs = np.mgrid[0:hh, 0:ww]
    scale = params.height * hh  # pixels per figure unit
    ground = hh - 0.5 * (hh - scale)  # figure vertically centred
    px = (xs + 0.5 - ww / 2) / scale
    py = (ground - (ys + 0.5)) / scale
    rng = np.random.default_rng([noise_seed, 0xC0FFEE])
    out = np.zeros((frames, height, width), dtype=np.uint8)
    for t in range(frames):
        phase = 2 * math.pi * (t + start_phase) / params.period
        fine = np.zeros((hh, ww), dtype=bool)
        for cap in _pose(params, phase, view, condition, {"amp": amp_jitter}):
            fine |= _segment_distance(px, py, cap.a, cap.b) <= cap.radius
        coarse = fine.reshape(height, s, width, s).mean(axis=(1, 3)) >= 0.5
        if noise > 0:
            coarse ^= rng.random(coarse.shape) < noise
        out[t] = align_frame(coarse.astype(np.uint8))
    return SilhouetteSequence(out, subject, condition, int(round(view)),
                              source if source is not None else f"synthetic:noise_seed={noise_seed}")


@dataclass(frozen=True)
class CorpusSpec:
    subjects: int = 20
    views: tuple[int, ...] = (0, 36, 72, 108, 144, 180)
    conditions: tuple[tuple[str, int], ...] = (("NM", 6), ("BG", 2), ("CL", 2))
    frames: int = 60
    height: int = 64
    width: int = 44
    seed: int = 0
    noise: float = 0.002


def synthetic_corpus(spec: CorpusSpec) -> list[SilhouetteSequence]:
    """Render every (subject, condition sequence, view) of a corpus, deterministically."""
    seqs = []
    for si in range(spec.subjects):
        params = generate_subject(spec.seed * 100_003 + si)
        sid = f"{si + 1:03d}"
        for cond, count in spec.conditions:
            for n in range(1, count + 1):
                for view in spec.views:
                    key = [spec.seed, si, CONDITIONS.index(cond) if cond in CONDITIONS else 9, n, view]
                    rng = np.random.default_rng(key)
                    seqs.append(render_sequence(
                        params, view, f"{cond}-{n:02d}", spec.frames, spec.height, spec.width,
                        noise_seed=int(rng.integers(2**31)), noise=spec.noise,
                        start_phase=float(rng.uniform(0, params.period)),
                        amp_jitter=float(rng.uniform(0.93, 1.07)),
                        subject=sid, source=f"synthetic:{sid}/{cond}-{n:02d}/{view:03d}",
                    ))
    return seqs


def two_regime_corpus(sequences: int = 12, k: int = 8, split: int = 5, frames: int = 48, height: int = 64,
                      width: int = 44, seed: int = 0) -> list[np.ndarray]:
    """Stripe corpus where parts ``1..split`` share one motion signature and the rest another.

    Each part band is filled row-major up to a foreground fraction that follows
    the regime's sinusoid plus a small per-part perturbation.
    """
    rng = np.random.default_rng(seed)
    band = height // k
    regimes = [(0.55, 0.05, 24.0), (0.30, 0.20, 12.0)]  # (mean, amplitude, period)
    out = []
    for _ in range(sequences):
        phase = rng.uniform(0, 2 * np.pi)
        seq = np.zeros((frames, height, width), dtype=np.uint8)
        for j in range(k):
            mean, amp, period = regimes[0 if j < split else 1]
            mean += rng.normal(0, 0.01)
            amp *= 1 + rng.normal(0, 0.05)
            t = np.arange(frames)
            frac = np.clip(mean + amp * np.sin(2 * np.pi * t / period + phase), 0, 1)
            cells = band * width
            for ti, f in enumerate(frac):
                flat = np.zeros(cells, dtype=np.uint8)
                flat[:int(round(f * cells))] = 1
                seq[ti, j * band:(j + 1) * band] = flat.reshape(band, width)
        out.append(seq)
    return out


# --- disk corpus ----------------------------------------------------------

@dataclass
class DatasetIndex:
    sequences: list[SilhouetteSequence] = field(default_factory=list)
    warnings: int = 0
    problems: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def subjects(self) -> list[str]:
        return sorted({s.subject for s in self.sequences})

    def by_subject(self) -> dict[str, list[SilhouetteSequence]]:
        out: dict[str, list[SilhouetteSequence]] = {}
        for s in self.sequences:
            out.setdefault(s.subject, []).append(s)
        return out

    def filter(self, pred) -> "DatasetIndex":
        return DatasetIndex([s for s in self.sequences if pred(s)], self.warnings, list(self.problems))


def _parse_view(name: str) -> int:
    try:
        return int(name)
    except ValueError:
        raise DataError(f"view directory {name!r} is not an integer angle") from None


def read_frame(path: Path) -> np.ndarray:
    """Load a grayscale frame and binarize at half its maximum value."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    top = arr.max()
    if top == 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return (arr >= 0.5 * top).astype(np.uint8)


def load_dataset(root) -> DatasetIndex:
    """Index ``root/<subject>/<condition>/<view>/<frames>``; bad frames and empty sequences are skipped."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    index = DatasetIndex()
    for subj in sorted(p for p in root.iterdir() if p.is_dir()):
        for cond in sorted(p for p in subj.iterdir() if p.is_dir()):
            for view_dir in sorted(p for p in cond.iterdir() if p.is_dir()):
                files = sorted(f for f in view_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
                frames = []
                for f in files:
                    try:
                        frames.append(read_frame(f))
                    except (OSError, UnidentifiedImageError, ValueError) as exc:
                        index.warnings += 1
                        index.problems.append(f"unreadable frame {f}: {exc}")
                if frames and len({fr.shape for fr in frames}) > 1:
                    index.warnings += 1
                    index.problems.append(f"mixed frame sizes in {view_dir}")
                    continue
                if not frames:
                    index.warnings += 1
                    index.problems.append(f"empty sequence {view_dir}")
                    continue
                index.sequences.append(SilhouetteSequence(
                    np.stack(frames), subj.name, cond.name.upper(), _parse_view(view_dir.name), str(view_dir)))
    if index.warnings:
        log.warning("skipped %d unreadable frames or sequences under %s", index.warnings, root)
    return index


def write_dataset(sequences: Iterable[SilhouetteSequence], root) -> int:
    """Write sequences as 8-bit PNG frames in the directory layout ``load_dataset`` reads."""
    root = Path(root)
    n = 0
    for seq in sequences:
        d = root / seq.subject / seq.condition.lower() / f"{seq.view:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            Image.fromarray(frame * 255).save(d / f"{t:04d}.png")
        n += 1
    return n


def resize_frames(frames: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Box-resample binary frames to ``size = (H, W)`` and re-threshold at 0.5."""
    h, w = size
    if frames.shape[1:] == (h, w):
        return frames
    th, tw = frames.shape[1:]
    if th % h == 0 and tw % w == 0:
        fh, fw = th // h, tw // w
        return (frames.reshape(-1, h, fh, w, fw).mean(axis=(2, 4)) >= 0.5).astype(np.uint8)
    out = [np.asarray(Image.fromarray(f * 255).resize((w, h), Image.BOX)) >= 128 for f in frames]
    return np.stack(out).astype(np.uint8)


# --- sampling -------------------------------------------------------------

def sample_clip(seq: SilhouetteSequence | np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous ``length``-frame window at a uniform start; short sequences wrap cyclically."""
    frames = seq.frames if isinstance(seq, SilhouetteSequence) else np.asarray(seq)
    n = frames.shape[0]
    if n == 0:
        raise ShapeError("cannot sample from an empty sequence")
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return frames[start:start + length]
    start = int(rng.integers(0, n))
    return frames[(start + np.arange(length)) % n]


@dataclass
class Batch:
    clips: np.ndarray  # (B, 1, T, H, W) float32
    labels: np.ndarray  # (B,) int64
    subjects: list[str]


def make_pk_batch(index: DatasetIndex | Sequence[SilhouetteSequence], p: int, k: int, length: int,
                  rng: np.random.Generator, label_of: dict[str, int] | None = None,
                  size: Sequence[int] | None = None) -> Batch:
    """P distinct subjects with K clips each; sequences are reused when a subject has fewer than K."""
    seqs = index.sequences if isinstance(index, DatasetIndex) else list(index)
    groups: dict[str, list[SilhouetteSequence]] = {}
    for s in seqs:
        groups.setdefault(s.subject, []).append(s)
    subjects = sorted(groups)
    if len(subjects) < p:
        raise ConfigError(f"P={p} subjects requested but only {len(subjects)} available")
    if label_of is None:
        label_of = {s: i for i, s in enumerate(subjects)}
    chosen = rng.choice(len(subjects), size=p, replace=False)
    clips, labels, names = [], [], []
    for ci in chosen:
        sid = subjects[ci]
        pool = groups[sid]
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        for pi in picks:
            clip = sample_clip(pool[pi], length, rng)
            if size is not None:
                clip = resize_frames(clip, size)
            clips.append(clip)
            labels.append(label_of[sid])
            names.append(sid)
    arr = np.stack(clips).astype(np.float32)[:, None]
    return Batch(arr, np.asarray(labels, dtype=np.int64), names)
