from dataclasses import astuple, fields

import numpy as np
import pytest
from scipy import stats

from hstl.data import (
    PARAM_RANGES,
    CorpusSpec,
    DatasetIndex,
    SilhouetteSequence,
    generate_subject,
    load_dataset,
    make_pk_batch,
    render_sequence,
    resize_frames,
    sample_clip,
    synthetic_corpus,
    write_dataset,
)
from hstl.errors import ConfigError, DataError, ShapeError
from hstl.hierarchy import summarize_sequence
from hstl.losses import triplet_batch_all


def test_same_seed_same_params():
    assert generate_subject(7) == generate_subject(7)


def test_hundred_seeds_pairwise_distinct():
    vecs = {tuple(generate_subject(s).vector()) for s in range(1, 101)}
    assert len(vecs) == 100


def test_ranges_respected_over_10k_seeds():
    lows = {name: np.inf for name in PARAM_RANGES}
    highs = {name: -np.inf for name in PARAM_RANGES}
    for seed in range(10_000):
        p = generate_subject(seed)
        for name in PARAM_RANGES:
            v = getattr(p, name)
            lows[name] = min(lows[name], v)
            highs[name] = max(highs[name], v)
        assert p.period >= 4
    for name, (lo, hi) in PARAM_RANGES.items():
        if name == "period":  # rounded to whole frames
            lo, hi = round(lo), round(hi)
        assert lo <= lows[name] and highs[name] <= hi
    amps = [f.name for f in fields(generate_subject(0)) if f.name.endswith("_amp")]
    assert all(lows[a] >= 0 for a in amps)


def test_render_is_deterministic_and_binary():
    p = generate_subject(3)
    a = render_sequence(p, 36, "BG-01", frames=8, noise_seed=5)
    b = render_sequence(p, 36, "BG-01", frames=8, noise_seed=5)
    assert np.array_equal(a.frames, b.frames)
    assert a.frames.shape == (8, 64, 44)
    assert set(np.unique(a.frames)) <= {0, 1}
    c = render_sequence(p, 36, "BG-01", frames=8, noise_seed=6)
    assert not np.array_equal(a.frames, c.frames)


def test_one_stride_period_repeats():
    p = generate_subject(11)
    period = int(p.period)
    seq = render_sequence(p, 90, "NM", frames=period + 1, noise=0.0)
    diff = np.count_nonzero(seq.frames[0] != seq.frames[period])
    assert diff <= 2  # only pixels straddling the anti-aliasing threshold may flip


def test_coat_area_exceeds_normal():
    for seed in range(5):
        p = generate_subject(seed)
        nm = render_sequence(p, 90, "NM", frames=6, noise=0.0)
        cl = render_sequence(p, 90, "CL", frames=6, noise=0.0)
        assert cl.frames.sum() > nm.frames.sum()


def test_bag_adds_foreground():
    p = generate_subject(2)
    nm = render_sequence(p, 0, "NM", frames=4, noise=0.0)
    bg = render_sequence(p, 0, "BG", frames=4, noise=0.0)
    assert bg.frames.sum() > nm.frames.sum()


def test_invalid_render_size():
    with pytest.raises(ShapeError):
        render_sequence(generate_subject(0), 0, frames=0)


def test_sequence_rejects_non_binary():
    with pytest.raises(ShapeError):
        SilhouetteSequence(np.full((2, 4, 4), 2), "s", "NM-01", 0)


def test_same_subject_more_self_similar_across_views():
    spec = CorpusSpec(subjects=5, views=(0, 90, 180), conditions=(("NM", 1),), frames=40)
    seqs = synthetic_corpus(spec)
    summ = {(s.subject, s.view): np.concatenate([p.vector for p in summarize_sequence(s.frames, 8)])
            for s in seqs}
    within, across = [], []
    keys = list(summ)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            d = np.linalg.norm(summ[a] - summ[b])
            (within if a[0] == b[0] else across).append(d)
    assert np.mean(within) < np.mean(across)


def test_corpus_layout():
    spec = CorpusSpec(subjects=2, views=(0, 90), conditions=(("NM", 2), ("CL", 1)), frames=3)
    seqs = synthetic_corpus(spec)
    assert len(seqs) == 2 * 2 * 3
    assert {s.condition for s in seqs} == {"NM-01", "NM-02", "CL-01"}
    assert seqs[0].condition_type == "NM"
    again = synthetic_corpus(spec)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(seqs, again))


def test_empty_root_gives_empty_index(tmp_path):
    idx = load_dataset(tmp_path)
    assert len(idx) == 0 and idx.warnings == 0


def test_missing_root_raises(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "absent")


def test_write_then_load_round_trip(tmp_path):
    seqs = synthetic_corpus(CorpusSpec(subjects=2, views=(0, 90), conditions=(("NM", 1), ("BG", 1)), frames=4))
    write_dataset(seqs, tmp_path)
    idx = load_dataset(tmp_path)
    assert len(idx) == len(seqs) and idx.warnings == 0
    loaded = {(s.subject, s.condition, s.view): s for s in idx.sequences}
    for s in seqs:
        assert np.array_equal(loaded[(s.subject, s.condition, s.view)].frames, s.frames)


def test_corrupt_and_empty_inputs_counted(tmp_path):
    seqs = synthetic_corpus(CorpusSpec(subjects=1, views=(0, 36, 72), conditions=(("NM", 1),), frames=3))
    write_dataset(seqs, tmp_path)
    # two garbage frames in one sequence, one sequence with only garbage, one empty directory
    (tmp_path / "001/nm-01/000/0001.png").write_bytes(b"not an image")
    (tmp_path / "001/nm-01/000/0009.png").write_bytes(b"")
    for f in (tmp_path / "001/nm-01/036").iterdir():
        f.write_bytes(b"junk")
    (tmp_path / "001/nm-01/144").mkdir()
    idx = load_dataset(tmp_path)
    assert len(idx) == 2
    assert idx.warnings == 2 + 3 + 1 + 1
    kept = {s.view: s for s in idx.sequences}
    assert len(kept[0]) == 2 and len(kept[72]) == 3


def test_grayscale_threshold_is_half_of_frame_max(tmp_path):
    from PIL import Image
    d = tmp_path / "s1" / "nm-01" / "000"
    d.mkdir(parents=True)
    Image.fromarray(np.array([[0, 49, 50, 100]], dtype=np.uint8)).save(d / "0.png")
    (seq,) = load_dataset(tmp_path).sequences
    assert seq.frames[0].tolist() == [[0, 0, 1, 1]]


def test_resize_box_filter():
    frames = np.zeros((1, 4, 4), dtype=np.uint8)
    frames[0, :2, :2] = 1
    frames[0, 2, 2] = 1
    assert resize_frames(frames, (2, 2))[0].tolist() == [[1, 0], [0, 0]]


def test_clip_exact_and_wrap():
    seq = np.arange(30)[:, None, None]
    rng = np.random.default_rng(0)
    assert sample_clip(seq, 30, rng).ravel().tolist() == list(range(30))
    short = np.arange(10)[:, None, None]
    clip = sample_clip(short, 30, rng).ravel()
    assert len(clip) == 30
    assert all((b - a) % 10 == 1 for a, b in zip(clip, clip[1:]))


def test_clip_starts_uniform_chi_square():
    seq = np.arange(100)[:, None, None]
    rng = np.random.default_rng(1)
    starts = [int(sample_clip(seq, 30, rng)[0, 0, 0]) for _ in range(1000)]
    counts = np.bincount(starts, minlength=71)
    assert len(counts) == 71
    assert stats.chisquare(counts).pvalue > 0.01


def _toy_index(subjects=4, per_subject=2):
    rng = np.random.default_rng(0)
    return DatasetIndex([SilhouetteSequence(rng.integers(0, 2, (5, 8, 4)), f"s{i}", f"NM-0{j + 1}", 0)
                         for i in range(subjects) for j in range(per_subject)])


def test_pk_batch_layout():
    batch = make_pk_batch(_toy_index(), 3, 4, 6, np.random.default_rng(0))
    assert batch.clips.shape == (12, 1, 6, 8, 4)
    assert batch.clips.dtype == np.float32
    values, counts = np.unique(batch.labels, return_counts=True)
    assert len(values) == 3 and set(counts) == {4}


def test_pk_minimal_batch_ce_only():
    batch = make_pk_batch(_toy_index(), 2, 1, 3, np.random.default_rng(0))
    assert len(batch.labels) == 2
    import torch
    with pytest.raises(ShapeError):
        triplet_batch_all(torch.zeros(2, 3, 1), torch.as_tensor(batch.labels))


def test_pk_too_few_subjects():
    with pytest.raises(ConfigError):
        make_pk_batch(_toy_index(subjects=2), 3, 2, 3, np.random.default_rng(0))


def test_pk_deterministic_given_seed():
    a = make_pk_batch(_toy_index(), 2, 2, 4, np.random.default_rng(5))
    b = make_pk_batch(_toy_index(), 2, 2, 4, np.random.default_rng(5))
    assert np.array_equal(a.clips, b.clips) and np.array_equal(a.labels, b.labels)
