import itertools
from dataclasses import replace

import pytest
import torch

from hstl.checkpoint import export_state, import_state, key_map
from hstl.config import ArmeStage, HstlConfig
from hstl.errors import ConfigError, DataError, NumericError, ShapeError
from hstl.gradcheck import numerical_gradient, relative_error
from hstl.hierarchy import PartitionHierarchy, flat_hierarchy
from hstl.losses import combined_loss
from hstl.network import build_model, pad_frames, spatial_downsample

SMALL_H = PartitionHierarchy.from_groups(4, [[[1, 2, 3, 4]], [[1, 2, 3], [4]], [[1], [2, 3], [4]],
                                             [[1], [2], [3], [4]]])
MICRO = HstlConfig(hierarchy=SMALL_H, arme=(ArmeStage(1, (1, 2)), ArmeStage(2, (2, 2)), ArmeStage(3, (2, 4))),
                   embedding_dim=3, input_size=(16, 8), clip_length=6)
TINY = replace(MICRO, hierarchy=flat_hierarchy(8), input_size=(16, 8),
               arme=(ArmeStage(1, (1, 4)), ArmeStage(2, (4, 4)), ArmeStage(3, (4, 8))), embedding_dim=8)


@pytest.fixture(scope="module")
def default_model():
    return build_model(HstlConfig(), seed=0, num_classes=74)


def test_default_shape_audit(default_model):
    x = torch.rand(2, 1, 30, 64, 44).round()
    with torch.no_grad():
        feats = default_model.features(x)
        emb, logits = default_model(x)
    assert feats["fta"].shape == (2, 64, 10, 64, 44)
    assert feats["level3"].shape == (2, 128, 10, 64, 44)
    assert emb.shape == (2, 128, 17)
    assert logits.shape == (2, 17, 74)
    assert default_model.num_strips == HstlConfig().strip_count() == 17


def test_default_kernels_and_channels(default_model):
    convs = {k: v for k, v in key_map(default_model).items() if k.endswith(".kernel") and ".conv" in k}
    assert all(tuple(v.shape[2:]) == (3, 3, 3) for v in convs.values())
    assert convs["level1.region1.conv1.kernel"].shape[:2] == (32, 1)
    assert convs["level2.region2.conv2.kernel"].shape[:2] == (64, 32)
    assert convs["level3.region4.conv2.kernel"].shape[:2] == (128, 128)
    assert "level3.region5.conv1.kernel" not in convs


def test_strip_order_follows_pipeline(default_model):
    x = torch.rand(1, 1, 6, 64, 44)
    with torch.no_grad():
        feats = default_model.features(x)
        strips = default_model.features_list(x)
    expected = ([feats["astp.level4"][:, :, j] for j in range(8)]
                + [feats["astp.level3"][:, :, j] for j in range(4)]
                + [feats["astp.level2_fta"][:, :, j] for j in range(2)]
                + [feats["astp.level2"][:, :, j] for j in range(2)]
                + [feats["astp.level1"][:, :, 0]])
    assert len(strips) == 17
    assert all(torch.equal(a, b) for a, b in zip(strips, expected))


def test_two_level_config_builds_and_runs():
    h = PartitionHierarchy.from_groups(4, [[[1, 2, 3, 4]], [[1], [2], [3], [4]]])
    cfg = HstlConfig(hierarchy=h, arme=(ArmeStage(1, (1, 3)),), fta_level=None, embedding_dim=5,
                     input_size=(8, 4), clip_length=3)
    model = build_model(cfg)
    emb, logits = model(torch.rand(2, 1, 3, 8, 4))
    assert emb.shape == (2, 5, 5) and logits is None


def test_fta_at_last_level_rejected():
    with pytest.raises(ConfigError, match="fta_level"):
        build_model(replace(HstlConfig(), fta_level=4))


def test_fta_missing_rejected_for_deep_hierarchy():
    with pytest.raises(ConfigError, match="fta_level"):
        HstlConfig(fta_level=None).validate()


def test_broken_channel_chain_rejected():
    bad = replace(HstlConfig(), arme=(ArmeStage(1, (1, 32)), ArmeStage(2, (16, 64)), ArmeStage(3, (64, 128))))
    with pytest.raises(ConfigError, match=r"arme\[1\]"):
        bad.validate()


def test_seeded_build_is_deterministic():
    a, b = build_model(TINY, seed=3), build_model(TINY, seed=3)
    x = torch.rand(2, 1, 6, 16, 8, generator=torch.Generator().manual_seed(0))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    with torch.no_grad():
        assert torch.equal(a(x)[0], b(x)[0])
    c = build_model(TINY, seed=4)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_build_leaves_global_rng_alone():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_model(TINY, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_duplicate_clip_gives_identical_rows():
    model = build_model(TINY)
    x = torch.rand(1, 1, 6, 16, 8)
    with torch.no_grad():
        emb, _ = model(torch.cat([x, x]))
    assert torch.equal(emb[0], emb[1])


def test_frame_permutation_and_level1_tap():
    model = build_model(MICRO, seed=1)
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(1, 1, 6, 16, 8, generator=gen)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        f, fp = model.features(x), model.features(x[:, :, perm])
        assert not torch.equal(f["level3"], fp["level3"])
        # the level-1 pooling tap only sees a temporal max, so reordering its input frames is invisible
        y1 = f["level1"]
        assert torch.equal(model.taps[0](y1), model.taps[0](y1[:, :, perm]))
        assert torch.equal(model.taps[0](y1), f["astp.level1"])


@pytest.mark.parametrize("frames", [3, 6, 7, 12])
def test_strip_layout_independent_of_length(frames):
    model = build_model(MICRO)
    with torch.no_grad():
        emb, _ = model(torch.rand(2, 1, frames, 16, 8))
    assert emb.shape == (2, 3, MICRO.strip_count())


def test_pad_frames_replicates_last():
    x = torch.arange(4.0).view(1, 1, 4, 1, 1)
    padded = pad_frames(x)
    assert padded.flatten().tolist() == [0, 1, 2, 3, 3, 3]
    assert pad_frames(padded) is padded


def test_spatial_downsample_shapes_and_oracle():
    assert spatial_downsample(torch.zeros(1, 3, 2, 64, 44)).shape == (1, 3, 2, 32, 22)
    const = torch.full((1, 1, 2, 4, 4), 0.7)
    assert torch.equal(spatial_downsample(const), torch.full((1, 1, 2, 2, 2), 0.7))
    x = torch.randn(1, 2, 3, 6, 4, generator=torch.Generator().manual_seed(3))
    got = spatial_downsample(x)
    for c, t, i, j in itertools.product(range(2), range(3), range(3), range(2)):
        assert got[0, c, t, i, j] == x[0, c, t, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    with pytest.raises(ShapeError):
        spatial_downsample(torch.zeros(1, 1, 1, 5, 4))


def test_downsample_config_halves_later_maps():
    cfg = replace(MICRO, spatial_downsample_after_level1=True, input_size=(16, 8),
                  hierarchy=PartitionHierarchy.from_groups(4, [[[1, 2, 3, 4]], [[1, 2, 3], [4]],
                                                               [[1], [2, 3], [4]], [[1], [2], [3], [4]]]))
    model = build_model(cfg)
    with torch.no_grad():
        f = model.features(torch.rand(1, 1, 6, 16, 8))
    assert f["level1"].shape[-2:] == (16, 8)
    assert f["level2"].shape[-2:] == (8, 4)


def test_non_finite_input_reports_module_path():
    model = build_model(MICRO)
    x = torch.rand(1, 1, 6, 16, 8)
    x[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="level1"):
        model(x)


def test_bad_input_rank():
    with pytest.raises(ShapeError):
        build_model(MICRO)(torch.rand(1, 2, 6, 16, 8))


def test_grouped_ablation_has_more_parameters_than_flat():
    grouped = build_model(replace(TINY, hierarchy=PartitionHierarchy.from_groups(
        8, [[range(1, 9)], [range(1, 6), range(6, 9)], [[1], range(2, 6), [6, 7], [8]], [[p] for p in range(1, 9)]])))
    flat = build_model(TINY)
    g, f = grouped.parameter_count_by_level(), flat.parameter_count_by_level()
    assert g["level1"] == f["level1"]
    assert g["level2"] == 2 * f["level2"]
    assert g["level3"] == 4 * f["level3"]


def test_checkpoint_keys_round_trip():
    model = build_model(MICRO, seed=0, num_classes=3)
    keys = set(key_map(model))
    assert {"level2.region2.conv1.kernel", "fta.region1.fc2.bias", "astp.level2_fta.region2.p",
            "astp.level4.region4.p", "head.strip12.kernel", "classifier.strip1.kernel"} <= keys
    other = build_model(MICRO, seed=9, num_classes=3)
    import_state(other, export_state(model))
    x = torch.rand(1, 1, 6, 16, 8)
    with torch.no_grad():
        assert torch.equal(model(x)[0], other(x)[0])
    state = export_state(model)
    state.pop("head.strip1.bias")
    with pytest.raises(DataError):
        import_state(other, state)


def test_micro_end_to_end_gradients():
    model = build_model(MICRO, seed=5, num_classes=2).double()
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(4, 1, 6, 16, 8, generator=gen, dtype=torch.float64).round()
    labels = torch.tensor([0, 0, 1, 1])
    params = [p for p in model.parameters()]
    # zero biases put every background voxel exactly on the leaky-ReLU kink; move off it
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.05 * torch.randn(p.shape, generator=gen, dtype=torch.float64))

    def loss():
        emb, logits = model(x)
        return combined_loss(emb, logits, labels)[0]

    grads = torch.autograd.grad(loss(), params)
    worst = max(relative_error(g, numerical_gradient(loss, p, h=1e-4)) for p, g in zip(params, grads))
    assert worst <= 1e-3
