"""Architecture, fusion behaviour, init determinism, checkpoint format."""

import numpy as np
import pytest
import torch

from atlasseg.network import (
    ALL_FUSION_POSITIONS,
    ArchitectureConfig,
    CheckpointError,
    MultiScaleAttentionFusion,
    UNetBranch,
    build_model,
    fusion_position_ids,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

TINY = ArchitectureConfig(base_channels_seg=8, base_channels_atlas=4)


def tiny_inputs(batch=1, edge=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(batch, 1, edge, edge, edge, generator=g)
    a_img = torch.rand(batch, 1, edge, edge, edge, generator=g)
    a_lab = torch.randint(0, 8, (batch, 1, edge, edge, edge), generator=g).float() / 7.0
    return img, a_img, a_lab


def test_position_ids():
    assert fusion_position_ids(4) == ALL_FUSION_POSITIONS
    assert ALL_FUSION_POSITIONS == ("E1", "E2", "E3", "E4", "B", "D4", "D3", "D2", "D1")
    assert fusion_position_ids(2) == ("E1", "E2", "B", "D2", "D1")


def test_stage_shape_schedule():
    cfg = TINY
    shapes = cfg.stage_shapes(32)
    assert shapes == {
        "E1": (8, 32), "E2": (16, 16), "E3": (32, 8), "E4": (64, 4),
        "B": (128, 2),
        "D4": (64, 4), "D3": (32, 8), "D2": (16, 16), "D1": (8, 32),
    }
    chans = cfg.stage_channels(cfg.base_channels_seg)
    assert chans == {
        "E1": 8, "E2": 16, "E3": 32, "E4": 64, "B": 128,
        "D4": 64, "D3": 32, "D2": 16, "D1": 8,
    }
    with pytest.raises(ValueError):
        cfg.stage_shapes(24)  # not divisible by 2**stages


def test_forward_shapes_and_probabilities():
    model = build_model(TINY, seed=0)
    model.eval()
    img, a_img, a_lab = tiny_inputs()
    with torch.no_grad():
        out = model(img, a_img, a_lab)
    assert out.shape == (1, 8, 32, 32, 32)
    sums = out.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    assert (out >= 0).all()


def test_capture_matches_schedule():
    model = build_model(TINY, seed=0)
    model.eval()
    img, a_img, a_lab = tiny_inputs()
    captured = {}
    with torch.no_grad():
        model(img, a_img, a_lab, capture=captured)
    shapes = TINY.stage_shapes(32)
    for pos in ALL_FUSION_POSITIONS:
        c, e = shapes[pos]
        assert captured[("seg", pos)].shape == (1, c, e, e, e), pos
        ca = TINY.stage_channels(TINY.base_channels_atlas)[pos]
        assert captured[("atlas", pos)].shape == (1, ca, e, e, e), pos


def test_msa_attention_range_and_forced_value():
    fusion = MultiScaleAttentionFusion(8, 4)
    torch.manual_seed(0)
    f_s = torch.rand(2, 8, 8, 8, 8)
    f_a = torch.rand(2, 4, 8, 8, 8)
    att = fusion.attention(f_s, f_a)
    assert att.shape == (2, 1, 8, 8, 8)
    assert (att > 0).all() and (att < 1).all()

    # zero the merge conv: sigmoid(0) = 0.5 everywhere, exactly
    with torch.no_grad():
        fusion.merge.weight.zero_()
        fusion.merge.bias.zero_()
    att = fusion.attention(f_s, f_a)
    assert torch.equal(att, torch.full_like(att, 0.5))
    out = fusion(f_s, f_a)
    assert torch.equal(out, 0.5 * f_s)


def test_msa_channel_width_split():
    fusion = MultiScaleAttentionFusion(8, 4)
    # four kernel sizes, each path emits a quarter of the branch width
    assert [p.conv.kernel_size[0] for p in fusion.seg_paths] == [1, 3, 5, 7]
    for path in fusion.seg_paths:
        assert path.conv.out_channels == 2
    for path in fusion.atlas_paths:
        assert path.conv.out_channels == 1
    # merge sees both concatenated stacks
    assert fusion.merge.in_channels == 8 + 4
    assert fusion.merge.out_channels == 1
    with pytest.raises(ValueError):
        MultiScaleAttentionFusion(6, 4)  # width not divisible by 4


def test_fusion_kind_none_ignores_atlas():
    cfg = ArchitectureConfig(
        base_channels_seg=8, base_channels_atlas=4, fusion_kind="none"
    )
    model = build_model(cfg, seed=0)
    model.eval()
    img, a_img, a_lab = tiny_inputs(seed=1)
    _, b_img, b_lab = tiny_inputs(seed=2)
    with torch.no_grad():
        out1 = model(img, a_img, a_lab)
        out2 = model(img, b_img, b_lab)
    assert torch.equal(out1, out2)
    assert not model.needs_atlas


def test_pure_unet_has_no_atlas_parameters():
    cfg = ArchitectureConfig(
        base_channels_seg=8, base_channels_atlas=4,
        fusion_kind="none", atlas_branch=False,
    )
    model = build_model(cfg, seed=0)
    keys = set(model.state_dict())
    assert not any(k.startswith("atlas") for k in keys)
    assert not any(k.startswith("fusions") for k in keys)
    img, _, _ = tiny_inputs()
    model.eval()
    with torch.no_grad():
        out = model(img)
    assert out.shape == (1, 8, 32, 32, 32)


def test_self_attention_variant_runs_without_atlas():
    cfg = ArchitectureConfig(
        base_channels_seg=8, base_channels_atlas=4,
        fusion_kind="msa", atlas_branch=False,
    )
    model = build_model(cfg, seed=0)
    model.eval()
    for fusion in model.fusions.values():
        assert fusion.atlas_paths is None
    img, _, _ = tiny_inputs()
    with torch.no_grad():
        out = model(img)
    assert out.shape == (1, 8, 32, 32, 32)


@pytest.mark.parametrize("kind", ["concat", "sa"])
def test_other_fusion_kinds_forward(kind):
    cfg = ArchitectureConfig(
        base_channels_seg=8, base_channels_atlas=4,
        fusion_kind=kind, fusion_positions=("E1", "B", "D1"),
    )
    model = build_model(cfg, seed=0)
    model.eval()
    img, a_img, a_lab = tiny_inputs()
    with torch.no_grad():
        out = model(img, a_img, a_lab)
    assert out.shape == (1, 8, 32, 32, 32)
    assert model.needs_atlas


def test_fusion_positions_subset():
    cfg = ArchitectureConfig(
        base_channels_seg=8, base_channels_atlas=4, fusion_positions=("E1",)
    )
    model = build_model(cfg, seed=0)
    assert set(model.fusions) == {"E1"}
    cfg_full = TINY
    model_full = build_model(cfg_full, seed=0)
    assert set(model_full.fusions) == set(ALL_FUSION_POSITIONS)


def test_config_validation():
    with pytest.raises(ValueError):
        ArchitectureConfig(fusion_kind="bilinear")
    with pytest.raises(ValueError):
        ArchitectureConfig(fusion_positions=("E9",))
    with pytest.raises(ValueError):
        ArchitectureConfig(base_channels_seg=0)
    with pytest.raises(ValueError):
        # msa needs quarter-splittable widths at every fused stage
        ArchitectureConfig(base_channels_seg=6, fusion_kind="msa")


def test_init_is_seed_deterministic():
    a = build_model(TINY, seed=3)
    b = build_model(TINY, seed=3)
    c = build_model(TINY, seed=4)
    sda, sdb, sdc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sda[k], sdb[k]) for k in sda)
    assert any(not torch.equal(sda[k], sdc[k]) for k in sda)


def test_unet_branch_parameter_count_analytic():
    # hand count for a one-stage branch, double-conv blocks only
    c = 4
    branch = UNetBranch(in_channels=1, base=c, num_stages=1)

    def dconv(cin, cout):
        conv1 = cin * cout * 27 + cout
        conv2 = cout * cout * 27 + cout
        bn = 2 * (2 * cout)  # weight + bias, twice
        prelu = 2
        return conv1 + conv2 + bn + prelu

    want = (
        dconv(1, c)              # stem
        + (c * c * 8 + c)        # strided 2x2x2 down conv
        + dconv(c, 2 * c)        # encoder stage
        + (2 * c * c * 8 + c)    # transpose conv back up
        + dconv(2 * c, c)        # decoder stage after skip concat
    )
    got = sum(p.numel() for p in branch.parameters())
    assert got == want


def test_parameter_count_helper():
    model = build_model(TINY, seed=0)
    assert parameter_count(TINY) == sum(p.numel() for p in model.parameters())
    # the atlas-free unet is strictly smaller
    unet_cfg = ArchitectureConfig(base_channels_seg=8, base_channels_atlas=4,
                                  fusion_kind="none", atlas_branch=False)
    assert parameter_count(unet_cfg) < parameter_count(TINY)


# ------------------------------------------------------------ checkpoints --


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = build_model(TINY, seed=7)
    model.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded, cfg = load_checkpoint(path)
    loaded.eval()
    assert cfg == TINY
    sd0, sd1 = model.state_dict(), loaded.state_dict()
    assert set(sd0) == set(sd1)
    for k in sd0:
        assert torch.equal(sd0[k], sd1[k]), k
    img, a_img, a_lab = tiny_inputs(seed=9)
    with torch.no_grad():
        assert torch.equal(model(img, a_img, a_lab), loaded(img, a_img, a_lab))


def test_checkpoint_resave_identical_bytes(tmp_path):
    model = build_model(TINY, seed=7)
    model.eval()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    loaded, _ = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    model = build_model(TINY, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    bad.write_bytes(blob[:-17])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_extreme_inputs_stay_finite():
    model = build_model(TINY, seed=0)
    model.eval()
    img = torch.full((1, 1, 32, 32, 32), 1.0)
    a_img = torch.zeros(1, 1, 32, 32, 32)
    a_lab = torch.ones(1, 1, 32, 32, 32)
    with torch.no_grad():
        out = model(img, a_img, a_lab)
    assert torch.isfinite(out).all()
