import numpy as np
import pytest

from refinelab import backbone as B
from refinelab import tensor as T

DESK = B.BackboneConfig.desk()

GOLDEN_DESK_LAYERS = [
    "stem.conv", "stem.bn",
    "stage1.block1.conv1", "stage1.block1.bn1", "stage1.block1.conv2", "stage1.block1.bn2",
    "stage2.block1.conv1", "stage2.block1.bn1", "stage2.block1.conv2", "stage2.block1.bn2",
    "stage2.block1.shortcut.conv", "stage2.block1.shortcut.bn",
    "stage3.block1.conv1", "stage3.block1.bn1", "stage3.block1.conv2", "stage3.block1.bn2",
    "stage3.block1.shortcut.conv", "stage3.block1.shortcut.bn",
    "stage4.block1.conv1", "stage4.block1.bn1", "stage4.block1.conv2", "stage4.block1.bn2",
    "stage4.block1.shortcut.conv", "stage4.block1.shortcut.bn",
]


@pytest.fixture(scope="module")
def reg():
    return B.build_backbone(DESK, 0)


def test_golden_layer_paths(reg):
    assert reg.layer_paths() == GOLDEN_DESK_LAYERS
    assert B.golden_layer_paths(DESK) == GOLDEN_DESK_LAYERS


def test_stage1_has_no_shortcut_when_widths_match():
    wide = B.BackboneConfig(8, (16, 16, 32, 32), (1, 1, 1, 1), 32)
    layers = B.build_backbone(wide, 0).layer_paths()
    assert "stage1.block1.shortcut.conv" in layers
    assert not any(p.startswith("stage1") and "shortcut" in p for p in B.golden_layer_paths(DESK))


def test_extra_blocks_have_no_shortcut():
    cfg = B.BackboneConfig(16, (16, 32, 64, 128), (1, 1, 1, 2), 32)
    layers = B.build_backbone(cfg, 0).layer_paths()
    assert "stage4.block2.conv2" in layers
    assert "stage4.block2.shortcut.conv" not in layers


def test_conv_shapes_and_bn_defaults(reg):
    assert reg["stem.conv.weight"].shape == (16, 3, 3, 3)
    assert reg["stage4.block1.conv2.weight"].shape == (128, 128, 3, 3)
    assert reg["stage4.block1.shortcut.conv.weight"].shape == (128, 64, 1, 1)
    assert np.all(reg["stage3.block1.bn2.gamma"] == 1) and np.all(reg["stage3.block1.bn2.running_var"] == 1)
    assert all(reg[p].dtype == np.float32 for p in reg)


def test_stage_spatial_extents():
    assert DESK.stage_spatial() == [16, 8, 4, 2]
    assert B.BackboneConfig.default().stage_spatial() == [32, 16, 8, 4]


def test_stage_outputs_shapes(reg):
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32)
    outs = B.forward_stage_outputs(reg, x)
    assert [o.shape for o in outs] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]
    assert B.forward_features(reg, x).shape == (2, 128)


def test_build_is_deterministic_and_seeded():
    a, b, c = B.build_backbone(DESK, 3), B.build_backbone(DESK, 3), B.build_backbone(DESK, 4)
    assert a.equals(b) and a.digest() == b.digest()
    assert not a.equals(c)


def test_snapshot_taken_at_build(reg):
    assert reg.init_snapshot is not None
    assert list(reg.init_snapshot) == list(reg)


def test_eval_forward_does_not_mutate(reg):
    work = reg.clone()
    x = np.random.default_rng(1).normal(size=(4, 3, 32, 32)).astype(np.float32)
    f1 = B.forward_features(work, x).data
    f2 = B.forward_features(work, x).data
    assert work.equals(reg)
    assert f1.tobytes() == f2.tobytes()


def test_eval_output_is_batch_independent(reg):
    x = np.random.default_rng(2).normal(size=(5, 3, 32, 32)).astype(np.float32)
    full = B.forward_features(reg, x).data
    one = B.forward_features(reg, x[2:3]).data
    assert np.allclose(full[2:3], one, atol=1e-5)


def test_train_forward_updates_running_stats(reg):
    work = reg.clone()
    x = np.random.default_rng(3).normal(size=(4, 3, 32, 32)).astype(np.float32)
    B.forward_features(work, x, train=True)
    assert not np.array_equal(work["stem.bn.running_mean"], reg["stem.bn.running_mean"])
    assert np.array_equal(work["stem.conv.weight"], reg["stem.conv.weight"])


def test_zero_input_gives_zero_features(reg):
    # no biases anywhere and fresh BN maps 0 to 0, so zeros stay zeros
    f = B.forward_features(reg, np.zeros((1, 3, 32, 32), np.float32)).data
    assert np.all(f == 0)


def test_hand_traced_constant_input():
    # every conv zeroed, so only the last BN shift reaches the output
    r = B.build_backbone(DESK, 0)
    for p in r:
        if r.role(p) == "conv_weight":
            r[p] = np.zeros_like(r[p])
    r["stage4.block1.bn2.beta"][...] = 0.5
    f = B.forward_features(r, np.ones((1, 3, 32, 32), np.float32)).data
    assert np.allclose(f, 0.5)


def test_heads_attach_and_detach(reg):
    work = reg.clone()
    B.attach_head(work, "linear_classifier", 5, 1)
    assert work.head_kind() == "linear_classifier"
    assert work["head.fc.weight"].shape == (5, 128)
    with pytest.raises(B.HeadError):
        B.attach_head(work, "linear_classifier", 5, 1)
    B.detach_head(work)
    assert work.head_kind() is None
    B.attach_head(work, "projection_mlp", 32, 1)
    assert work["head.fc1.weight"].shape == (128, 128) and work["head.fc2.weight"].shape == (32, 128)
    B.detach_head(work)
    B.attach_head(work, "aux_probe", 5, 1, stage=2)
    assert work.probe_stage() == 2 and work["head.probe_stage2.weight"].shape == (5, 32)
    B.detach_head(work)
    with pytest.raises(B.HeadError):
        B.detach_head(work)
    with pytest.raises(B.HeadError):
        B.attach_head(work, "mystery", 5, 1)


def test_stage4_probe_and_classifier_share_init(reg):
    a, b = reg.clone(), reg.clone()
    B.attach_head(a, "linear_classifier", 5, 8)
    B.attach_head(b, "aux_probe", 5, 8, stage=4)
    assert a["head.fc.weight"].tobytes() == b["head.probe_stage4.weight"].tobytes()


def test_head_logits(reg):
    work = reg.clone()
    B.attach_head(work, "linear_classifier", 3, 0)
    feats = T.Tensor(np.ones((2, 128), np.float32))
    logits = B.forward_head(work, feats).data
    assert np.allclose(logits, np.ones((2, 128)) @ work["head.fc.weight"].T)


def test_input_checks(reg):
    with pytest.raises(T.ShapeError):
        B.forward_features(reg, np.zeros((1, 1, 32, 32), np.float32))
    with pytest.raises(T.ShapeError):
        B.forward_features(reg, np.zeros((1, 3, 8, 8), np.float32))
    with pytest.raises(ValueError):
        B.BackboneConfig(16, (16, 32), (1, 1), 32)


def test_registry_errors(reg):
    work = reg.clone()
    with pytest.raises(B.RegistryError):
        work.add("stem.conv.weight", np.zeros(1), "conv_weight")
    with pytest.raises(B.RegistryError):
        work.add("x.y", np.zeros(1), "bogus")


def test_infer_config_round_trip(reg):
    assert reg.infer_config(32) == DESK
    cfg = B.BackboneConfig(8, (8, 16, 16, 32), (2, 1, 1, 3), 32)
    assert B.build_backbone(cfg, 0).infer_config(32) == cfg
