import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab import backbone as B
from refinelab.rerand import (
    LAYER_ABLATION_COLUMNS,
    EmptySurgeryError,
    PolicyError,
    RerandPolicy,
    SnapshotMissingError,
    layer_ablation_presets,
    parse_preset,
    preset,
    rerandomize,
    resolve_policy,
    stage_ablation_presets,
)

DESK = B.BackboneConfig.desk()


@pytest.fixture(scope="module")
def trained():
    reg = B.build_backbone(DESK, 0)
    rng = np.random.default_rng(0)
    for p in reg:
        reg[p] = reg[p] + rng.normal(0, 0.1, reg[p].shape).astype(np.float32)
    return reg


def test_random_policies_leave_unmatched_tensors_alone(trained):
    layers = trained.layer_paths()
    rng = np.random.default_rng(1)
    dists = ("uniform", "normal", "orthogonal", "sparse", "lottery")
    for i in range(50):
        picks = rng.choice(len(layers), size=int(rng.integers(1, 6)), replace=False)
        pol = RerandPolicy(
            tuple(layers[j] for j in picks), dists[i % 5], include_shortcut=True,
            reset_running_stats=bool(i % 2), seed=i,
        )
        work = trained.clone()
        touched = set(rerandomize(work, pol))
        assert touched == {layers[j] for j in picks}
        for p in trained:
            if B.layer_of(p) not in touched:
                assert work[p].tobytes() == trained[p].tobytes()


def test_topmost_on_default_config():
    reg = B.build_backbone(B.BackboneConfig.default(), 0)
    assert resolve_policy(preset("topmost", reg), reg) == ["stage4.block1.conv2", "stage4.block1.bn2"]


def test_topmost_tracks_last_block():
    reg = B.build_backbone(B.BackboneConfig(16, (16, 32, 64, 128), (1, 1, 1, 3), 32), 0)
    assert resolve_policy(preset("topmost", reg), reg) == ["stage4.block3.conv2", "stage4.block3.bn2"]


def test_uniform_redraw_and_bn_reset(trained):
    work = trained.clone()
    rerandomize(work, preset("topmost", work, seed=5))
    w = work["stage4.block1.conv2.weight"]
    assert not np.array_equal(w, trained["stage4.block1.conv2.weight"])
    assert np.abs(w).max() <= np.sqrt(1 / (128 * 9))
    assert np.all(work["stage4.block1.bn2.gamma"] == 1) and np.all(work["stage4.block1.bn2.beta"] == 0)
    assert np.all(work["stage4.block1.bn2.running_mean"] == 0)
    assert np.all(work["stage4.block1.bn2.running_var"] == 1)


def test_keep_running_stats(trained):
    work = trained.clone()
    rerandomize(work, preset("topmost", work, reset_running_stats=False))
    assert np.array_equal(work["stage4.block1.bn2.running_mean"], trained["stage4.block1.bn2.running_mean"])
    assert np.all(work["stage4.block1.bn2.gamma"] == 1)


def test_lottery_restores_snapshot_bit_exact(trained):
    work = trained.clone()
    rerandomize(work, preset("last_stage", work, distribution="lottery"))
    for layer in resolve_policy(preset("last_stage", work), work):
        for p in work.paths_in_layer(layer):
            assert work[p].tobytes() == trained.init_snapshot[p].array.tobytes()


def test_lottery_without_snapshot(trained):
    work = trained.clone(include_snapshot=False)
    with pytest.raises(SnapshotMissingError):
        rerandomize(work, preset("topmost", work, distribution="lottery"))


def test_idempotent_and_order_independent(trained):
    a, b = trained.clone(), trained.clone()
    pol = RerandPolicy(("stage3.*", "stage1.block1.conv1"), "normal", include_shortcut=True, seed=3)
    rerandomize(a, pol)
    rerandomize(a, pol)
    rerandomize(b, pol.with_(selectors=tuple(reversed(pol.selectors))))
    assert a.equals(b)


def test_shortcut_excluded_unless_requested(trained):
    pol = RerandPolicy(("stage4.block1.*",))
    assert not any("shortcut" in p for p in resolve_policy(pol, trained))
    assert "stage4.block1.shortcut.conv" in resolve_policy(pol.with_(include_shortcut=True), trained)


def test_empty_surgery_and_head_selectors(trained):
    with pytest.raises(EmptySurgeryError):
        rerandomize(trained.clone(), RerandPolicy(("stage9.*",)))
    work = trained.clone()
    B.attach_head(work, "linear_classifier", 5, 0)
    with pytest.raises(PolicyError):
        resolve_policy(RerandPolicy(("head.*",)), work)


@pytest.mark.parametrize("sel", ["", "stage4.[conv", "stage]4", "stage 4", "a[[b]]"])
def test_malformed_selectors(sel):
    with pytest.raises(PolicyError):
        RerandPolicy((sel,))


def test_unknown_distribution_and_preset():
    with pytest.raises(PolicyError):
        RerandPolicy(("stage4.*",), "cauchy")
    with pytest.raises(PolicyError):
        preset("everything")
    with pytest.raises(PolicyError):
        preset("stages", stages=[5])


def test_parse_preset_forms():
    assert parse_preset("stages(1,3)").selectors == ("stage1.*", "stage3.*")
    assert parse_preset("stages:24").name == "stages24"
    assert parse_preset("none").is_noop


@given(
    st.lists(st.sampled_from(["stage4.*", "stage1.block1.conv[12]", "stem.?n", "stage3.block1.bn1"]),
             unique=True, max_size=3),
    st.sampled_from(["uniform", "normal", "orthogonal", "sparse", "lottery"]),
    st.booleans(), st.booleans(), st.integers(0, 2**40),
)
@settings(max_examples=50, deadline=None)
def test_text_round_trip(sels, dist, sc, reset, seed):
    pol = RerandPolicy(tuple(sels), dist, sc, reset, seed)
    back = RerandPolicy.from_text(pol.to_text())
    assert (back.selectors, back.distribution, back.include_shortcut, back.reset_running_stats, back.seed) == (
        pol.selectors, pol.distribution, pol.include_shortcut, pol.reset_running_stats, pol.seed)


def test_from_text_errors():
    with pytest.raises(PolicyError):
        RerandPolicy.from_text("policy { }")
    with pytest.raises(PolicyError):
        RerandPolicy.from_text("rerand { colour=red }")
    with pytest.raises(PolicyError):
        RerandPolicy.from_text("rerand { include_shortcut=maybe }")


def test_ablation_preset_families(trained):
    stages = stage_ablation_presets()
    assert len(stages) == 16 and stages[0].is_noop
    layers = layer_ablation_presets()
    assert len(layers) == len(LAYER_ABLATION_COLUMNS) == 11
    for pol in layers:
        assert resolve_policy(pol, trained)
