import pytest

from refinelab.backbone import BackboneConfig, build_backbone
from refinelab.config import DEFAULTS, ConfigError, int_list, load_config, parse_config, str_list


def test_empty_config_is_all_defaults():
    cfg = parse_config("")
    assert cfg.values == DEFAULTS
    assert cfg.backbone() == BackboneConfig.desk()
    assert cfg.eval_params().T == 600 and cfg.shots() == [1, 5]


def test_finetune_defaults():
    ft = parse_config("").finetune()
    assert (ft.steps, ft.lr, ft.momentum, ft.weight_decay, ft.augment, ft.milestones) == (100, 0.01, 0.9, 1e-3, False, ())


def test_pretrain_schedule_from_text():
    pt = parse_config("[pretrain]\nepochs = 12\nmilestones = 0.5\n").pretrain()
    assert pt.epochs == 12 and pt.milestones == (0.5,)


def test_overrides_win_and_are_typed():
    cfg = parse_config("[eval]\nT = 50\n", ["eval.T=7", "rerand.include_shortcut=yes", "finetune.lr=0.5"])
    assert cfg.get("eval.T") == 7 and cfg.get("rerand.include_shortcut") is True and cfg.get("finetune.lr") == 0.5
    assert cfg.overrides == ("eval.T=7", "rerand.include_shortcut=yes", "finetune.lr=0.5")


@pytest.mark.parametrize("text, overrides", [
    ("[mystery]\na = 1\n", []),
    ("[eval]\nshots_per_class = 2\n", []),
    ("[eval]\nT = many\n", []),
    ("[rerand]\nper_episode = sometimes\n", []),
    ("no section header\n", []),
    ("", ["eval.T"]),
    ("", ["evalT=3"]),
    ("", ["eval.nope=3"]),
])
def test_bad_configs(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_digest_tracks_content():
    a, b = parse_config(""), parse_config("[run]\nseed = 0\n")
    assert a.digest() == b.digest()
    assert parse_config("[run]\nseed = 1\n").digest() != a.digest()
    assert "[rerand]" in a.canonical_text()


def test_lists():
    assert int_list("0-3, 7,9-10") == [0, 1, 2, 3, 7, 9, 10]
    assert str_list(" a, ,b ") == ["a", "b"]
    with pytest.raises(ConfigError):
        int_list("x-3")


def test_policy_presets():
    reg = build_backbone(BackboneConfig.default(), 0)
    assert parse_config("").policy(reg).selectors == ("stage4.block1.conv2", "stage4.block1.bn2")
    pol = parse_config("[rerand]\npreset = custom\nselectors = stage3.*, stem.conv\ninclude_shortcut = true\n").policy(reg)
    assert pol.selectors == ("stage3.*", "stem.conv") and pol.include_shortcut
    assert parse_config("[rerand]\npreset = stages(2,3)\n").policy(reg).name == "stages23"


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    cfgs = sorted(root.glob("*.cfg"))
    assert cfgs
    for path in cfgs:
        load_config(path)
