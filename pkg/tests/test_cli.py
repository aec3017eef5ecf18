import json
import os
from pathlib import Path

import pytest

from refinelab import cli
from refinelab.checkpoint import load_checkpoint
from refinelab.config import load_config

GOLDEN = Path(__file__).parent / "golden"

TINY = """\
[data]
base_classes = 0-4
novel_classes = 20-24
base_per_class = 8
novel_per_class = 8
targets = binarize
target = binarize

[pretrain]
epochs = 1
batch_size = 16

[finetune]
steps = 2
lr = 0.05

[simclr]
epochs = 1
batch_size = 8

[eval]
T = 2
k_q = 3
shots = 1
"""


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    """gen-data -> pretrain in a shared directory."""
    out = tmp_path_factory.mktemp("recipe")
    cfg = out / "tiny.cfg"
    cfg.write_text(TINY)
    for cmd in ("gen-data", "pretrain"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return out, cfg


def _run(recipe, *argv):
    out, cfg = recipe
    return cli.main([argv[0], "--config", str(cfg), "--out", str(out), *argv[1:]])


def test_help_snapshots(monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "100")
    parser = cli.build_parser()
    assert parser.format_help() == (GOLDEN / "help.txt").read_text()
    with pytest.raises(SystemExit):
        cli.main(["eval", "--help"])
    assert capsys.readouterr().out == (GOLDEN / "help_eval.txt").read_text()


def test_gen_data_outputs_and_manifest(recipe):
    out, _ = recipe
    for name in ("source.rfds", "stats.json", "novel_binarize.rfds", "pretrained.rfck", "gen-data.manifest.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "pretrain.manifest.json").read_text())
    assert man["command"] == "pretrain" and str(out / "source.rfds") in man["inputs"]
    assert "pretrained.rfck" in man["outputs"] and "final_train_accuracy" in man["train_log"]


def test_rerand_writes_surgery(recipe, capsys):
    assert _run(recipe, "rerand") == 0
    out, _ = recipe
    assert json.loads((out / "surgery.json").read_text()) == ["stage4.block1.conv2", "stage4.block1.bn2"]
    assert not load_checkpoint(out / "rerand.rfck").equals(load_checkpoint(out / "pretrained.rfck"))


def test_topmost_on_default_backbone(tmp_path):
    cfg = tmp_path / "big.cfg"
    cfg.write_text(TINY.replace("[pretrain]\nepochs = 1", "[pretrain]\nepochs = 0")
                   + "[backbone]\nstem = 64\nstages = 64,128,256,512\n")
    args = ["--config", str(cfg), "--out", str(tmp_path), "--set", "data.image_size=64"]
    for cmd in ("gen-data", "pretrain", "rerand"):
        assert cli.main([cmd, *args]) == 0
    assert json.loads((tmp_path / "surgery.json").read_text()) == ["stage4.block1.conv2", "stage4.block1.bn2"]


def test_eval_is_byte_identical_across_runs(recipe):
    out, _ = recipe
    assert _run(recipe, "eval") == 0
    first = (out / "eval.csv").read_bytes()
    assert _run(recipe, "eval", "--workers", "2") == 0
    assert (out / "eval.csv").read_bytes() == first
    assert first.decode().splitlines()[0] == "method,source,target,n,k,T,mean,ci95,seed"


def test_probe_ablate_and_report(recipe):
    out, _ = recipe
    assert _run(recipe, "probe-stages") == 0
    assert len((out / "probe.csv").read_text().splitlines()) == 1 + 4
    assert (out / "probe.svg").read_text().startswith("<svg")
    assert _run(recipe, "ablate-how", "--set", "ablate.distributions=uniform,lottery") == 0
    assert len((out / "ablate_how.csv").read_text().splitlines()) == 1 + 2
    assert _run(recipe, "ablate-where", "--set", "ablate.where=layers") == 0
    assert len((out / "ablate_where.csv").read_text().splitlines()) == 1 + 11
    assert _run(recipe, "report", str(out / "probe.json"), str(out / "ablate_how.json")) == 0
    assert len((out / "report.csv").read_text().splitlines()) == 1 + 6


def test_simclr_variants(recipe):
    out, _ = recipe
    assert _run(recipe, "simclr") == 0
    assert _run(recipe, "simclr", "--set", "simclr.start=fresh") == 0
    assert (out / "simclr.rfck").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_exit_codes(recipe, tmp_path):
    assert _run(recipe, "eval", "--set", "eval.nonsense=1") == 1
    assert _run(recipe, "eval", "--set", "rerand.preset=sideways") == 1
    assert _run(recipe, "eval", "--set", "eval.method=cooking") == 1
    assert cli.main(["eval", "--out", str(tmp_path)]) == 2  # nothing generated there
    bad = tmp_path / "pretrained.rfck"
    bad.write_bytes(b"RFCK\x01\x00garbage")
    assert cli.main(["rerand", "--out", str(tmp_path)]) == 2
    assert _run(recipe, "report", str(tmp_path / "missing.json")) == 2
    assert cli.main(["pretrain", "--config", str(recipe[1]), "--out", str(tmp_path),
                     "--set", f"paths.data={recipe[0]}", "--set", "pretrain.lr=1e9",
                     "--set", "pretrain.epochs=3"]) == 3
    assert (tmp_path / "pretrained.last_good.rfck").exists()


def test_module_entry_point(recipe):
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "refinelab", "--version"], capture_output=True, text=True,
                         env=dict(os.environ))
    assert out.returncode == 0 and out.stdout.startswith("refinelab ")


def test_worker_count_precedence(monkeypatch, tmp_path):
    cfg = tmp_path / "w.cfg"
    cfg.write_text("[run]\nworkers = 3\n")
    args = cli.build_parser().parse_args(["eval", "--config", str(cfg), "--out", str(tmp_path)])
    run = cli.Run(args, load_config(cfg))
    monkeypatch.delenv("REFINE_WORKERS", raising=False)
    assert run.workers == 3
    monkeypatch.setenv("REFINE_WORKERS", "2")
    assert run.workers == 2
    args.workers = 1
    assert run.workers == 1
