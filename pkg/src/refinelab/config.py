"""Sectioned ``key = value`` experiment configuration.

The file format is the stdlib INI dialect without interpolation. Every key
has a typed default, so an empty file is a valid configuration; unknown
sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from refinelab.backbone import BackboneConfig
from refinelab.pipelines import EvalParams, TrainConfig
from refinelab.rerand import RerandPolicy, parse_preset


class ConfigError(ValueError):
    pass


# section -> key -> default (the default also fixes the type)
DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "workers": 1},
    "paths": {"data": "", "checkpoint": "", "reports": ""},
    "data": {
        "image_size": 32,
        "base_classes": "0-19",
        "novel_classes": "20-39",
        "base_per_class": 50,
        "novel_per_class": 40,
        "targets": "source,hue,texture,invert,binarize",
        "target": "binarize",
    },
    "backbone": {"stem": 16, "stages": "16,32,64,128", "blocks": "1,1,1,1"},
    "pretrain": {
        "epochs": 30, "batch_size": 64, "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4,
        "milestones": "0.6667,0.8333", "gamma": 0.1, "augment": True,
    },
    "finetune": {"steps": 100, "lr": 0.01, "momentum": 0.9, "weight_decay": 1e-3},
    "simclr": {
        "start": "checkpoint", "epochs": 10, "batch_size": 64, "lr": 0.05, "momentum": 0.9,
        "weight_decay": 1e-4, "temperature": 0.5, "projection_dim": 32,
    },
    "eval": {"method": "refine", "n": 5, "k": 5, "k_q": 15, "T": 600, "shots": "1,5"},
    "rerand": {
        "preset": "topmost", "selectors": "", "distribution": "uniform", "seed": 0,
        "include_shortcut": False, "reset_running_stats": True, "per_episode": False,
    },
    "ablate": {"where": "stages", "distributions": "uniform,normal,orthogonal,sparse,lottery"},
    "report": {"inputs": "", "plot": "ablation_bars"},
}


def _coerce(section: str, key: str, raw: str) -> Any:
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def int_list(text: str) -> list[int]:
    """``"0-3,7"`` -> ``[0, 1, 2, 3, 7]``."""
    out: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        try:
            out.extend(range(int(m.group(1)), int(m.group(2)) + 1) if m else [int(part)])
        except ValueError:
            raise ConfigError(f"bad integer list element {part!r}") from None
    return out


def str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


@dataclass
class Config:
    values: dict[str, dict[str, Any]]
    overrides: tuple[str, ...] = ()

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str) -> Any:
        s, k = dotted.split(".", 1)
        return self.values[s][k]

    def canonical_text(self) -> str:
        lines = []
        for s in DEFAULTS:
            lines.append(f"[{s}]")
            for k in DEFAULTS[s]:
                v = self.values[s][k]
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    # typed views
    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def backbone(self) -> BackboneConfig:
        b = self.values["backbone"]
        return BackboneConfig(
            b["stem"], tuple(int_list(b["stages"])), tuple(int_list(b["blocks"])), self.values["data"]["image_size"]
        )

    def pretrain(self) -> TrainConfig:
        p = self.values["pretrain"]
        return TrainConfig(
            epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"], momentum=p["momentum"],
            weight_decay=p["weight_decay"], milestones=tuple(float(m) for m in str_list(p["milestones"])),
            gamma=p["gamma"], augment=p["augment"], seed=self.seed,
        )

    def finetune(self) -> TrainConfig:
        f = self.values["finetune"]
        return TrainConfig.finetune_defaults(
            steps=f["steps"], lr=f["lr"], momentum=f["momentum"], weight_decay=f["weight_decay"], seed=self.seed
        )

    def simclr(self) -> TrainConfig:
        c = self.values["simclr"]
        return TrainConfig.simclr_defaults(
            epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], momentum=c["momentum"],
            weight_decay=c["weight_decay"], temperature=c["temperature"], projection_dim=c["projection_dim"],
            seed=self.seed,
        )

    def eval_params(self, workers: int | None = None) -> EvalParams:
        e = self.values["eval"]
        w = self.values["run"]["workers"] if workers is None else workers
        return EvalParams(e["n"], e["k"], e["k_q"], e["T"], self.seed, w)

    def shots(self) -> list[int]:
        return int_list(self.values["eval"]["shots"])

    def policy(self, reg=None) -> RerandPolicy:
        r = self.values["rerand"]
        kw = dict(distribution=r["distribution"], seed=r["seed"], reset_running_stats=r["reset_running_stats"])
        if r["preset"] == "custom":
            return parse_preset(
                "custom", reg, selectors=str_list(r["selectors"]), include_shortcut=r["include_shortcut"], **kw
            )
        return parse_preset(r["preset"], reg, **kw)


def parse_config(text: str = "", overrides: tuple[str, ...] | list[str] = ()) -> Config:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}".splitlines()[0]) from None
    values = {s: dict(d) for s, d in DEFAULTS.items()}
    for s in cp.sections():
        if s not in DEFAULTS:
            raise ConfigError(f"unknown section [{s}]")
        for k, raw in cp.items(s):
            if k not in DEFAULTS[s]:
                raise ConfigError(f"unknown key {k!r} in [{s}]")
            values[s][k] = _coerce(s, k, raw)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        lhs, raw = ov.split("=", 1)
        s, k = (x.strip() for x in lhs.split(".", 1))
        if s not in DEFAULTS or k not in DEFAULTS[s]:
            raise ConfigError(f"unknown config key {lhs.strip()!r}")
        values[s][k] = _coerce(s, k, raw)
    return Config(values, tuple(overrides))


def load_config(path, overrides=()) -> Config:
    try:
        text = Path(path).read_text() if path else ""
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
