"""Re-randomization surgery: pick layers by glob, redraw or restore them."""

from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from refinelab import init as winit
from refinelab.backbone import ParamRegistry
from refinelab.rng import Stream

DISTRIBUTIONS = ("uniform", "normal", "orthogonal", "sparse", "lottery")
PRESETS = ("none", "last_stage", "topmost", "stages", "custom")

_GLOB_CHARS = re.compile(r"^[A-Za-z0-9_.*?\[\]!-]+$")


class PolicyError(ValueError):
    pass


class EmptySurgeryError(PolicyError):
    pass


class SnapshotMissingError(PolicyError):
    pass


@dataclass(frozen=True)
class RerandPolicy:
    selectors: tuple[str, ...] = ()
    distribution: str = "uniform"
    include_shortcut: bool = False
    reset_running_stats: bool = True
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "selectors", tuple(self.selectors))
        if self.distribution not in DISTRIBUTIONS:
            raise PolicyError(f"unknown distribution {self.distribution!r}; expected one of {DISTRIBUTIONS}")
        for sel in self.selectors:
            validate_glob(sel)

    @property
    def is_noop(self) -> bool:
        return not self.selectors

    def with_(self, **changes) -> "RerandPolicy":
        return replace(self, **changes)

    def to_text(self) -> str:
        sels = ", ".join(self.selectors)
        return (
            f"rerand {{ distribution={self.distribution}, selectors=[{sels}], "
            f"include_shortcut={str(self.include_shortcut).lower()}, "
            f"reset_running_stats={str(self.reset_running_stats).lower()}, seed={self.seed} }}"
        )

    @classmethod
    def from_text(cls, text: str) -> "RerandPolicy":
        m = re.fullmatch(r"\s*rerand\s*\{(.*)\}\s*", text, flags=re.S)
        if not m:
            raise PolicyError("policy block must look like 'rerand { key=value, ... }'")
        body = m.group(1)
        fields: dict[str, str] = {}
        sm = re.search(r"selectors\s*=\s*\[([^\[\]]*(?:\[[^\[\]]*\][^\[\]]*)*)\]", body)
        if sm:
            fields["selectors"] = sm.group(1)
            body = body[: sm.start()] + body[sm.end():]
        for part in body.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise PolicyError(f"malformed policy field {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            fields[k] = v
        unknown = set(fields) - {"distribution", "selectors", "include_shortcut", "reset_running_stats", "seed"}
        if unknown:
            raise PolicyError(f"unknown policy fields {sorted(unknown)}")
        sels = tuple(s.strip() for s in fields.get("selectors", "").split(",") if s.strip())
        return cls(
            selectors=sels,
            distribution=fields.get("distribution", "uniform"),
            include_shortcut=_parse_bool(fields.get("include_shortcut", "false")),
            reset_running_stats=_parse_bool(fields.get("reset_running_stats", "true")),
            seed=int(fields.get("seed", "0")),
        )


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise PolicyError(f"expected a boolean, got {v!r}")


def validate_glob(sel: str) -> None:
    if not sel or not _GLOB_CHARS.match(sel):
        raise PolicyError(f"malformed selector {sel!r}")
    depth = 0
    for ch in sel:
        if ch == "[":
            if depth:
                raise PolicyError(f"nested '[' in selector {sel!r}")
            depth = 1
        elif ch == "]":
            if not depth:
                raise PolicyError(f"unbalanced ']' in selector {sel!r}")
            depth = 0
    if depth:
        raise PolicyError(f"unbalanced '[' in selector {sel!r}")


# -- presets -----------------------------------------------------------------


def _last_block(reg: ParamRegistry, stage: int = 4) -> int:
    b = 1
    while f"stage{stage}.block{b + 1}.conv1.weight" in reg:
        b += 1
    return b


def preset(name: str, reg: ParamRegistry | None = None, *, stages: Iterable[int] = (),
           distribution: str = "uniform", seed: int = 0, selectors: Sequence[str] = (),
           reset_running_stats: bool = True, include_shortcut: bool = False) -> RerandPolicy:
    """Build a named policy.

    ``topmost`` needs the registry to find the last block of stage 4.
    """
    kw = dict(distribution=distribution, seed=seed, reset_running_stats=reset_running_stats)
    if name == "none":
        return RerandPolicy((), name="none", **kw)
    if name == "last_stage":
        return RerandPolicy(("stage4.*",), include_shortcut=True, name="last_stage", **kw)
    if name == "topmost":
        b = _last_block(reg) if reg is not None else 1
        return RerandPolicy(
            (f"stage4.block{b}.conv2", f"stage4.block{b}.bn2"), include_shortcut=False, name="topmost", **kw
        )
    if name == "stages":
        s = sorted(set(int(i) for i in stages))
        if not s or any(i not in (1, 2, 3, 4) for i in s):
            raise PolicyError(f"stages preset needs a non-empty subset of 1..4, got {s}")
        return RerandPolicy(
            tuple(f"stage{i}.*" for i in s), include_shortcut=True, name="stages" + "".join(map(str, s)), **kw
        )
    if name == "custom":
        return RerandPolicy(tuple(selectors), include_shortcut=include_shortcut, name="custom", **kw)
    raise PolicyError(f"unknown preset {name!r}; expected one of {PRESETS}")


def parse_preset(spec: str, reg: ParamRegistry | None = None, **kw) -> RerandPolicy:
    """``topmost``, ``last_stage``, ``none`` or ``stages(1,2)`` / ``stages:12``."""
    spec = spec.strip()
    m = re.fullmatch(r"stages\s*[(:]\s*([0-9,\s]+)\)?", spec)
    if m:
        digits = [int(c) for c in re.findall(r"\d", m.group(1))]
        return preset("stages", reg, stages=digits, **kw)
    return preset(spec, reg, **kw)


# Column layout of the last-stage layer ablation (block 1 of stage 4).
LAYER_ABLATION_COLUMNS: tuple[tuple[str, ...], ...] = (
    ("conv1", "bn1"),
    ("conv2", "bn2"),
    ("conv1", "conv2"),
    ("bn1", "bn2"),
    ("conv1", "bn1", "conv2", "bn2"),
    ("shortcut.conv",),
    ("shortcut.bn",),
    ("shortcut.conv", "shortcut.bn"),
    ("conv1", "bn1", "shortcut.conv", "shortcut.bn"),
    ("conv2", "bn2", "shortcut.conv", "shortcut.bn"),
    ("conv1", "bn1", "conv2", "bn2", "shortcut.conv", "shortcut.bn"),
)


def layer_ablation_presets(distribution: str = "uniform", seed: int = 0, block: int = 1) -> list[RerandPolicy]:
    out = []
    for cols in LAYER_ABLATION_COLUMNS:
        sels = tuple(f"stage4.block{block}.{c}" for c in cols)
        name = "stage4:" + "+".join(c.replace("shortcut.", "sc_") for c in cols)
        out.append(RerandPolicy(sels, distribution, include_shortcut=True, seed=seed, name=name))
    return out


def stage_ablation_presets(distribution: str = "uniform", seed: int = 0) -> list[RerandPolicy]:
    """``none`` followed by every non-empty subset of stages, ordered by size."""
    from itertools import combinations

    out = [preset("none", distribution=distribution, seed=seed)]
    for r in range(1, 5):
        for combo in combinations((1, 2, 3, 4), r):
            out.append(preset("stages", stages=combo, distribution=distribution, seed=seed))
    return out


# -- resolution and surgery --------------------------------------------------


def resolve_policy(policy: RerandPolicy, reg: ParamRegistry) -> list[str]:
    """Matched backbone layer paths in registry order."""
    layers = reg.layer_paths()
    for sel in policy.selectors:
        validate_glob(sel)
        if any(fnmatch.fnmatchcase(layer, sel) for layer in layers if layer.startswith("head.")):
            raise PolicyError(f"selector {sel!r} matches head layers; heads are rebuilt, not re-randomized")
    matched = []
    for layer in layers:
        if layer.startswith("head."):
            continue
        if not policy.include_shortcut and ".shortcut." in f".{layer}.":
            continue
        if any(fnmatch.fnmatchcase(layer, sel) for sel in policy.selectors):
            matched.append(layer)
    return matched


def _draw(distribution: str, shape, stream: Stream):
    fan_in = winit.fan_in_of(shape)
    if distribution == "uniform":
        return winit.kaiming_uniform(shape, fan_in, stream)
    if distribution == "normal":
        return winit.normal_init(shape, fan_in, stream)
    if distribution == "orthogonal":
        return winit.orthogonal_init(shape, stream)
    if distribution == "sparse":
        return winit.sparse_init(shape, stream)
    raise PolicyError(f"cannot draw from {distribution!r}")


def rerandomize(reg: ParamRegistry, policy: RerandPolicy) -> list[str]:
    """Apply ``policy`` in place and return the touched layer paths.

    Conv weights are redrawn from the policy distribution with a stream keyed by
    (policy seed, parameter path); BN scale/shift go back to ones/zeros and, if
    requested, running stats to (0, 1). ``lottery`` instead restores every
    matched entry from the registry's initial snapshot.
    """
    layers = resolve_policy(policy, reg)
    if not layers:
        raise EmptySurgeryError(f"policy {policy.to_text()} matches no backbone layer")
    if policy.distribution == "lottery" and reg.init_snapshot is None:
        raise SnapshotMissingError("lottery re-initialisation needs the initial snapshot")
    for layer in layers:
        for path in reg.paths_in_layer(layer):
            role = reg.role(path)
            arr = reg[path]
            if policy.distribution == "lottery":
                arr[...] = reg.init_snapshot[path].array
            elif role == "conv_weight":
                arr[...] = _draw(policy.distribution, arr.shape, Stream.derive(policy.seed, "rerand", path))
            elif role == "bn_gamma":
                arr[...] = 1.0
            elif role == "bn_beta":
                arr[...] = 0.0
            elif role == "bn_running_mean" and policy.reset_running_stats:
                arr[...] = 0.0
            elif role == "bn_running_var" and policy.reset_running_stats:
                arr[...] = 1.0
    return layers


def report_json(layers: Sequence[str]) -> str:
    return json.dumps(list(layers))
