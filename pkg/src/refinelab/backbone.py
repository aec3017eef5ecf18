"""Miniature ResNet backbone: a stem plus four stages of basic blocks.

Parameters live in a :class:`ParamRegistry` keyed by hierarchical paths such
as ``stage4.block1.conv2.weight``. The *layer path* (everything before the last
dot) is the unit that policies select and reports list.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from refinelab import init as winit
from refinelab import tensor as T
from refinelab.rng import Stream

ROLES = (
    "conv_weight",
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
    "linear_weight",
    "linear_bias",
)
ROLE_TAG = {r: i for i, r in enumerate(ROLES)}

_BN_SUFFIX = {
    "gamma": "bn_gamma",
    "beta": "bn_beta",
    "running_mean": "bn_running_mean",
    "running_var": "bn_running_var",
}
HEAD_KINDS = ("linear_classifier", "projection_mlp", "aux_probe")


class RegistryError(ValueError):
    pass


class HeadError(RegistryError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    input_size: int = 32
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_channels and blocks_per_stage need exactly four entries")
        if min(self.stage_channels) < 1 or self.stem_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one block")
        # stem pool + three strided stages must leave at least one pixel
        if self.input_size < 16:
            raise ValueError(f"input_size {self.input_size} too small for four halvings (need >= 16)")

    @property
    def embedding_dim(self) -> int:
        return self.stage_channels[-1]

    @classmethod
    def default(cls) -> "BackboneConfig":
        return cls(64, (64, 128, 256, 512), (1, 1, 1, 1), 64, 3)

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls()

    def stage_stride(self, stage: int) -> int:
        return 1 if stage == 1 else 2

    def stage_spatial(self) -> list[int]:
        s = self.input_size // 2
        out = []
        for i in range(1, 5):
            if self.stage_stride(i) == 2:
                s = (s - 1) // 2 + 1
            out.append(s)
        return out


@dataclass
class Entry:
    array: np.ndarray
    role: str


def layer_of(path: str) -> str:
    return path.rsplit(".", 1)[0]


class ParamRegistry:
    """Ordered path -> (array, role) map, optionally with its initial snapshot."""

    def __init__(self):
        self._entries: dict[str, Entry] = {}
        self.init_snapshot: dict[str, Entry] | None = None

    # mapping-ish API
    def add(self, path: str, array: np.ndarray, role: str) -> None:
        if path in self._entries:
            raise RegistryError(f"duplicate path {path!r}")
        if role not in ROLE_TAG:
            raise RegistryError(f"unknown role {role!r}")
        self._entries[path] = Entry(np.ascontiguousarray(array, dtype=np.float32), role)

    def remove(self, path: str) -> None:
        del self._entries[path]

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __getitem__(self, path: str) -> np.ndarray:
        return self._entries[path].array

    def __setitem__(self, path: str, array: np.ndarray) -> None:
        e = self._entries[path]
        if array.shape != e.array.shape:
            raise RegistryError(f"{path}: shape {array.shape} != {e.array.shape}")
        e.array[...] = array

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def role(self, path: str) -> str:
        return self._entries[path].role

    def items(self):
        return ((k, e.array) for k, e in self._entries.items())

    def entries(self):
        return self._entries.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: e.array for k, e in self._entries.items()}

    def layer_paths(self) -> list[str]:
        seen: dict[str, None] = {}
        for k in self._entries:
            seen.setdefault(layer_of(k), None)
        return list(seen)

    def paths_in_layer(self, layer: str) -> list[str]:
        return [k for k in self._entries if layer_of(k) == layer]

    def backbone_paths(self) -> list[str]:
        return [k for k in self._entries if not k.startswith("head.")]

    def head_paths(self) -> list[str]:
        return [k for k in self._entries if k.startswith("head.")]

    def take_snapshot(self) -> None:
        self.init_snapshot = {k: Entry(e.array.copy(), e.role) for k, e in self._entries.items()}

    def clone(self, include_snapshot: bool = True) -> "ParamRegistry":
        out = ParamRegistry()
        out._entries = {k: Entry(e.array.copy(), e.role) for k, e in self._entries.items()}
        if include_snapshot and self.init_snapshot is not None:
            out.init_snapshot = {k: Entry(e.array.copy(), e.role) for k, e in self.init_snapshot.items()}
        return out

    def equals(self, other: "ParamRegistry", include_snapshot: bool = True) -> bool:
        """Bit-exact comparison of paths, roles, shapes and payloads."""
        if not _tables_equal(self._entries, other._entries):
            return False
        if not include_snapshot:
            return True
        if (self.init_snapshot is None) != (other.init_snapshot is None):
            return False
        return self.init_snapshot is None or _tables_equal(self.init_snapshot, other.init_snapshot)

    def digest(self, paths: Sequence[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the selected entries (all by default)."""
        import hashlib

        h = hashlib.sha256()
        for k in self._entries if paths is None else paths:
            e = self._entries[k]
            h.update(k.encode())
            h.update(bytes([ROLE_TAG[e.role]]))
            h.update(np.asarray(e.array.shape, np.int64).tobytes())
            h.update(e.array.tobytes())
        return h.hexdigest()

    # structure inference for registries that came from a checkpoint
    def infer_config(self, input_size: int = 32) -> BackboneConfig:
        stem = self["stem.conv.weight"]
        blocks = [0, 0, 0, 0]
        chans = [0, 0, 0, 0]
        for k in self._entries:
            m = re.match(r"stage(\d)\.block(\d+)\.conv2\.weight$", k)
            if m:
                s, b = int(m.group(1)), int(m.group(2))
                blocks[s - 1] = max(blocks[s - 1], b)
                chans[s - 1] = self[k].shape[0]
        return BackboneConfig(stem.shape[0], tuple(chans), tuple(blocks), input_size, stem.shape[1])

    def head_kind(self) -> str | None:
        heads = self.head_paths()
        if not heads:
            return None
        if "head.fc.weight" in heads:
            return "linear_classifier"
        if "head.fc1.weight" in heads:
            return "projection_mlp"
        return "aux_probe"

    def probe_stage(self) -> int:
        for k in self.head_paths():
            m = re.match(r"head\.probe_stage(\d)\.weight$", k)
            if m:
                return int(m.group(1))
        raise HeadError("no aux_probe head attached")


def _tables_equal(a: dict[str, Entry], b: dict[str, Entry]) -> bool:
    if list(a) != list(b):
        return False
    for k in a:
        x, y = a[k], b[k]
        if x.role != y.role or x.array.shape != y.array.shape or x.array.tobytes() != y.array.tobytes():
            return False
    return True


# -- construction ------------------------------------------------------------


def block_has_shortcut(config: BackboneConfig, stage: int, block: int) -> bool:
    if block > 1:
        return False
    c_in = config.stem_channels if stage == 1 else config.stage_channels[stage - 2]
    return c_in != config.stage_channels[stage - 1] or config.stage_stride(stage) != 1


def layer_plan(config: BackboneConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(layer path, kind, conv-weight shape or (channels,)) in forward order."""
    plan: list[tuple[str, str, tuple[int, ...]]] = [
        ("stem.conv", "conv", (config.stem_channels, config.input_channels, 3, 3)),
        ("stem.bn", "bn", (config.stem_channels,)),
    ]
    c_in = config.stem_channels
    for s in range(1, 5):
        c_out = config.stage_channels[s - 1]
        for b in range(1, config.blocks_per_stage[s - 1] + 1):
            p = f"stage{s}.block{b}"
            plan += [
                (f"{p}.conv1", "conv", (c_out, c_in, 3, 3)),
                (f"{p}.bn1", "bn", (c_out,)),
                (f"{p}.conv2", "conv", (c_out, c_out, 3, 3)),
                (f"{p}.bn2", "bn", (c_out,)),
            ]
            if block_has_shortcut(config, s, b):
                plan += [
                    (f"{p}.shortcut.conv", "conv", (c_out, c_in, 1, 1)),
                    (f"{p}.shortcut.bn", "bn", (c_out,)),
                ]
            c_in = c_out
    return plan


def _add_bn(reg: ParamRegistry, layer: str, channels: int) -> None:
    reg.add(f"{layer}.gamma", np.ones(channels, np.float32), "bn_gamma")
    reg.add(f"{layer}.beta", np.zeros(channels, np.float32), "bn_beta")
    reg.add(f"{layer}.running_mean", np.zeros(channels, np.float32), "bn_running_mean")
    reg.add(f"{layer}.running_var", np.ones(channels, np.float32), "bn_running_var")


def build_backbone(config: BackboneConfig, seed: int) -> ParamRegistry:
    """Fresh backbone with default Kaiming-uniform convs and identity BN."""
    reg = ParamRegistry()
    for layer, kind, shape in layer_plan(config):
        if kind == "conv":
            path = f"{layer}.weight"
            w = winit.kaiming_uniform(shape, winit.fan_in_of(shape), Stream.derive(seed, "init", path))
            reg.add(path, w, "conv_weight")
        else:
            _add_bn(reg, layer, shape[0])
    reg.take_snapshot()
    return reg


# -- heads -------------------------------------------------------------------


def init_linear(out_dim: int, in_dim: int, seed: int, slot: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fresh head layer weights. Keyed by position in the head rather than by
    path, so a stage-4 probe and a linear classifier from one seed coincide."""
    w = winit.kaiming_uniform((out_dim, in_dim), in_dim, Stream.derive(seed, "head", slot))
    return w, np.zeros(out_dim, np.float32)


def _add_linear(reg: ParamRegistry, layer: str, out_dim: int, in_dim: int, seed: int, slot: int) -> None:
    w, b = init_linear(out_dim, in_dim, seed, slot)
    reg.add(f"{layer}.weight", w, "linear_weight")
    reg.add(f"{layer}.bias", b, "linear_bias")


def attach_head(
    reg: ParamRegistry,
    kind: str,
    out_dim: int,
    seed: int,
    *,
    stage: int = 4,
    hidden_dim: int | None = None,
) -> None:
    """Add a freshly initialised head under ``head.*``.

    ``stage`` selects the tapped stage for ``aux_probe``; ``hidden_dim``
    defaults to d for the projection MLP.
    """
    if reg.head_paths():
        raise HeadError("a head is already attached; detach it first")
    config = reg.infer_config()
    d = config.embedding_dim
    if kind == "linear_classifier":
        _add_linear(reg, "head.fc", out_dim, d, seed, 0)
    elif kind == "projection_mlp":
        h = d if hidden_dim is None else hidden_dim
        _add_linear(reg, "head.fc1", h, d, seed, 0)
        _add_linear(reg, "head.fc2", out_dim, h, seed, 1)
    elif kind == "aux_probe":
        if stage not in (1, 2, 3, 4):
            raise HeadError(f"aux_probe stage must be 1..4, got {stage}")
        _add_linear(reg, f"head.probe_stage{stage}", out_dim, config.stage_channels[stage - 1], seed, 0)
    else:
        raise HeadError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def detach_head(reg: ParamRegistry) -> None:
    heads = reg.head_paths()
    if not heads:
        raise HeadError("no head attached")
    for k in heads:
        reg.remove(k)


# -- forward -----------------------------------------------------------------


def leaves_for(reg: ParamRegistry, trainable: Sequence[str] | None = ()) -> dict[str, T.Tensor]:
    """Wrap registry arrays (shared memory) as tensors; ``None`` trains all."""
    keys = None if trainable is None else set(trainable)
    out = {}
    for k, e in reg.entries():
        if e.role in ("bn_running_mean", "bn_running_var"):
            continue
        out[k] = T.Tensor(e.array, requires_grad=keys is None or k in keys)
    return out


class _Runner:
    def __init__(self, reg: ParamRegistry, train: bool, leaves: dict[str, T.Tensor] | None):
        self.reg = reg
        self.train = train
        self.leaves = leaves if leaves is not None else leaves_for(reg)

    def conv(self, layer: str, x: T.Tensor, stride: int) -> T.Tensor:
        w = self.leaves[f"{layer}.weight"]
        pad = w.shape[2] // 2
        if w.dtype != x.dtype:
            w = T.Tensor(w.data.astype(x.dtype))
        return T.conv2d(x, w, stride, pad)

    def bn(self, layer: str, x: T.Tensor) -> T.Tensor:
        g, b = self.leaves[f"{layer}.gamma"], self.leaves[f"{layer}.beta"]
        return T.batchnorm2d(
            x, g, b, self.reg[f"{layer}.running_mean"], self.reg[f"{layer}.running_var"], self.train
        )

    def block(self, prefix: str, x: T.Tensor, stride: int) -> T.Tensor:
        out = T.relu(self.bn(f"{prefix}.bn1", self.conv(f"{prefix}.conv1", x, stride)))
        out = self.bn(f"{prefix}.bn2", self.conv(f"{prefix}.conv2", out, 1))
        if f"{prefix}.shortcut.conv.weight" in self.reg:
            sc = self.bn(f"{prefix}.shortcut.bn", self.conv(f"{prefix}.shortcut.conv", x, stride))
        else:
            sc = x
        return T.relu(T.add(out, sc))


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.ascontiguousarray(x))


def forward_stage_outputs(
    reg: ParamRegistry,
    x,
    train: bool = False,
    leaves: dict[str, T.Tensor] | None = None,
    upto: int = 4,
) -> list[T.Tensor]:
    """Pre-pool output of each stage (only the first ``upto`` are computed)."""
    x = _as_tensor(x)
    stem_w = reg["stem.conv.weight"]
    if x.data.ndim != 4 or x.shape[1] != stem_w.shape[1]:
        raise T.ShapeError(f"expected N x {stem_w.shape[1]} x H x W input, got {x.shape}")
    if x.shape[2] < 16 or x.shape[3] < 16:
        raise T.ShapeError(f"input spatial size {x.shape[2:]} too small (need >= 16)")
    run = _Runner(reg, train, leaves)
    h = T.maxpool2x2(T.relu(run.bn("stem.bn", run.conv("stem.conv", x, 1))))
    outs = []
    for s in range(1, upto + 1):
        b = 1
        while f"stage{s}.block{b}.conv1.weight" in reg:
            h = run.block(f"stage{s}.block{b}", h, (1 if s == 1 else 2) if b == 1 else 1)
            b += 1
        outs.append(h)
    return outs


def forward_features(
    reg: ParamRegistry, x, train: bool = False, leaves: dict[str, T.Tensor] | None = None
) -> T.Tensor:
    """d-dimensional embedding: global average pool of the stage-4 output."""
    return T.global_avg_pool(forward_stage_outputs(reg, x, train, leaves)[-1])


def forward_head(reg: ParamRegistry, feats: T.Tensor, leaves: dict[str, T.Tensor] | None = None) -> T.Tensor:
    leaves = leaves if leaves is not None else leaves_for(reg)
    kind = reg.head_kind()
    if kind == "linear_classifier":
        return T.linear(feats, leaves["head.fc.weight"], leaves["head.fc.bias"])
    if kind == "projection_mlp":
        h = T.relu(T.linear(feats, leaves["head.fc1.weight"], leaves["head.fc1.bias"]))
        return T.linear(h, leaves["head.fc2.weight"], leaves["head.fc2.bias"])
    if kind == "aux_probe":
        s = reg.probe_stage()
        return T.linear(feats, leaves[f"head.probe_stage{s}.weight"], leaves[f"head.probe_stage{s}.bias"])
    raise HeadError("no head attached")


def pooled_stage_features(reg: ParamRegistry, x, stage: int) -> np.ndarray:
    """Eval-mode, avg-pooled output of ``stage`` (1..4) as a plain array."""
    outs = forward_stage_outputs(reg, x, train=False, upto=stage)
    return T.global_avg_pool(outs[stage - 1]).data


def golden_layer_paths(config: BackboneConfig) -> list[str]:
    return [layer for layer, _, _ in layer_plan(config)]
