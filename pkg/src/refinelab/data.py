"""ShapeWorld: procedurally rendered multi-domain image data and episodes.

A class is a (shape family, fill pattern) composite. Colours, size, position
and pattern phase are per-image nuisances. A domain is the same renderer
followed by a chain of pixel transforms, so domains share class semantics and
differ only in appearance. All pixel paths use integer arithmetic and fixed
tables, so datasets reproduce byte-for-byte from their seed.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from refinelab.rng import Stream, derive_seed

FAMILIES = ("circle", "square", "triangle", "diamond", "cross", "ring", "frame", "hourglass")
PATTERNS = ("solid", "hstripes", "vstripes", "checker", "dots", "diagonal")
N_COMPOSITES = len(FAMILIES) * len(PATTERNS)

# (round(4096 cos t), round(4096 sin t / sqrt 3)) for t = 0, 15, ..., 345 degrees
_HUE_TABLE = (
    (4096, 0), (3956, 612), (3547, 1182), (2896, 1672), (2048, 2048), (1060, 2284),
    (0, 2365), (-1060, 2284), (-2048, 2048), (-2896, 1672), (-3547, 1182), (-3956, 612),
    (-4096, 0), (-3956, -612), (-3547, -1182), (-2896, -1672), (-2048, -2048), (-1060, -2284),
    (0, -2365), (1060, -2284), (2048, -2048), (2896, -1672), (3547, -1182), (3956, -612),
)
TRANSFORMS = ("hue_rotate", "texture_overlay", "invert_channels", "gaussian_noise", "grayscale_binarize")
SPLITS = ("base", "novel")


class DataError(ValueError):
    pass


class DatasetFormatError(DataError):
    pass


def composite(class_id: int) -> tuple[str, str]:
    """Shape family and fill pattern of a composite class id."""
    if not 0 <= class_id < N_COMPOSITES:
        raise DataError(f"class id {class_id} outside the {N_COMPOSITES} available composites")
    f = class_id % len(FAMILIES)
    p = (class_id // len(FAMILIES) + f) % len(PATTERNS)
    return FAMILIES[f], PATTERNS[p]


def class_name(class_id: int) -> str:
    return "-".join(composite(class_id))


@dataclass(frozen=True)
class DomainSpec:
    """A named transform chain plus renderer geometry.

    ``transforms`` is a sequence of ``(op, params)`` with ``op`` one of
    :data:`TRANSFORMS`. Sizes are fractions of the image side in percent.
    """

    name: str = "source"
    transforms: tuple[tuple[str, tuple[tuple[str, int | str], ...]], ...] = ()
    min_size_pct: int = 28
    max_size_pct: int = 40
    jitter_pct: int = 10

    def __post_init__(self):
        normalised = []
        for op, params in self.transforms:
            if op not in TRANSFORMS:
                raise DataError(f"unknown transform {op!r}")
            items = tuple(sorted(dict(params).items()))
            normalised.append((op, items))
        object.__setattr__(self, "transforms", tuple(normalised))
        if not 0 < self.min_size_pct <= self.max_size_pct <= 100:
            raise DataError("size range must satisfy 0 < min <= max <= 100 (percent)")

    @classmethod
    def make(cls, name: str, *transforms: tuple[str, dict], **geometry) -> "DomainSpec":
        return cls(name, tuple((op, tuple(p.items())) for op, p in transforms), **geometry)


SOURCE = DomainSpec.make("source")

# Target domains ordered by intended shift magnitude.
TARGET_DOMAINS = {
    "hue": DomainSpec.make("hue", ("hue_rotate", {"degrees": 120})),
    "texture": DomainSpec.make("texture", ("texture_overlay", {"kind": "lines", "alpha": 25})),
    "invert": DomainSpec.make(
        "invert", ("invert_channels", {}), ("gaussian_noise", {"sigma": 24})
    ),
    # close-up, binarized: silhouettes mostly leave the frame, fill pattern remains
    "binarize": DomainSpec.make(
        "binarize", ("grayscale_binarize", {"threshold": 150}), min_size_pct=75, max_size_pct=85, jitter_pct=4
    ),
}


def domain_by_name(name: str) -> DomainSpec:
    if name == "source":
        return SOURCE
    try:
        return TARGET_DOMAINS[name]
    except KeyError:
        raise DataError(f"unknown domain {name!r}; expected source or one of {sorted(TARGET_DOMAINS)}") from None


# -- rendering ---------------------------------------------------------------


def _shape_mask(family: str, dx: np.ndarray, dy: np.ndarray, r: int) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    if family == "circle":
        return dx * dx + dy * dy <= r * r
    if family == "square":
        return np.maximum(ax, ay) * 10 <= r * 8
    if family == "triangle":
        return (dy >= -r) & (dy * 10 <= r * 7) & (ax * 10 <= (dy + r) * 6)
    if family == "diamond":
        return ax + ay <= r
    if family == "cross":
        return ((ax * 3 <= r) & (ay <= r)) | ((ay * 3 <= r) & (ax <= r))
    if family == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 * 100 >= r * r * 30)
    if family == "frame":
        m = np.maximum(ax, ay) * 10
        return (m <= r * 8) & (m >= r * 4)
    if family == "hourglass":
        return (ax <= ay) & (ay * 10 <= r * 9)
    raise DataError(f"unknown family {family!r}")


def _pattern_mask(pattern: str, x: np.ndarray, y: np.ndarray, phase: int) -> np.ndarray:
    if pattern == "solid":
        return np.ones(np.broadcast(x, y).shape, dtype=bool)
    if pattern == "hstripes":
        return np.broadcast_to(((y + phase) // 2) % 2 == 0, np.broadcast(x, y).shape)
    if pattern == "vstripes":
        return np.broadcast_to(((x + phase) // 2) % 2 == 0, np.broadcast(x, y).shape)
    if pattern == "checker":
        return (((x + phase) // 2) + ((y + phase) // 2)) % 2 == 0
    if pattern == "dots":
        return (((x + phase) % 4) < 2) & (((y + phase) % 4) < 2)
    if pattern == "diagonal":
        return ((x + y + phase) // 2) % 2 == 0
    raise DataError(f"unknown pattern {pattern!r}")


def render(class_id: int, size: int, stream: Stream, spec: DomainSpec = SOURCE) -> np.ndarray:
    """One 3 x size x size u8 image of ``class_id`` before domain transforms."""
    family, pattern = composite(class_id)
    u = 2 * size  # half-pixel units
    lo = u * spec.min_size_pct // 100
    hi = u * spec.max_size_pct // 100
    r = lo + stream.below(hi - lo + 1)
    j = u * spec.jitter_pct // 100
    cx = u // 2 + stream.below(2 * j + 1) - j
    cy = u // 2 + stream.below(2 * j + 1) - j
    phase = stream.below(4)
    fg = np.array([120 + stream.below(136) for _ in range(3)], dtype=np.int32)
    bg = np.array([stream.below(91) for _ in range(3)], dtype=np.int32)
    mid = (fg + bg) // 2
    y, x = np.mgrid[0:size, 0:size]
    inside = _shape_mask(family, 2 * x + 1 - cx, 2 * y + 1 - cy, r)
    on = _pattern_mask(pattern, x, y, phase)
    img = np.empty((3, size, size), dtype=np.int32)
    for c in range(3):
        img[c] = np.where(inside, np.where(on, fg[c], mid[c]), bg[c])
    # mild per-pixel grain keeps the task from being trivially separable
    grain = stream.u64(size * size).reshape(size, size)
    img += ((grain >> np.uint64(60)).astype(np.int32) - 8)[None]
    return np.clip(img, 0, 255).astype(np.uint8)


def _irwin_hall(stream: Stream, n: int) -> np.ndarray:
    """Approximately N(0, 1) draws in 1/65536 units from 12 uniform 16-bit ints."""
    raw = stream.u64(3 * n)
    acc = np.zeros(n, dtype=np.int64)
    for k in range(3):
        w = raw[k * n:(k + 1) * n]
        for shift in (0, 16, 32, 48):
            acc += ((w >> np.uint64(shift)) & np.uint64(0xFFFF)).astype(np.int64)
    return acc - 6 * 65536 + 6  # centred: E[u16] = 32767.5


def _texture(kind: str, size: int, stream: Stream) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    phase = stream.below(8)
    if kind == "lines":
        t = np.where(((x * 2 + y + phase) % 6) < 2, 255, 0)
    elif kind == "grid":
        t = np.where(((x + phase) % 5 == 0) | ((y + phase) % 5 == 0), 255, 0)
    elif kind == "noise":
        t = (stream.u64(size * size).reshape(size, size) >> np.uint64(56)).astype(np.int64)
    else:
        raise DataError(f"unknown texture kind {kind!r}")
    return t.astype(np.int32)


def apply_transforms(img: np.ndarray, spec: DomainSpec, stream: Stream) -> np.ndarray:
    out = img.astype(np.int32)
    size = img.shape[-1]
    for op, items in spec.transforms:
        p = dict(items)
        if op == "hue_rotate":
            deg = int(p.get("degrees", 0))
            if deg % 15:
                raise DataError("hue_rotate supports multiples of 15 degrees")
            c, s = _HUE_TABLE[(deg // 15) % 24]
            m3 = (
                3 * c * np.eye(3, dtype=np.int64)
                + (4096 - c) * np.ones((3, 3), dtype=np.int64)
                + 3 * s * np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=np.int64)
            )
            flat = out.reshape(3, -1).astype(np.int64)
            out = ((m3 @ flat + 6144) // 12288).reshape(out.shape).astype(np.int32)
        elif op == "texture_overlay":
            a = int(p.get("alpha", 30))
            if not 0 <= a <= 100:
                raise DataError("texture alpha is a percentage")
            tex = _texture(str(p.get("kind", "lines")), size, stream)
            out = ((100 - a) * out + a * tex[None]) // 100
        elif op == "invert_channels":
            out = 255 - out
        elif op == "gaussian_noise":
            sigma = int(p.get("sigma", 10))
            noise = _irwin_hall(stream, out.size).reshape(out.shape)
            out = out + ((noise * sigma) >> 16).astype(np.int32)
        elif op == "grayscale_binarize":
            thr = int(p.get("threshold", 128))
            gray = (77 * out[0] + 150 * out[1] + 29 * out[2]) >> 8
            b = np.where(gray > thr, 255, 0)
            out = np.stack([b, b, b])
        out = np.clip(out, 0, 255)
    return out.astype(np.uint8)


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, uint8
    labels: np.ndarray  # N, original class ids
    class_ids: list[int]
    class_names: list[str]
    domain_tag: str = "source"
    split: str = "base"
    _by_class: dict[int, np.ndarray] | None = field(default=None, repr=False, compare=False)
    _float_cache: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError("images must be N x C x H x W with one label per image")
        if len(self.class_ids) != len(self.class_names):
            raise DataError("class_ids and class_names differ in length")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.labels)

    def indices_by_class(self) -> dict[int, np.ndarray]:
        if self._by_class is None:
            self._by_class = {c: np.flatnonzero(self.labels == c) for c in self.class_ids}
        return self._by_class

    def class_counts(self) -> dict[int, int]:
        return {c: len(ix) for c, ix in self.indices_by_class().items()}

    def payload_sha256(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.astype("<u4").tobytes())
        return h.hexdigest()

    def as_float(self, stats: "PixelStats") -> np.ndarray:
        """Normalised float32 images (cached per stats)."""
        key = (stats.mean.tobytes(), stats.std.tobytes())
        if self._float_cache is None or self._float_cache.get("key") != key:
            self._float_cache = {"key": key, "x": stats.normalise(self.images)}
        return self._float_cache["x"]


def generate_shapeworld(
    spec: DomainSpec,
    class_ids: Sequence[int],
    n_per_class: int,
    image_size: int = 32,
    seed: int = 0,
    split: str = "base",
) -> Dataset:
    if n_per_class < 1:
        raise DataError("n_per_class must be at least 1")
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids):
        raise DataError("duplicate class ids")
    if len(class_ids) > N_COMPOSITES:
        raise DataError(f"{len(class_ids)} classes requested but only {N_COMPOSITES} composites exist")
    for c in class_ids:
        composite(c)
    images = np.empty((len(class_ids) * n_per_class, 3, image_size, image_size), dtype=np.uint8)
    labels = np.empty(len(images), dtype=np.int64)
    i = 0
    for c in class_ids:
        for k in range(n_per_class):
            # geometry stream ignores the domain so domains render the same scene
            base = render(c, image_size, Stream.derive(seed, "render", c, k), spec)
            images[i] = apply_transforms(base, spec, Stream.derive(seed, "domain", spec.name, c, k))
            labels[i] = c
            i += 1
    return Dataset(images, labels, class_ids, [class_name(c) for c in class_ids], spec.name, split)


def novel_seed(seed: int) -> int:
    """Seed for novel splits, so they never reuse the base split's render streams."""
    return derive_seed(seed, "novel")


def assert_disjoint(base: Dataset, novel: Dataset) -> None:
    overlap = set(base.class_ids) & set(novel.class_ids)
    if overlap:
        raise DataError(f"base and novel class sets overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class PixelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, ds: Dataset) -> "PixelStats":
        x = ds.images.astype(np.float64) / 255.0
        return cls(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)) + 1e-8)

    def normalise(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float32) / np.float32(255.0)
        m = self.mean.astype(np.float32)[None, :, None, None]
        s = self.std.astype(np.float32)[None, :, None, None]
        return np.ascontiguousarray((x - m) / s)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "PixelStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


# -- episodes ----------------------------------------------------------------


@dataclass
class Episode:
    support_idx: np.ndarray
    support_labels: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray
    class_map: dict[int, int]

    @property
    def n_way(self) -> int:
        return len(self.class_map)


def sample_episode(ds: Dataset, n: int, k: int, k_q: int, rng: Stream) -> Episode:
    """n classes, then k support and k_q query images per class, all without replacement."""
    if n < 1 or k < 1 or k_q < 1:
        raise DataError("n, k and k_q must be positive")
    by_class = ds.indices_by_class()
    eligible = [c for c in ds.class_ids if len(by_class[c]) >= k + k_q]
    if len(eligible) < n:
        raise DataError(f"need {n} classes with >= {k + k_q} samples, dataset has {len(eligible)}")
    chosen = [eligible[i] for i in rng.choice(len(eligible), n)]
    s_idx, s_lab, q_idx, q_lab = [], [], [], []
    for new, c in enumerate(chosen):
        pool = by_class[c]
        pick = pool[rng.choice(len(pool), k + k_q)]
        s_idx.extend(pick[:k])
        q_idx.extend(pick[k:])
        s_lab += [new] * k
        q_lab += [new] * k_q
    return Episode(
        np.array(s_idx, np.int64),
        np.array(s_lab, np.int64),
        np.array(q_idx, np.int64),
        np.array(q_lab, np.int64),
        {c: i for i, c in enumerate(chosen)},
    )


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    crop_pad: int = 0
    flip_p: float = 0.0
    jitter: float = 0.0
    gray_p: float = 0.0

    @classmethod
    def empty(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def pretrain(cls) -> "AugmentPolicy":
        return cls(crop_pad=4, flip_p=0.5)

    @classmethod
    def contrastive(cls) -> "AugmentPolicy":
        return cls(crop_pad=4, flip_p=0.5, jitter=0.4, gray_p=0.2)

    @property
    def is_identity(self) -> bool:
        return not (self.crop_pad or self.flip_p or self.jitter or self.gray_p)


def augment(image: np.ndarray, policy: AugmentPolicy, rng: Stream) -> np.ndarray:
    """Random pad-crop, h-flip, brightness/contrast jitter and grayscale on a u8 CHW image."""
    img = image
    C, H, W = img.shape
    if policy.crop_pad:
        p = policy.crop_pad
        padded = np.zeros((C, H + 2 * p, W + 2 * p), dtype=np.uint8)
        padded[:, p:p + H, p:p + W] = img
        oy, ox = rng.below(2 * p + 1), rng.below(2 * p + 1)
        img = padded[:, oy:oy + H, ox:ox + W]
    if policy.flip_p and rng.random() < policy.flip_p:
        img = img[:, :, ::-1]
    if policy.jitter:
        bright = 1.0 + policy.jitter * (2.0 * rng.random() - 1.0)
        contrast = 1.0 + policy.jitter * (2.0 * rng.random() - 1.0)
        f = img.astype(np.float64) * bright
        mu = f.mean()
        img = np.clip(np.rint((f - mu) * contrast + mu), 0, 255).astype(np.uint8)
    if policy.gray_p and C == 3 and rng.random() < policy.gray_p:
        g = ((77 * img[0].astype(np.int32) + 150 * img[1] + 29 * img[2]) >> 8).astype(np.uint8)
        img = np.stack([g, g, g])
    return np.ascontiguousarray(img)


def two_views(image: np.ndarray, policy: AugmentPolicy, rng: Stream) -> tuple[np.ndarray, np.ndarray]:
    a = Stream(rng.next_u64())
    b = Stream(rng.next_u64())
    return augment(image, policy, a), augment(image, policy, b)


# -- persistence -------------------------------------------------------------

MAGIC = b"RFDS"
VERSION = 1


def dataset_to_bytes(ds: Dataset) -> bytes:
    N, C, H, W = ds.images.shape
    parts = [MAGIC, struct.pack("<HIHHHH", VERSION, N, C, H, W, len(ds.class_ids))]
    for cid, name in zip(ds.class_ids, ds.class_names):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<IH", cid, len(raw)) + raw)
    tag = ds.domain_tag.encode("utf-8")
    parts.append(struct.pack("<H", len(tag)) + tag + struct.pack("<B", SPLITS.index(ds.split)))
    parts.append(ds.labels.astype("<u4").tobytes())
    parts.append(ds.images.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError("dataset file truncated")
        b = buf[pos:pos + n]
        pos += n
        return b

    version, N, C, H, W, n_cls = struct.unpack("<HIHHHH", take(14))
    if version != VERSION:
        raise DatasetFormatError(f"dataset version {version}, this reader handles {VERSION}")
    ids, names = [], []
    for _ in range(n_cls):
        cid, ln = struct.unpack("<IH", take(6))
        ids.append(cid)
        names.append(take(ln).decode("utf-8"))
    (ln,) = struct.unpack("<H", take(2))
    tag = take(ln).decode("utf-8")
    (split,) = struct.unpack("<B", take(1))
    if split >= len(SPLITS):
        raise DatasetFormatError(f"unknown split tag {split}")
    labels = np.frombuffer(take(4 * N), dtype="<u4").astype(np.int64)
    images = np.frombuffer(take(N * C * H * W), dtype=np.uint8).reshape(N, C, H, W).copy()
    if len(buf) - pos != 4:
        raise DatasetFormatError("dataset file truncated" if len(buf) - pos < 4 else "trailing bytes")
    (crc,) = struct.unpack("<I", buf[pos:])
    if zlib.crc32(buf[:pos]) != crc:
        raise DatasetFormatError("dataset CRC32 mismatch")
    return Dataset(images, labels, ids, names, tag, SPLITS[split])


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
