"""Training and evaluation procedures.

Supervised and contrastive pre-training, per-episode fine-tuning for the
linear / transfer / refine method family, the stage probe, and the two
ablation drivers. Every random choice is drawn from a stream derived from an
explicit seed, so results do not depend on call order or worker count.
"""

from __future__ import annotations

import hashlib
import logging
import math
import multiprocessing as mp
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from refinelab import backbone as B
from refinelab import tensor as T
from refinelab.data import AugmentPolicy, Dataset, Episode, PixelStats, augment, sample_episode, two_views
from refinelab.metrics import EvalReport
from refinelab.rerand import RerandPolicy, layer_ablation_presets, preset, rerandomize, stage_ablation_presets
from refinelab.rng import Stream, derive_seed

log = logging.getLogger(__name__)

METHODS = ("linear", "transfer", "refine", "transfer_rr_simclr", "simclr_only", "transfer_simclr")
SCOPES = ("head_only", "full_network")
FEATURE_CHUNK = 128


class MethodError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss. ``last_good`` holds the last finite state."""

    def __init__(self, message: str, last_good: B.ParamRegistry | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class MethodSpec:
    name: str
    rerand_policy: RerandPolicy | None = None
    finetune_scope: str = "full_network"

    def __post_init__(self):
        if self.name not in METHODS:
            raise MethodError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if self.finetune_scope not in SCOPES:
            raise MethodError(f"unknown fine-tune scope {self.finetune_scope!r}")
        if self.name == "linear" and self.finetune_scope != "head_only":
            raise MethodError("linear probing fine-tunes the head only")
        if self.name in ("transfer", "refine") and self.finetune_scope != "full_network":
            raise MethodError(f"{self.name} fine-tunes the full network")
        if self.name == "refine" and self.rerand_policy is None:
            raise MethodError("refine needs a re-randomization policy")

    @classmethod
    def linear(cls) -> "MethodSpec":
        return cls("linear", None, "head_only")

    @classmethod
    def transfer(cls) -> "MethodSpec":
        return cls("transfer")

    @classmethod
    def refine(cls, policy: RerandPolicy) -> "MethodSpec":
        return cls("refine", policy)

    @property
    def label(self) -> str:
        if self.name == "refine" and self.rerand_policy is not None:
            return f"refine[{self.rerand_policy.name}/{self.rerand_policy.distribution}]"
        return self.name


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings shared by all procedures.

    ``epochs`` drives pre-training, ``steps`` drives per-episode fine-tuning
    (each step uses the full support set). ``milestones`` are fractions of
    the epoch budget at which the learning rate is multiplied by ``gamma``.
    """

    epochs: int = 30
    steps: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (2 / 3, 5 / 6)
    gamma: float = 0.1
    temperature: float = 0.5
    projection_dim: int = 32
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.epochs < 0 or self.steps < 0:
            raise ValueError("epochs and steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        base = dict(steps=100, lr=0.01, momentum=0.9, weight_decay=1e-3, milestones=(), augment=False)
        base.update(kw)
        return cls(**base)

    @classmethod
    def simclr_defaults(cls, **kw) -> "TrainConfig":
        base = dict(epochs=10, batch_size=64, lr=0.05, weight_decay=1e-4, temperature=0.5, milestones=())
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for m in self.milestones:
            if epoch >= int(round(m * self.epochs)):
                lr *= self.gamma
        return lr


# -- helpers -----------------------------------------------------------------


def _sgd(leaves: dict[str, T.Tensor], lr: float, cfg: TrainConfig, velocity: dict) -> dict:
    params = {k: t.data for k, t in leaves.items() if t.requires_grad}
    grads = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(p)) for k, p in params.items()}
    velocity = T.sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
    for t in leaves.values():
        t.grad = None
    return velocity


def _all_finite(reg: B.ParamRegistry) -> bool:
    return all(np.isfinite(a).all() for _, a in reg.items())


def _augment_batch(images: np.ndarray, policy: AugmentPolicy, stream: Stream) -> np.ndarray:
    if policy.is_identity:
        return images
    return np.stack([augment(img, policy, stream) for img in images])


def feature_matrix(reg: B.ParamRegistry, x: np.ndarray, stage: int = 4) -> np.ndarray:
    """Eval-mode pooled stage features in fixed-size chunks.

    Both the linear method and the stage probe read features through here, so
    the stage-4 probe and linear probing see identical inputs.
    """
    out = []
    for i in range(0, len(x), FEATURE_CHUNK):
        out.append(B.pooled_stage_features(reg, x[i:i + FEATURE_CHUNK], stage))
    return np.concatenate(out) if out else np.zeros((0, reg.infer_config().stage_channels[stage - 1]), np.float32)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- pre-training ------------------------------------------------------------


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)  # per epoch, mean over batches
    accuracies: list[float] = field(default_factory=list)
    first_batch_loss: float | None = None
    final_train_accuracy: float | None = None  # eval mode, unaugmented
    seconds: float = 0.0


def pretrain(
    config: TrainConfig,
    source: Dataset,
    stats: PixelStats,
    backbone_config: B.BackboneConfig | None = None,
    reg: B.ParamRegistry | None = None,
) -> tuple[B.ParamRegistry, TrainLog]:
    """Supervised pre-training with a temporary K-way classifier.

    Returns the head-free registry (its init snapshot is the state before any
    update) and a per-epoch log. A non-finite loss raises
    :class:`DivergenceError` carrying the last epoch-boundary state.
    """
    if source.split != "base":
        raise MethodError("pre-training expects the base split")
    t0 = time.perf_counter()
    if reg is None:
        cfg = backbone_config or B.BackboneConfig.desk()
        cfg = replace(cfg, input_size=source.images.shape[-1], input_channels=source.images.shape[1])
        reg = B.build_backbone(cfg, config.seed)
    else:
        reg = reg.clone()
    lab_of = {c: i for i, c in enumerate(source.class_ids)}
    y_all = np.array([lab_of[int(c)] for c in source.labels], dtype=np.int64)
    B.attach_head(reg, "linear_classifier", len(source.class_ids), derive_seed(config.seed, "pretrain-head"))
    policy = AugmentPolicy.pretrain() if config.augment else AugmentPolicy.empty()
    leaves = B.leaves_for(reg, None)
    velocity: dict = {}
    logbook = TrainLog()
    N = len(source)
    bs = min(config.batch_size, N)
    for epoch in range(config.epochs):
        last_good = reg.clone()
        order = Stream.derive(config.seed, "pretrain-order", epoch).permutation(N)
        aug = Stream.derive(config.seed, "pretrain-augment", epoch)
        lr = config.lr_at(epoch)
        losses, correct = [], 0
        for b0 in range(0, N - bs + 1, bs):  # drop the ragged tail so BN never sees tiny batches
            idx = order[b0:b0 + bs]
            xb = stats.normalise(_augment_batch(source.images[idx], policy, aug))
            logits = B.forward_head(reg, B.forward_features(reg, xb, True, leaves), leaves)
            loss = T.softmax_cross_entropy(logits, y_all[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                B.detach_head(last_good)
                raise DivergenceError(f"pre-training loss became {lv} in epoch {epoch}", last_good)
            if logbook.first_batch_loss is None:
                logbook.first_batch_loss = lv
            loss.backward()
            try:
                velocity = _sgd(leaves, lr, config, velocity)
            except T.NonFiniteGradientError as exc:
                B.detach_head(last_good)
                raise DivergenceError(f"pre-training diverged in epoch {epoch}: {exc}", last_good) from None
            losses.append(lv)
            correct += int(np.sum(np.argmax(logits.data, 1) == y_all[idx]))
        if not _all_finite(reg):
            B.detach_head(last_good)
            raise DivergenceError(f"pre-training weights became non-finite in epoch {epoch}", last_good)
        logbook.losses.append(float(np.mean(losses)) if losses else float("nan"))
        logbook.accuracies.append(correct / max(1, len(losses) * bs))
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, logbook.losses[-1], logbook.accuracies[-1])
    if config.epochs:
        logits = B.forward_head(reg, T.Tensor(feature_matrix(reg, source.as_float(stats))))
        logbook.final_train_accuracy = _accuracy(logits.data, y_all)
    B.detach_head(reg)
    logbook.seconds = time.perf_counter() - t0
    return reg, logbook


def simclr_pretrain(
    start: B.ParamRegistry | None,
    unlabeled: Dataset,
    config: TrainConfig,
    stats: PixelStats,
    backbone_config: B.BackboneConfig | None = None,
) -> tuple[B.ParamRegistry, TrainLog]:
    """Contrastive training of the whole backbone on two augmented views per image.

    A projection MLP is attached for training and removed afterwards. View
    pairs are laid out as consecutive rows (2i, 2i + 1).
    """
    if config.batch_size < 2:
        raise MethodError("contrastive training needs a batch of at least 2 images")
    t0 = time.perf_counter()
    if start is None:
        cfg = backbone_config or B.BackboneConfig.desk()
        cfg = replace(cfg, input_size=unlabeled.images.shape[-1], input_channels=unlabeled.images.shape[1])
        reg = B.build_backbone(cfg, config.seed)
    else:
        reg = start.clone()
        if reg.head_paths():
            B.detach_head(reg)
    B.attach_head(reg, "projection_mlp", config.projection_dim, derive_seed(config.seed, "simclr-head"))
    policy = AugmentPolicy.contrastive() if config.augment else AugmentPolicy.empty()
    leaves = B.leaves_for(reg, None)
    velocity: dict = {}
    logbook = TrainLog()
    N = len(unlabeled)
    bs = min(config.batch_size, N)
    if bs < 2:
        raise MethodError("contrastive training needs at least 2 images")
    for epoch in range(config.epochs):
        last_good = reg.clone()
        order = Stream.derive(config.seed, "simclr-order", epoch).permutation(N)
        aug = Stream.derive(config.seed, "simclr-augment", epoch)
        lr = config.lr_at(epoch)
        losses = []
        for b0 in range(0, N - bs + 1, bs):
            views = []
            for i in order[b0:b0 + bs]:
                views.extend(two_views(unlabeled.images[i], policy, aug))
            xb = stats.normalise(np.stack(views))
            z = B.forward_head(reg, B.forward_features(reg, xb, True, leaves), leaves)
            loss = T.nt_xent(z, config.temperature)
            lv = loss.item()
            if not math.isfinite(lv):
                B.detach_head(last_good)
                raise DivergenceError(f"contrastive loss became {lv} in epoch {epoch}", last_good)
            if logbook.first_batch_loss is None:
                logbook.first_batch_loss = lv
            loss.backward()
            try:
                velocity = _sgd(leaves, lr, config, velocity)
            except T.NonFiniteGradientError as exc:
                B.detach_head(last_good)
                raise DivergenceError(f"contrastive training diverged in epoch {epoch}: {exc}", last_good) from None
            losses.append(lv)
        if not _all_finite(reg):
            B.detach_head(last_good)
            raise DivergenceError(f"contrastive weights became non-finite in epoch {epoch}", last_good)
        logbook.losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("simclr epoch %d loss %.4f", epoch, logbook.losses[-1])
    B.detach_head(reg)
    logbook.seconds = time.perf_counter() - t0
    return reg, logbook


def prepare_checkpoint(
    method: MethodSpec,
    pretrained: B.ParamRegistry | None,
    unlabeled: Dataset | None = None,
    simclr_config: TrainConfig | None = None,
    stats: PixelStats | None = None,
    backbone_config: B.BackboneConfig | None = None,
) -> B.ParamRegistry:
    """Starting checkpoint for the contrastive method variants.

    ``simclr_only`` trains a fresh backbone on the unlabeled target data,
    ``transfer_simclr`` continues from the supervised checkpoint and
    ``transfer_rr_simclr`` re-randomizes the supervised checkpoint first.
    Other methods return ``pretrained`` unchanged.
    """
    if method.name not in ("simclr_only", "transfer_simclr", "transfer_rr_simclr"):
        if pretrained is None:
            raise MethodError(f"{method.name} needs a pre-trained checkpoint")
        return pretrained
    if unlabeled is None or simclr_config is None or stats is None:
        raise MethodError(f"{method.name} needs unlabeled target data, a contrastive config and pixel stats")
    if method.name == "simclr_only":
        start = None
    else:
        if pretrained is None:
            raise MethodError(f"{method.name} needs a pre-trained checkpoint")
        start = pretrained.clone()
        if method.name == "transfer_rr_simclr":
            if method.rerand_policy is None:
                raise MethodError("transfer_rr_simclr needs a re-randomization policy")
            rerandomize(start, method.rerand_policy)
    reg, _ = simclr_pretrain(start, unlabeled, simclr_config, stats, backbone_config)
    return reg


# -- episodes ----------------------------------------------------------------


@dataclass
class EpisodeResult:
    accuracy: float
    support_loss_before: float
    support_loss_after: float


def _head_only(
    feats_s: np.ndarray,
    y_s: np.ndarray,
    feats_q: np.ndarray,
    y_q: np.ndarray,
    n: int,
    config: TrainConfig,
    head_seed: int,
    track_loss: bool,
) -> EpisodeResult:
    w, b = B.init_linear(n, feats_s.shape[1], head_seed)
    leaves = {"weight": T.Tensor(w, requires_grad=True), "bias": T.Tensor(b, requires_grad=True)}
    xs = T.Tensor(feats_s)
    velocity: dict = {}
    before = float("nan")
    for step in range(config.steps):
        loss = T.softmax_cross_entropy(T.linear(xs, leaves["weight"], leaves["bias"]), y_s)
        if step == 0:
            before = loss.item()
        loss.backward()
        velocity = _sgd(leaves, config.lr, config, velocity)
    after = float("nan")
    if track_loss or not config.steps:
        after = T.softmax_cross_entropy(T.linear(xs, T.Tensor(w), T.Tensor(b)), y_s).item()
        if not config.steps:
            before = after
    return EpisodeResult(_accuracy(feats_q @ w.T + b, y_q), before, after)


def _support_loss(work: B.ParamRegistry, xs: np.ndarray, ys: np.ndarray) -> float:
    # train-mode forward on a throwaway copy, matching how the fit loss is measured
    probe = work.clone(include_snapshot=False)
    return T.softmax_cross_entropy(B.forward_head(probe, B.forward_features(probe, xs, True)), ys).item()


def finetune_episode(
    reg: B.ParamRegistry,
    episode: Episode,
    images: np.ndarray,
    method: MethodSpec,
    config: TrainConfig,
    head_seed: int,
    features: np.ndarray | None = None,
    stage: int = 4,
    track_loss: bool = False,
) -> EpisodeResult:
    """Fit a fresh n-way head (and, for full-network methods, the backbone) on the support set.

    ``images`` is the normalised float image array the episode indexes into.
    Head-only methods may pass precomputed eval-mode ``features`` for the same
    array. ``reg`` is never modified.
    """
    if reg.head_paths():
        raise MethodError("fine-tuning expects a head-free checkpoint")
    n = episode.n_way
    if method.finetune_scope == "head_only":
        if features is None:
            fs = feature_matrix(reg, images[episode.support_idx], stage)
            fq = feature_matrix(reg, images[episode.query_idx], stage)
        else:
            fs, fq = features[episode.support_idx], features[episode.query_idx]
        return _head_only(fs, episode.support_labels, fq, episode.query_labels, n, config, head_seed, track_loss)
    if stage != 4:
        raise MethodError("full-network fine-tuning always reads the final embedding")
    work = reg.clone(include_snapshot=False)
    B.attach_head(work, "linear_classifier", n, head_seed)
    leaves = B.leaves_for(work, None)
    xs = np.ascontiguousarray(images[episode.support_idx])
    ys = episode.support_labels
    velocity: dict = {}
    before = float("nan")
    for step in range(config.steps):
        logits = B.forward_head(work, B.forward_features(work, xs, True, leaves), leaves)
        loss = T.softmax_cross_entropy(logits, ys)
        lv = loss.item()
        if not math.isfinite(lv):
            raise DivergenceError(f"fine-tuning loss became {lv} at step {step}")
        if step == 0:
            before = lv
        loss.backward()
        velocity = _sgd(leaves, config.lr, config, velocity)
    after = float("nan")
    if track_loss or not config.steps:
        after = _support_loss(work, xs, ys)
        if not config.steps:
            before = after
    q = []
    for i in range(0, len(episode.query_idx), FEATURE_CHUNK):
        xq = images[episode.query_idx[i:i + FEATURE_CHUNK]]
        q.append(B.forward_head(work, B.forward_features(work, xq, False)).data)
    return EpisodeResult(_accuracy(np.concatenate(q), episode.query_labels), before, after)


# -- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class EvalParams:
    n: int = 5
    k: int = 5
    k_q: int = 15
    T: int = 600
    seed: int = 0
    workers: int = 1


def episode_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "episode", index)


def _run_episode(ctx: dict, index: int) -> EpisodeResult:
    es = episode_seed(ctx["seed"], index)
    ep = sample_episode(ctx["dataset"], ctx["n"], ctx["k"], ctx["k_q"], Stream.derive(es, "sample"))
    return finetune_episode(
        ctx["reg"], ep, ctx["images"], ctx["method"], ctx["config"], derive_seed(es, "head"),
        ctx.get("features"), ctx.get("stage", 4),
    )


_WORKER_CTX: dict | None = None


def _init_worker(ctx: dict) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker_episode(index: int) -> EpisodeResult:
    assert _WORKER_CTX is not None
    return _run_episode(_WORKER_CTX, index)


def run_episodes(ctx: dict, T_: int, workers: int = 1) -> list[EpisodeResult]:
    """Episodes 0..T-1; results are ordered by index whatever the worker count."""
    if T_ < 1:
        raise ValueError("T must be at least 1")
    if workers <= 1 or T_ == 1:
        return [_run_episode(ctx, i) for i in range(T_)]
    method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
    with ProcessPoolExecutor(workers, mp.get_context(method), initializer=_init_worker, initargs=(ctx,)) as pool:
        return list(pool.map(_worker_episode, range(T_), chunksize=max(1, T_ // (4 * workers))))


@dataclass
class Evaluation:
    report: EvalReport
    results: list[EpisodeResult]
    surgery: list[str]


def evaluate_detailed(
    reg: B.ParamRegistry,
    method: MethodSpec,
    novel: Dataset,
    stats: PixelStats,
    params: EvalParams,
    config: TrainConfig | None = None,
    source_tag: str = "source",
    per_episode_rerand: bool = False,
) -> Evaluation:
    config = config or TrainConfig.finetune_defaults()
    work = reg
    surgery: list[str] = []
    policy = method.rerand_policy if method.name == "refine" else None
    if policy is not None and not policy.is_noop and not per_episode_rerand:
        work = reg.clone()
        surgery = rerandomize(work, policy)
    images = novel.as_float(stats)
    ctx = dict(
        reg=work, dataset=novel, images=images, method=method, config=config,
        n=params.n, k=params.k, k_q=params.k_q, seed=params.seed,
    )
    if method.finetune_scope == "head_only":
        ctx["features"] = feature_matrix(work, images, 4)
    if per_episode_rerand and policy is not None and not policy.is_noop:
        results = []
        for i in range(params.T):
            w = reg.clone()
            surgery = rerandomize(w, policy.with_(seed=derive_seed(policy.seed, "episode", i)))
            results.append(_run_episode(dict(ctx, reg=w), i))
    else:
        results = run_episodes(ctx, params.T, params.workers)
    report = EvalReport(
        [r.accuracy for r in results], params.n, params.k, params.k_q, method.label,
        source_tag, novel.domain_tag, params.seed,
    )
    return Evaluation(report, results, surgery)


def evaluate(
    reg: B.ParamRegistry,
    method: MethodSpec,
    novel: Dataset,
    stats: PixelStats,
    params: EvalParams,
    config: TrainConfig | None = None,
    source_tag: str = "source",
) -> EvalReport:
    return evaluate_detailed(reg, method, novel, stats, params, config, source_tag).report


def stage_probe(
    reg: B.ParamRegistry,
    target: Dataset,
    stats: PixelStats,
    params: EvalParams,
    config: TrainConfig | None = None,
    source_tag: str = "source",
) -> list[EvalReport]:
    """Frozen-backbone linear probe on the pooled output of each stage."""
    config = config or TrainConfig.finetune_defaults()
    images = target.as_float(stats)
    method = MethodSpec.linear()
    reports = []
    for s in (1, 2, 3, 4):
        ctx = dict(
            reg=reg, dataset=target, images=images, method=method, config=config,
            n=params.n, k=params.k, k_q=params.k_q, seed=params.seed,
            features=feature_matrix(reg, images, s), stage=s,
        )
        res = run_episodes(ctx, params.T, params.workers)
        reports.append(
            EvalReport([r.accuracy for r in res], params.n, params.k, params.k_q, f"stage{s}",
                       source_tag, target.domain_tag, params.seed)
        )
    return reports


def ablate_where(
    reg: B.ParamRegistry,
    novel: Dataset,
    stats: PixelStats,
    presets: Sequence[RerandPolicy],
    params: EvalParams,
    shots: Sequence[int] = (1, 5),
    config: TrainConfig | None = None,
    source_tag: str = "source",
) -> list[EvalReport]:
    """One report per (preset, shot); ``none`` presets run as the Transfer baseline."""
    out = []
    for pol in presets:
        method = MethodSpec.transfer() if pol.is_noop else MethodSpec.refine(pol)
        for k in shots:
            rep = evaluate(reg, method, novel, stats, replace(params, k=k), config, source_tag)
            rep.method = pol.name
            out.append(rep)
    return out


def ablate_how(
    reg: B.ParamRegistry,
    novel: Dataset,
    stats: PixelStats,
    distributions: Sequence[str],
    params: EvalParams,
    shots: Sequence[int] = (1, 5),
    config: TrainConfig | None = None,
    policy_seed: int = 0,
    source_tag: str = "source",
) -> list[EvalReport]:
    """``topmost`` surgery under each distribution."""
    out = []
    for dist in distributions:
        pol = preset("topmost", reg, distribution=dist, seed=policy_seed)
        for k in shots:
            rep = evaluate(reg, MethodSpec.refine(pol), novel, stats, replace(params, k=k), config, source_tag)
            rep.method = dist
            out.append(rep)
    return out


def where_presets(kind: str, reg: B.ParamRegistry, distribution: str = "uniform", seed: int = 0) -> list[RerandPolicy]:
    if kind == "stages":
        return stage_ablation_presets(distribution, seed)
    if kind == "layers":
        return [preset("none", distribution=distribution, seed=seed)] + layer_ablation_presets(distribution, seed)
    raise MethodError(f"unknown ablation preset family {kind!r}; expected stages or layers")


# -- manifests ---------------------------------------------------------------


def file_digests(data: bytes) -> dict:
    return {"crc32": f"{zlib.crc32(data):08x}", "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}


def manifest(
    command: str,
    config_text: str,
    seeds: dict,
    inputs: dict[str, bytes] | None = None,
    outputs: dict[str, bytes] | None = None,
    surgery: Sequence[str] = (),
    seconds: float = 0.0,
    overrides: Sequence[str] = (),
    extra: dict | None = None,
) -> dict:
    """Run record: what ran, with which config and seeds, on and into which bytes."""
    return {
        "command": command,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "overrides": list(overrides),
        "seeds": dict(seeds),
        "inputs": {k: file_digests(v) for k, v in sorted((inputs or {}).items())},
        "outputs": {k: file_digests(v) for k, v in sorted((outputs or {}).items())},
        "surgery": list(surgery),
        "wall_seconds": round(seconds, 3),
        "bn_mode": {"support_fit": "train", "query": "eval"},
        **(extra or {}),
    }


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
