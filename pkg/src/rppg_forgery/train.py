"""SGD training of the filtering + interaction networks on map groups."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ndcore as nd
from .augment import BLEND_MODES, GroupPool, blend_arrays, blend_weights, sample_pair
from .errors import ConfigurationError
from .evaluation import clip_level_accuracy, confusion_and_metrics, predict_videos
from .model import (ModelConfig, ModelParams, adjacency_loss_cf, bilstm_head, features_cf, mixed_ce,
                    save_checkpoint, stfnet_cf, to_channel_major)
from .stmap import MapGroup, VideoClips, normalize_array

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainConfig:
    lr0: float = 0.1
    decay_every: int = 10
    decay_factor: float = 0.5
    max_epochs: int = 100
    beta: float = 0.1
    k: int = 4
    blend_mode: str = "inter"
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 7
    early_stop_patience: int = 5  # epochs at 100% validation accuracy; 0 disables
    stf_width: int = 16
    feat_width: int = 16
    feat_dim: int = 64
    hidden: int = 64
    feat_kernels: Tuple[Tuple[int, int], ...] = ((9, 1), (5, 3))
    feat_gain: float = 8.0

    def __post_init__(self):
        if self.lr0 < 0:
            raise ConfigurationError(f"lr0 must be non-negative, got {self.lr0}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")
        if self.k < 2:
            raise ConfigurationError(f"k must be at least 2, got {self.k}")
        if self.blend_mode not in BLEND_MODES:
            raise ConfigurationError(f"blend_mode must be one of {BLEND_MODES}, got {self.blend_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.decay_every < 1:
            raise ConfigurationError("batch_size and decay_every must be positive, max_epochs non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")

    def model_config(self, channels: int, num_classes: int) -> ModelConfig:
        return ModelConfig(channels=channels, num_classes=num_classes, stf_width=self.stf_width,
                           feat_width=self.feat_width, feat_dim=self.feat_dim, hidden=self.hidden,
                           feat_kernels=tuple(tuple(k) for k in self.feat_kernels), feat_gain=self.feat_gain)


def lr_schedule(epoch: int, lr0: float = 0.1, every: int = 10, factor: float = 0.5) -> float:
    """Step decay: ``lr0 * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return lr0 * factor ** (epoch // every)


@dataclass
class Batch:
    maps: np.ndarray  # [B, k, T, R, c], normalized
    t1: np.ndarray
    t2: np.ndarray
    alpha: np.ndarray


@dataclass
class TrainResult:
    params: ModelParams  # best validation epoch
    final_params: ModelParams
    history: List[Dict]
    best_epoch: int
    config: TrainConfig
    num_classes: int
    stride: int

    def checkpoint_extra(self, **more) -> Dict:
        extra = {"train": asdict(self.config), "num_classes": self.num_classes, "stride": self.stride,
                 "best_epoch": self.best_epoch}
        extra.update(more)
        return extra


def all_groups(videos: Sequence[VideoClips], k: int) -> List[MapGroup]:
    return [v.group(g, k) for v in videos for g in range(v.num_groups(k))]


def make_batch(anchors: Sequence[MapGroup], pool: GroupPool, mode: str, rng: np.random.Generator) -> Batch:
    maps, t1, t2, alpha = [], [], [], []
    for anchor in anchors:
        partner, a = sample_pair(pool, anchor, mode, rng)
        if mode == "none":
            data, w1 = anchor.data, 1.0
        else:
            data = blend_arrays(anchor.data, partner.data, a)
            w1 = blend_weights(a)[0]
        maps.append(normalize_array(data))
        t1.append(anchor.source_id)
        t2.append(partner.source_id)
        alpha.append(w1)
    return Batch(np.stack(maps), np.array(t1), np.array(t2), np.array(alpha))


def batch_loss(params: ModelParams, batch: Batch, stride: int, beta: float):
    """Batch-mean combined loss with its per-sample CE and adjacency parts (all tensors)."""
    b, k, t, r, c = batch.maps.shape
    x = nd.Tensor(to_channel_major(batch.maps))
    filtered = stfnet_cf(params, x)
    feats = nd.reshape(features_cf(params, filtered), (b, k, -1))
    logits = bilstm_head(params, feats)
    adj = adjacency_loss_cf(nd.reshape(filtered, (c, b, k, t, r)), stride)
    ce = mixed_ce(logits, batch.t1, batch.t2, batch.alpha)
    loss = nd.mean(ce + adj * beta) if beta else nd.mean(ce)
    return loss, ce, adj


def loss_and_grads(params: ModelParams, batch: Batch, stride: int, beta: float):
    """Forward and backward pass for one batch; returns (loss, mean CE, mean L_adj, grads)."""
    with nd.Tape():
        loss, ce, adj = batch_loss(params, batch, stride, beta)
    grads = nd.backward(loss)
    named = {name: grads[tensor] for name, tensor in params.tensors.items()}
    return loss.item(), float(ce.data.mean()), float(adj.data.mean()), named


def sgd_step(params: ModelParams, grads: Dict[str, np.ndarray], lr: float, momentum: float = 0.0,
             velocity: Optional[Dict[str, np.ndarray]] = None) -> ModelParams:
    """``p <- p - lr * g`` (heavy-ball velocity when ``momentum > 0``)."""
    new = {}
    for name, p in params.arrays().items():
        g = grads[name]
        if momentum:
            v = velocity.get(name)
            v = g if v is None else momentum * v + g
            velocity[name] = v
            g = v
        new[name] = p - lr * g
    return params.updated(new)


def validate(params: ModelParams, videos: Sequence[VideoClips], k: int, num_classes: int) -> Tuple[float, float]:
    preds, _ = predict_videos(params, videos, k)
    if not preds:
        return 0.0, 0.0
    return confusion_and_metrics(preds, num_classes).average_accuracy, clip_level_accuracy(preds)


def _check_videos(videos: Sequence[VideoClips], name: str):
    shapes = {v.clips.shape[1:] for v in videos}
    if len(shapes) > 1:
        raise ConfigurationError(f"{name} videos have inconsistent map shapes {sorted(shapes)}")
    strides = {v.stride for v in videos}
    if len(strides) > 1:
        raise ConfigurationError(f"{name} videos use different strides {sorted(strides)}")
    return shapes, strides


def train(config: TrainConfig, train_videos: Sequence[VideoClips], val_videos: Sequence[VideoClips] = (),
          num_classes: Optional[int] = None,
          on_epoch: Optional[Callable[[Dict], None]] = None) -> TrainResult:
    """Train from scratch; keeps the parameters of the best validation epoch.

    Each epoch visits every stride-1 group of ``train_videos`` once in a
    seeded random order. With blending, each anchor gets a fresh partner and
    coefficient.
    """
    shapes, strides = _check_videos(list(train_videos) + list(val_videos), "training/validation")
    if not train_videos:
        raise ConfigurationError("no training videos")
    (t, r, c), = shapes
    stride, = strides
    if stride >= t:
        raise ConfigurationError(f"stride {stride} leaves no overlap for clip length {t}")
    groups = all_groups(train_videos, config.k)
    if not groups:
        raise ConfigurationError(f"no training video has the {config.k} clips needed for a group")
    pool = GroupPool(groups)
    pool.check_mode(config.blend_mode)
    classes = sorted({v.source_id for v in train_videos})
    if len(classes) < 2:
        raise ConfigurationError(f"training needs at least 2 classes, found {classes}")
    if num_classes is None:
        num_classes = 1 + max(v.source_id for v in list(train_videos) + list(val_videos))

    init_rng = np.random.default_rng([config.seed, 0])
    data_rng = np.random.default_rng([config.seed, 1])
    params = ModelParams.init(config.model_config(c, num_classes), init_rng)
    best, best_acc, best_epoch = params, -1.0, -1
    velocity: Dict[str, np.ndarray] = {}
    history: List[Dict] = []
    perfect = 0

    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config.lr0, config.decay_every, config.decay_factor)
        order = data_rng.permutation(len(groups))
        ce_sum = rho_sum = 0.0
        seen = 0
        started = time.time()
        for step, s in enumerate(range(0, len(order), config.batch_size)):
            anchors = [groups[i] for i in order[s:s + config.batch_size]]
            batch = make_batch(anchors, pool, config.blend_mode, data_rng)
            try:
                _, ce, rho, grads = loss_and_grads(params, batch, stride, config.beta)
                bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
                if bad:
                    raise nd.NonFiniteError(f"non-finite gradient for {bad}")
                params = sgd_step(params, grads, lr, config.momentum, velocity)
            except nd.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            ce_sum += ce * len(anchors)
            rho_sum += rho * len(anchors)
            seen += len(anchors)
        if val_videos:
            val_acc, val_clip = validate(params, val_videos, config.k, num_classes)
        else:
            val_acc = val_clip = None
        entry = {"epoch": epoch, "lr": lr, "loss_ce": ce_sum / seen, "loss_rho": rho_sum / seen,
                 "val_acc": val_acc, "val_clip_acc": val_clip}
        history.append(entry)
        log.info("epoch %d lr %.4g ce %.4f rho %.4f val %s (%.1fs)", epoch, lr, entry["loss_ce"],
                 entry["loss_rho"], val_acc, time.time() - started)
        if on_epoch is not None:
            on_epoch(entry)
        score = val_acc if val_acc is not None else 0.0
        if val_acc is None or score > best_acc:
            best, best_acc, best_epoch = params, score, epoch
        perfect = perfect + 1 if val_acc == 1.0 else 0
        if config.early_stop_patience and perfect >= config.early_stop_patience:
            log.info("validation accuracy at 100%% for %d epochs; stopping", perfect)
            break
    return TrainResult(best, params, history, best_epoch, config, num_classes, stride)


def write_history(path, history: Sequence[Dict]) -> None:
    Path(path).write_text(json.dumps(list(history), indent=2))


def save_result(path, result: TrainResult, **extra) -> None:
    save_checkpoint(path, result.params, result.checkpoint_extra(**extra))


def split_videos(videos: Sequence[VideoClips], fraction: float,
                 seed: int) -> Tuple[List[VideoClips], List[VideoClips]]:
    """Per-source video-level split; ``fraction`` of each source's videos go to training."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 2])
    train_set, val_set = [], []
    for source in sorted({v.source_id for v in videos}):
        members = sorted((v for v in videos if v.source_id == source), key=lambda v: v.video_id)
        perm = rng.permutation(len(members))
        cut = int(round(fraction * len(members)))
        train_set += [members[i] for i in sorted(perm[:cut])]
        val_set += [members[i] for i in sorted(perm[cut:])]
    return train_set, val_set
