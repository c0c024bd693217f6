"""Filtering and interaction networks, their losses, and checkpoints.

Maps enter as ``[..., k, T, R, c]`` arrays. Internally every conv stage runs
channel-major on ``[c, N, T, R]`` (the batch layout of ``ndcore.conv2d``);
all convs use same padding so the time axis stays aligned.

Filtering network (per map): ``backbone(x) + shortcut(x)`` with
``backbone = conv3x3(c->W) -> tanh -> conv3x3(W->c)`` and a 1x1 ``shortcut``.

Interaction network (per group): each filtered map goes through two
``conv3x3 -> tanh -> 2x2 mean pool`` stages and a global spatial mean,
giving a length-k sequence of D-wide features. A forward and a backward
LSTM read the sequence; at each step ``[h_fwd; h_bwd]`` feeds a linear head.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import ndcore as nd
from .errors import ContractError, FormatError
from .ndcore import Tensor

ADJACENCY_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    num_classes: int = 6
    stf_width: int = 16
    feat_width: int = 16
    feat_dim: int = 64
    hidden: int = 64
    feat_kernels: Tuple[Tuple[int, int], ...] = ((9, 1), (5, 3))  # (time, row) kernel per feature stage
    feat_gain: float = 8.0  # multiplies the init bound of the feature-extractor kernels

    def __post_init__(self):
        kernels = tuple(tuple(int(v) for v in k) for k in self.feat_kernels)
        object.__setattr__(self, "feat_kernels", kernels)
        if len(kernels) != 2 or any(len(k) != 2 or min(k) < 1 or k[0] % 2 == 0 or k[1] % 2 == 0
                                    for k in kernels):
            raise ContractError(f"feat_kernels must be two (time, row) pairs of positive odd sizes, got {kernels}")
        if self.feat_gain <= 0:
            raise ContractError(f"feat_gain must be positive, got {self.feat_gain}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        for name in ("channels", "stf_width", "feat_width", "feat_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[Tuple[int, ...], int]]":
    """Name -> (shape, fan_in) for every learnable array."""
    c, w, f1, d, h, k = cfg.channels, cfg.stf_width, cfg.feat_width, cfg.feat_dim, cfg.hidden, cfg.num_classes
    spec = OrderedDict()
    spec["stf.conv1.weight"] = ((w, c, 3, 3), c * 9)
    spec["stf.conv1.bias"] = ((w,), c * 9)
    spec["stf.conv2.weight"] = ((c, w, 3, 3), w * 9)
    spec["stf.conv2.bias"] = ((c,), w * 9)
    spec["stf.shortcut.weight"] = ((c, c, 1, 1), c)
    spec["stf.shortcut.bias"] = ((c,), c)
    (a1, b1), (a2, b2) = cfg.feat_kernels
    spec["feat.conv1.weight"] = ((f1, c, a1, b1), c * a1 * b1)
    spec["feat.conv1.bias"] = ((f1,), c * a1 * b1)
    spec["feat.conv2.weight"] = ((d, f1, a2, b2), f1 * a2 * b2)
    spec["feat.conv2.bias"] = ((d,), f1 * a2 * b2)
    for direction in ("fwd", "bwd"):
        spec[f"lstm.{direction}.w_ih"] = ((4 * h, d), d)
        spec[f"lstm.{direction}.w_hh"] = ((4 * h, h), h)
        spec[f"lstm.{direction}.bias"] = ((4 * h,), h)
    spec["head.weight"] = ((k, 2 * h), 2 * h)
    spec["head.bias"] = ((k,), 2 * h)
    return spec


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ContractError(f"parameter names {list(tensors)} do not match {list(expected)}")
        for name, (shape, _) in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        tensors = OrderedDict()
        for name, (shape, fan_in) in param_shapes(config).items():
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            if name in ("feat.conv1.weight", "feat.conv2.weight"):
                # zero-sum kernels ignore the map's DC level, so a large gain
                # drives tanh into its nonlinear range without saturating on it
                w = config.feat_gain * (w - w.mean(axis=(1, 2, 3), keepdims=True))
            tensors[name] = nd.parameter(w)
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, OrderedDict((n, nd.parameter(arrays[n])) for n in param_shapes(config)))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls.from_arrays(config, {n: np.zeros(s) for n, (s, _) in param_shapes(config).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self.tensors.items())

    def updated(self, new_arrays: Dict[str, np.ndarray]) -> "ModelParams":
        merged = self.arrays()
        merged.update(new_arrays)
        return ModelParams.from_arrays(self.config, merged)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def lstm(self, direction: str) -> nd.LSTMWeights:
        return nd.LSTMWeights(self[f"lstm.{direction}.w_ih"], self[f"lstm.{direction}.w_hh"],
                              self[f"lstm.{direction}.bias"])


Array = Union[np.ndarray, Tensor]


def _as_tensor(x: Array) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_maps(x: Tensor, params: ModelParams) -> None:
    if x.shape[-1] != params.config.channels:
        raise ContractError(f"maps have {x.shape[-1]} channels, model expects {params.config.channels}")


# -------------------------------------------------------- channel-first core


def stfnet_cf(params: ModelParams, x: Tensor) -> Tensor:
    """``[c, N, T, R] -> [c, N, T, R]``."""
    hidden = nd.tanh(nd.conv2d(x, params["stf.conv1.weight"], params["stf.conv1.bias"]))
    backbone = nd.conv2d(hidden, params["stf.conv2.weight"], params["stf.conv2.bias"])
    shortcut = nd.conv2d(x, params["stf.shortcut.weight"], params["stf.shortcut.bias"])
    return backbone + shortcut


def features_cf(params: ModelParams, p: Tensor) -> Tensor:
    """``[c, N, T, R] -> [N, D]``."""
    h = nd.avg_pool2d(nd.tanh(nd.conv2d(p, params["feat.conv1.weight"], params["feat.conv1.bias"])), 2)
    h = nd.avg_pool2d(nd.tanh(nd.conv2d(h, params["feat.conv2.weight"], params["feat.conv2.bias"])), 2)
    return nd.transpose(nd.mean(h, axis=(2, 3)))


def bilstm_head(params: ModelParams, feats: Tensor) -> Tensor:
    """``[B, k, D] -> [B, k, K]`` logits."""
    b, k, _ = feats.shape
    if k < 2:
        raise ContractError(f"the bidirectional sequence needs k >= 2 steps, got {k}")
    hsize = params.config.hidden
    zero = Tensor(np.zeros((b, hsize)))
    steps = [feats[:, t, :] for t in range(k)]
    fwd, h, c = [], zero, zero
    w = params.lstm("fwd")
    for x in steps:
        h, c = nd.lstm_cell(x, h, c, w)
        fwd.append(h)
    bwd, h, c = [None] * k, zero, zero
    w = params.lstm("bwd")
    for t in range(k - 1, -1, -1):
        h, c = nd.lstm_cell(steps[t], h, c, w)
        bwd[t] = h
    seq = nd.stack([nd.concat([hf, hb], axis=-1) for hf, hb in zip(fwd, bwd)], axis=1)  # [B, k, 2H]
    return seq @ params["head.weight"].T + params["head.bias"]


def adjacency_loss_cf(filtered: Tensor, stride: int, eps: float = ADJACENCY_EPS) -> Tensor:
    """``[c, B, k, T, R] -> [B]`` negative-Pearson overlap penalty."""
    _, _, k, t, _ = filtered.shape
    overlap = t - stride
    if overlap <= 0 or stride < 1:
        raise ContractError(f"stride {stride} leaves no overlap for clip length {t}")
    if k < 2:
        raise ContractError(f"adjacency loss needs k >= 2, got {k}")
    tail = filtered[:, :, :-1, stride:, :]
    head = filtered[:, :, 1:, :overlap, :]
    r = nd.pearson(tail, head, axis=3, eps=eps)  # [c, B, k-1, R]
    pair = nd.mean(r, axis=(0, 3))
    return 1.0 - nd.mean(pair, axis=1)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_labels(labels, num_classes: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ContractError(f"target class out of range [0, {num_classes}): {arr.tolist()}")
    return arr


def ce_per_sample(logits: Tensor, labels: np.ndarray) -> Tensor:
    """``[B, k, K]`` logits, ``[B]`` labels -> ``[B]`` step-averaged cross-entropy."""
    logp = nd.log_softmax(logits, axis=-1)
    onehot = Tensor(_one_hot(labels, logits.shape[-1])[:, None, :])
    return -nd.mean(nd.sum_(logp * onehot, axis=-1), axis=-1)


def mixed_ce(logits: Tensor, t1, t2, alpha) -> Tensor:
    """Per-sample ``alpha CE(t1) + (1 - alpha) CE(t2)``; samples with ``t1 == t2`` use ``CE(t1)`` directly."""
    num_classes = logits.shape[-1]
    t1 = _check_labels(t1, num_classes)
    t2 = _check_labels(t2, num_classes)
    ce1 = ce_per_sample(logits, t1)
    same = t1 == t2
    if same.all():
        return ce1
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    ce2 = ce_per_sample(logits, t2)
    mixed = ce1 * Tensor(a) + ce2 * Tensor(1.0 - a)
    return ce1 * Tensor(same.astype(np.float64)) + mixed * Tensor((~same).astype(np.float64))


def combined_loss(logits: Tensor, t1, t2, alpha, adjacency: Tensor, beta: float) -> Tensor:
    """Batch mean of ``alpha CE(t1) + (1 - alpha) CE(t2) + beta L_adj``."""
    ce = mixed_ce(logits, t1, t2, alpha)
    return nd.mean(ce + adjacency * beta if beta else ce)


# ------------------------------------------------------ map-layout interface


def _to_cf(x: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
    # [..., T, R, c] -> [c, N, T, R]
    lead = x.shape[:-3]
    t, r, c = x.shape[-3:]
    flat = nd.reshape(x, (-1, t, r, c))
    return nd.transpose(flat, (3, 0, 1, 2)), lead


def _from_cf(x: Tensor, lead: Tuple[int, ...]) -> Tensor:
    c, n, t, r = x.shape
    return nd.reshape(nd.transpose(x, (1, 2, 3, 0)), lead + (t, r, c))


def to_channel_major(groups: np.ndarray) -> np.ndarray:
    """``[B, k, T, R, c]`` array -> contiguous ``[c, B * k, T, R]``."""
    b, k, t, r, c = groups.shape
    return np.ascontiguousarray(groups.transpose(4, 0, 1, 2, 3)).reshape(c, b * k, t, r)


def stfnet_forward(group: Array, params: ModelParams) -> Tensor:
    """Filter normalized maps ``[..., k, T, R, c]``; the output has the same shape."""
    x = _as_tensor(group)
    if x.ndim < 3:
        raise ContractError(f"maps must be [..., T, R, c], got {x.shape}")
    _check_maps(x, params)
    cf, lead = _to_cf(x)
    return _from_cf(stfnet_cf(params, cf), lead)


def stinet_forward(filtered: Array, params: ModelParams) -> Tensor:
    """Filtered group ``[k, T, R, c]`` or ``[B, k, T, R, c]`` -> logits ``[k, K]`` / ``[B, k, K]``."""
    x = _as_tensor(filtered)
    single = x.ndim == 4
    if single:
        x = nd.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ContractError(f"filtered group must be [k, T, R, c] or [B, k, T, R, c], got {x.shape}")
    b, k = x.shape[:2]
    if k < 2:
        raise ContractError(f"the bidirectional sequence needs k >= 2 steps, got {k}")
    _check_maps(x, params)
    cf, _ = _to_cf(x)
    feats = nd.reshape(features_cf(params, cf), (b, k, -1))
    logits = bilstm_head(params, feats)
    return nd.reshape(logits, logits.shape[1:]) if single else logits


def clip_ce_loss(logits: Array, target: int) -> Tensor:
    """``-(1/k) sum_n log_softmax(x^n)[target]`` for ``[k, K]`` logits."""
    x = _as_tensor(logits)
    if x.ndim != 2:
        raise ContractError(f"logits must be [k, K], got {x.shape}")
    t = _check_labels(target, x.shape[-1])
    return nd.reshape(ce_per_sample(nd.reshape(x, (1,) + x.shape), t), ())


def adjacency_loss(filtered: Array, stride: int, eps: float = ADJACENCY_EPS) -> Tensor:
    """Overlap penalty for ``[k, T, R, c]`` (scalar) or ``[B, k, T, R, c]`` (per sample)."""
    x = _as_tensor(filtered)
    single = x.ndim == 4
    if single:
        x = nd.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ContractError(f"filtered group must be [k, T, R, c] or [B, k, T, R, c], got {x.shape}")
    cf = nd.transpose(x, (4, 0, 1, 2, 3))
    out = adjacency_loss_cf(cf, stride, eps)
    return nd.reshape(out, ()) if single else out


def total_loss(logits: Array, t1: int, t2: int, alpha: float, adjacency: Array, beta: float) -> Tensor:
    """Blended-label objective for one group; reduces to ``CE(t) + beta L_adj`` when ``t1 == t2``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0:
        raise ContractError(f"beta must be non-negative, got {beta}")
    x = _as_tensor(logits)
    adj = _as_tensor(adjacency)
    if t1 == t2:
        ce = clip_ce_loss(x, t1)
    else:
        ce = clip_ce_loss(x, t1) * alpha + clip_ce_loss(x, t2) * (1.0 - alpha)
    return ce + adj * beta if beta else ce


# ------------------------------------------------------------------ inference


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def group_probabilities(params: ModelParams, groups: np.ndarray) -> np.ndarray:
    """Normalized ``[B, k, T, R, c]`` groups -> ``[B, K]`` mean per-step softmax."""
    logits = stinet_forward(stfnet_forward(groups, params), params).data
    return softmax(logits).mean(axis=-2)


def clip_features(params: ModelParams, clips: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Normalized ``[n, T, R, c]`` clips -> ``[n, D]`` features, without recording."""
    out = []
    for s in range(0, clips.shape[0], chunk):
        x = Tensor(np.ascontiguousarray(clips[s:s + chunk].transpose(3, 0, 1, 2)))
        out.append(features_cf(params, stfnet_cf(params, x)).data)
    return np.concatenate(out, axis=0)


def window_probabilities(params: ModelParams, feats: np.ndarray, k: int) -> np.ndarray:
    """Per-clip features ``[n, D]`` -> ``[n - k + 1, K]`` group probabilities (stride-1 windows)."""
    n = feats.shape[0]
    if n < k:
        return np.zeros((0, params.config.num_classes))
    windows = np.stack([feats[g:g + k] for g in range(n - k + 1)])
    logits = bilstm_head(params, Tensor(windows)).data
    return softmax(logits).mean(axis=-2)


# ----------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"RPPG"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra: Optional[Dict] = None) -> None:
    """Write ``params`` and a JSON config block (model config plus ``extra``)."""
    doc = {"model": asdict(params.config)}
    if extra:
        doc.update(extra)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for name, arr in params.arrays().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Tuple[ModelParams, Dict]:
    raw = memoryview(open(path, "rb").read())
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", len(raw))
    if bytes(raw[:4]) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {bytes(raw[:4])!r}, expected {CKPT_MAGIC!r}", 0)
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    pos = 12
    if pos + blob_len > len(raw):
        raise FormatError(f"{path}: truncated config block", len(raw))
    try:
        doc = json.loads(bytes(raw[pos:pos + blob_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable config block ({exc})", pos) from None
    pos += blob_len
    arrays: Dict[str, np.ndarray] = {}
    while pos < len(raw):
        start = pos
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated record name length", pos)
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + name_len + 4 > len(raw):
            raise FormatError(f"{path}: truncated record name", pos)
        name = bytes(raw[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 4 * rank > len(raw):
            raise FormatError(f"{path}: truncated dims of {name}", pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data of {name} (record at {start})", pos)
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    config = ModelConfig(**doc["model"])
    missing = [n for n in param_shapes(config) if n not in arrays]
    if missing:
        raise FormatError(f"{path}: missing parameter records {missing}", pos)
    return ModelParams.from_arrays(config, arrays), doc
