"""Spatial-temporal PPG maps from per-ROI color traces.

A trace holds the per-frame mean color of ``n`` face sub-regions. A clip of
``T`` frames becomes a map of shape ``T x (2**n - 1) x c``: row ``s`` (a
1-based bitmask over the sub-regions, bit ``j`` = region ``j``) is the mean
signal of the regions in ``s``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

log = logging.getLogger(__name__)

MAP_MAGIC = b"STMP"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4s7I")
MAP_HEADER_SIZE = _MAP_HEADER.size  # 32 bytes


@dataclass
class RoiTrace:
    video_id: int
    source_id: int
    fps: float
    frames: np.ndarray  # [F, n, c]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise ContractError(f"trace frames must be a non-empty [F, n, c] array, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ContractError(f"trace for video {self.video_id} contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_rois(self) -> int:
        return self.frames.shape[1]

    @property
    def channels(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class ClipSpec:
    clip_len: int = 64
    stride: int = 16
    k: int = 4

    def __post_init__(self):
        if not 1 <= self.stride < self.clip_len:
            raise ConfigurationError(f"need 1 <= stride < clip_len, got stride={self.stride}, clip_len={self.clip_len}")
        if self.k < 2:
            raise ConfigurationError(f"k must be at least 2, got {self.k}")

    @property
    def overlap(self) -> int:
        return self.clip_len - self.stride


@dataclass
class SpatioTemporalMap:
    data: np.ndarray  # [T, R, c]
    video_id: int
    source_id: int
    clip_index: int


@dataclass
class MapGroup:
    """``k`` maps from consecutive clips of one video, possibly blended with a partner."""

    data: np.ndarray  # [k, T, R, c]
    video_id: int
    source_id: int
    clip_index: int  # index of the first clip
    partner_source: Optional[int] = None
    alpha: float = 1.0

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def t1(self) -> int:
        return self.source_id

    @property
    def t2(self) -> int:
        return self.source_id if self.partner_source is None else self.partner_source

    @property
    def maps(self) -> List[SpatioTemporalMap]:
        return [SpatioTemporalMap(self.data[j], self.video_id, self.source_id, self.clip_index + j)
                for j in range(self.k)]


def num_rows(n_rois: int) -> int:
    return 2 ** n_rois - 1


def subset_masks(n_rois: int) -> np.ndarray:
    """Boolean ``[2**n - 1, n]`` membership table in ascending bitmask order."""
    masks = np.arange(1, 2 ** n_rois)
    return ((masks[:, None] >> np.arange(n_rois)[None, :]) & 1).astype(bool)


def subset_signals(frames: np.ndarray) -> np.ndarray:
    """Subset means of ``[F, n, c]`` frames as an ``[F, 2**n - 1, c]`` array.

    Members are summed in ascending region order and divided by the subset
    size; every frame is computed independently, so slicing the frames and
    slicing the result give bit-identical values.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[1]
    member = subset_masks(n).astype(np.float64)  # [R, n]
    out = np.zeros((frames.shape[0], member.shape[0], frames.shape[2]))
    for r in range(n):
        out += member[None, :, r, None] * frames[:, r:r + 1, :]
    out /= member.sum(axis=1)[None, :, None]
    return out


def segment_clips(trace: RoiTrace, spec: ClipSpec) -> List[int]:
    """Start frames of all complete clips; incomplete tails are dropped."""
    f = trace.num_frames
    if f < spec.clip_len:
        return []
    return list(range(0, f - spec.clip_len + 1, spec.stride))


def build_map(trace: RoiTrace, start: int, spec: ClipSpec) -> SpatioTemporalMap:
    if start < 0 or start + spec.clip_len > trace.num_frames:
        raise ContractError(
            f"clip [{start}, {start + spec.clip_len}) out of range for video {trace.video_id} "
            f"with {trace.num_frames} frames")
    if start % spec.stride:
        raise ContractError(f"clip start {start} is not a multiple of stride {spec.stride}")
    data = subset_signals(trace.frames[start:start + spec.clip_len])
    return SpatioTemporalMap(data, trace.video_id, trace.source_id, start // spec.stride)


def normalize_array(data: np.ndarray) -> np.ndarray:
    """Min-max rescale each ``[T, R]`` plane (per channel, per map) of ``[..., T, R, c]`` to [0, 1].

    A constant plane becomes 0.5.
    """
    lo = data.min(axis=(-3, -2), keepdims=True)
    span = data.max(axis=(-3, -2), keepdims=True) - lo
    out = np.full(data.shape, 0.5)
    np.divide(data - lo, span, out=out, where=np.broadcast_to(span > 0, data.shape))
    return out


def normalize_map(m: SpatioTemporalMap) -> SpatioTemporalMap:
    return SpatioTemporalMap(normalize_array(m.data), m.video_id, m.source_id, m.clip_index)


@dataclass
class VideoClips:
    """All un-normalized clip maps of one video, ``clips[i]`` starting at frame ``i * stride``."""

    video_id: int
    source_id: int
    clips: np.ndarray  # [num_clips, T, R, c]
    stride: int

    @property
    def num_clips(self) -> int:
        return self.clips.shape[0]

    def num_groups(self, k: int) -> int:
        return max(0, self.num_clips - k + 1)

    def group(self, first: int, k: int) -> MapGroup:
        return MapGroup(self.clips[first:first + k], self.video_id, self.source_id, first)

    def maps(self) -> List[SpatioTemporalMap]:
        return [SpatioTemporalMap(self.clips[i], self.video_id, self.source_id, i)
                for i in range(self.num_clips)]


def extract_video(trace: RoiTrace, spec: ClipSpec) -> Optional[VideoClips]:
    """Every clip map of ``trace`` as a zero-copy view; None when the video is shorter than a clip."""
    starts = segment_clips(trace, spec)
    if not starts:
        log.warning("video %d has %d frames, fewer than clip length %d; skipped",
                    trace.video_id, trace.num_frames, spec.clip_len)
        return None
    signals = subset_signals(trace.frames)
    s0, s1, s2 = signals.strides
    clips = np.lib.stride_tricks.as_strided(
        signals, shape=(len(starts), spec.clip_len) + signals.shape[1:],
        strides=(spec.stride * s0, s0, s1, s2), writeable=False)
    return VideoClips(trace.video_id, trace.source_id, clips, spec.stride)


def group_adjacent(maps: Sequence[SpatioTemporalMap], k: int) -> List[MapGroup]:
    """Width-``k``, stride-1 windows over one video's clip sequence."""
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    idx = [m.clip_index for m in maps]
    if idx != sorted(idx):
        raise ContractError("maps must be sorted by clip_index")
    groups = []
    for g in range(len(maps) - k + 1):
        window = maps[g:g + k]
        if any(b.clip_index != a.clip_index + 1 for a, b in zip(window, window[1:])):
            continue
        if len({m.video_id for m in window}) != 1:
            raise ContractError("adjacent maps must come from one video")
        groups.append(MapGroup(np.stack([m.data for m in window]), window[0].video_id,
                               window[0].source_id, window[0].clip_index))
    return groups


# ------------------------------------------------------------------ map files


def write_map(path, m: SpatioTemporalMap) -> None:
    data = np.ascontiguousarray(m.data, dtype="<f8")
    if data.ndim != 3:
        raise ContractError(f"map data must be [T, R, c], got {data.shape}")
    t, r, c = data.shape
    header = _MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, t, r, c, m.video_id, m.source_id, m.clip_index)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_map(path) -> SpatioTemporalMap:
    raw = Path(path).read_bytes()
    if len(raw) < MAP_HEADER_SIZE:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes", len(raw))
    magic, version, t, r, c, vid, sid, clip = _MAP_HEADER.unpack_from(raw, 0)
    if magic != MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAP_MAGIC!r}", 0)
    if version != MAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    need = MAP_HEADER_SIZE + t * r * c * 8
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw) - MAP_HEADER_SIZE} bytes, expected {t * r * c * 8}",
                          min(len(raw), need))
    data = np.frombuffer(raw, dtype="<f8", offset=MAP_HEADER_SIZE).reshape(t, r, c).astype(np.float64)
    return SpatioTemporalMap(data, vid, sid, clip)


def map_filename(video_id: int, clip_index: int) -> str:
    return f"video{video_id:05d}_clip{clip_index:04d}.stmp"


INDEX_NAME = "maps.json"


def write_map_dir(out_dir, videos: Iterable[VideoClips], spec: ClipSpec, n_rois: int) -> Dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    channels = None
    for v in videos:
        for m in v.maps():
            write_map(out / map_filename(m.video_id, m.clip_index), m)
        channels = v.clips.shape[-1]
        entries.append({"video_id": v.video_id, "source_id": v.source_id, "num_clips": v.num_clips})
    index = {"clip_len": spec.clip_len, "stride": spec.stride, "n_rois": n_rois,
             "channels": channels, "videos": entries}
    (out / INDEX_NAME).write_text(json.dumps(index, indent=2))
    return index


def read_map_dir(map_dir) -> Tuple[Dict, List[VideoClips]]:
    """Load a directory written by :func:`write_map_dir`."""
    root = Path(map_dir)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise FileNotFoundError(f"no {INDEX_NAME} in {root}")
    index = json.loads(index_path.read_text())
    videos = []
    for entry in index["videos"]:
        vid = entry["video_id"]
        maps = [read_map(root / map_filename(vid, i)) for i in range(entry["num_clips"])]
        for i, m in enumerate(maps):
            if m.video_id != vid or m.clip_index != i:
                raise FormatError(f"{map_filename(vid, i)}: header says video {m.video_id} clip {m.clip_index}", 20)
        clips = np.stack([m.data for m in maps])
        videos.append(VideoClips(vid, entry["source_id"], clips, index["stride"]))
    return index, videos


# ---------------------------------------------------------------- trace files


MANIFEST_NAME = "manifest.json"


@dataclass
class TraceEntry:
    video_id: int
    source_id: int
    fps: float
    n_rois: int
    channels: int
    frames: int
    trace_file: str
    extra: Dict = field(default_factory=dict)


def write_trace_csv(path, trace: RoiTrace) -> None:
    f, n, c = trace.frames.shape
    frame_idx = np.repeat(np.arange(f), n)
    roi_idx = np.tile(np.arange(n), f)
    values = trace.frames.reshape(f * n, c)
    header = ",".join(["frame", "roi"] + [f"ch{j}" for j in range(c)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for fr, ro, row in zip(frame_idx, roi_idx, values):
            fh.write(f"{fr},{ro}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_trace_csv(path, entry: TraceEntry) -> RoiTrace:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    expected = ["frame", "roi"] + [f"ch{j}" for j in range(entry.channels)]
    if header != expected:
        raise ConfigurationError(f"{path}: header {header} does not match {expected}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    f, n, c = entry.frames, entry.n_rois, entry.channels
    if table.shape != (f * n, 2 + c):
        raise ConfigurationError(f"{path}: expected {f * n} rows of {2 + c} columns, got {table.shape}")
    want_frame = np.repeat(np.arange(f), n)
    want_roi = np.tile(np.arange(n), f)
    if not (np.array_equal(table[:, 0], want_frame) and np.array_equal(table[:, 1], want_roi)):
        raise ConfigurationError(f"{path}: rows must be complete and sorted by (frame, roi)")
    return RoiTrace(entry.video_id, entry.source_id, entry.fps, table[:, 2:].reshape(f, n, c))


def write_trace_dir(out_dir, traces: Sequence[RoiTrace], extra: Optional[Dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for tr in traces:
        name = f"video{tr.video_id:05d}.csv"
        write_trace_csv(out / name, tr)
        entries.append({"video_id": tr.video_id, "source_id": tr.source_id, "fps": tr.fps,
                        "n_rois": tr.n_rois, "channels": tr.channels, "frames": tr.num_frames,
                        "trace_file": name})
    manifest = {"videos": entries}
    if extra:
        manifest["generator"] = extra
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(trace_dir) -> List[TraceEntry]:
    path = Path(trace_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"missing {MANIFEST_NAME} in {trace_dir}")
    doc = json.loads(path.read_text())
    items = doc["videos"] if isinstance(doc, dict) else doc
    keys = ("video_id", "source_id", "fps", "n_rois", "channels", "frames", "trace_file")
    entries = []
    for item in items:
        missing = [k for k in keys if k not in item]
        if missing:
            raise ConfigurationError(f"{path}: entry {item.get('video_id')} lacks {missing}")
        entries.append(TraceEntry(int(item["video_id"]), int(item["source_id"]), float(item["fps"]),
                                  int(item["n_rois"]), int(item["channels"]), int(item["frames"]),
                                  str(item["trace_file"])))
    return entries


def read_trace_dir(trace_dir) -> List[RoiTrace]:
    root = Path(trace_dir)
    return [read_trace_csv(root / e.trace_file, e) for e in read_manifest(root)]
