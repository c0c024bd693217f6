"""Video-level prediction aggregation, confusion matrices and reports."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import ModelParams, clip_features, window_probabilities
from .stmap import VideoClips, normalize_array

log = logging.getLogger(__name__)

AGGREGATION_NOTE = (
    "Video score = sum of per-group probability vectors (group = k adjacent clips, stride 1). "
    "Clips shared by overlapping groups are not deduplicated, so interior clips carry weight k; "
    "clip_level_accuracy scores each group on its own.")


@dataclass
class VideoPrediction:
    video_id: int
    true_class: int
    group_probs: np.ndarray  # [G, K], each row sums to 1
    aggregate: np.ndarray  # [K], sum over groups

    @classmethod
    def from_group_probs(cls, video_id: int, true_class: int, group_probs) -> "VideoPrediction":
        probs = np.atleast_2d(np.asarray(group_probs, dtype=np.float64))
        if probs.shape[0] == 0:
            raise ValueError(f"video {video_id} has no groups to aggregate")
        return cls(video_id, true_class, probs, probs.sum(axis=0))

    @property
    def predicted(self) -> int:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return int(np.argmax(self.aggregate))

    @property
    def group_predictions(self) -> np.ndarray:
        return np.argmax(self.group_probs, axis=1)

    def to_dict(self) -> Dict:
        return {"video_id": self.video_id, "true_class": self.true_class, "predicted": self.predicted,
                "aggregate": self.aggregate.tolist(), "num_groups": int(self.group_probs.shape[0]),
                "group_predictions": self.group_predictions.tolist()}


def predict_video(params: ModelParams, video: VideoClips, k: int) -> Optional[VideoPrediction]:
    """Aggregate group probabilities over every stride-1 group of ``video``.

    Each clip is normalized and passed through the networks once; the k-step
    sequence model then runs over every window of clip features. Returns
    None (with a warning) when the video has fewer than ``k`` clips.
    """
    if video.num_clips < k:
        log.warning("video %d has %d clips, fewer than k=%d; skipped", video.video_id, video.num_clips, k)
        return None
    feats = clip_features(params, normalize_array(np.asarray(video.clips)))
    probs = window_probabilities(params, feats, k)
    return VideoPrediction.from_group_probs(video.video_id, video.source_id, probs)


def predict_videos(params: ModelParams, videos: Sequence[VideoClips],
                   k: int) -> Tuple[List[VideoPrediction], List[int]]:
    preds, skipped = [], []
    for v in videos:
        p = predict_video(params, v, k)
        if p is None:
            skipped.append(v.video_id)
        else:
            preds.append(p)
    return preds, skipped


@dataclass
class Metrics:
    confusion: np.ndarray  # [K, K], row = true, column = predicted
    per_class: List[Optional[float]]  # None for classes without videos
    average_accuracy: float
    overall_accuracy: float


def confusion_and_metrics(predictions: Sequence[VideoPrediction], num_classes: int) -> Metrics:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p in predictions:
        cm[p.true_class, p.predicted] += 1
    per_class: List[Optional[float]] = []
    for c in range(num_classes):
        total = cm[c].sum()
        per_class.append(float(cm[c, c] / total) if total else None)
    present = [a for a in per_class if a is not None]
    average = float(np.mean(present)) if present else 0.0
    overall = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return Metrics(cm, per_class, average, overall)


def clip_level_accuracy(predictions: Sequence[VideoPrediction]) -> float:
    hits = total = 0
    for p in predictions:
        g = p.group_predictions
        hits += int((g == p.true_class).sum())
        total += g.size
    return hits / total if total else 0.0


def build_report(predictions: Sequence[VideoPrediction], num_classes: int,
                 skipped: Sequence[int] = (), config: Optional[Dict] = None) -> Dict:
    m = confusion_and_metrics(predictions, num_classes)
    return {
        "note": AGGREGATION_NOTE,
        "config": config or {},
        "num_videos": len(predictions),
        "skipped_videos": list(skipped),
        "predictions": [p.to_dict() for p in predictions],
        "confusion_matrix": m.confusion.tolist(),
        "per_class_accuracy": m.per_class,
        "average_accuracy": m.average_accuracy,
        "video_level_accuracy": m.overall_accuracy,
        "clip_level_accuracy": clip_level_accuracy(predictions),
    }


def write_report(path, report: Dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2))


def write_confusion_csv(path, confusion: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        k = confusion.shape[0]
        writer.writerow(["true\\pred"] + [str(j) for j in range(k)])
        for i, row in enumerate(confusion):
            writer.writerow([str(i)] + [str(int(v)) for v in row])
