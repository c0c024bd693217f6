"""Deterministic multi-source ROI traces with per-source rhythmic signatures.

Source 0 plays the part of real video: one pulse whose rate is drawn per
video, with a second harmonic and nearly coherent phase across regions.
Every other source mixes two fixed rhythms with its own weights, harmonic
content and per-region phase scrambling, standing in for the residual pulse
mixtures a forgery method leaves behind.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .stmap import RoiTrace

MIN_FREQ, MAX_FREQ = 0.5, 4.0


@dataclass(frozen=True)
class Fundamental:
    frequency: float  # Hz
    amplitude: float
    phase_spread: float  # radians; per-region phase offsets are drawn in [-spread, spread]


@dataclass(frozen=True)
class SourceSignature:
    source_id: int
    fundamentals: Tuple[Fundamental, ...]
    harmonic_ratio: float
    mix_weight: float = 1.0  # weight of the first fundamental; the second gets 1 - mix_weight
    rate_range: Optional[Tuple[float, float]] = None  # per-video draw for the first fundamental
    freq_jitter: float = 0.0
    drift_amplitude: float = 1.5
    drift_period: float = 9.0  # seconds
    noise_sigma: float = 0.3
    quant_step: float = 0.05

    def __post_init__(self):
        if not self.fundamentals:
            raise ConfigurationError("a signature needs at least one fundamental")
        for f in self.fundamentals:
            if not MIN_FREQ <= f.frequency <= MAX_FREQ:
                raise ConfigurationError(f"frequency {f.frequency} Hz outside [{MIN_FREQ}, {MAX_FREQ}]")
            if f.amplitude <= 0:
                raise ConfigurationError(f"amplitude must be positive, got {f.amplitude}")
        if self.rate_range is not None:
            lo, hi = self.rate_range
            if not MIN_FREQ <= lo <= hi <= MAX_FREQ:
                raise ConfigurationError(f"rate range {self.rate_range} outside [{MIN_FREQ}, {MAX_FREQ}]")
        if self.noise_sigma < 0 or self.drift_amplitude < 0 or self.quant_step < 0:
            raise ConfigurationError("noise parameters must be non-negative")

    def with_noise(self, *, sigma: Optional[float] = None, drift: Optional[float] = None,
                   quant: Optional[float] = None) -> "SourceSignature":
        return replace(self,
                       noise_sigma=self.noise_sigma if sigma is None else sigma,
                       drift_amplitude=self.drift_amplitude if drift is None else drift,
                       quant_step=self.quant_step if quant is None else quant)


# (f1, f2, mix_weight, harmonic_ratio, spread1, spread2)
_FORGERY_TABLE = [
    (0.75, 2.45, 0.65, 0.15, 1.2, 2.4),
    (1.85, 3.30, 0.50, 0.05, 0.6, 3.0),
    (0.90, 1.60, 0.40, 0.30, 3.0, 1.0),
    (2.20, 3.70, 0.80, 0.40, 0.4, 1.6),
    (1.20, 2.90, 0.35, 0.25, 2.0, 0.3),
]


def _forgery_params(source_id: int):
    if source_id <= len(_FORGERY_TABLE):
        return _FORGERY_TABLE[source_id - 1]
    rng = np.random.default_rng(1000 + source_id)
    f1 = rng.uniform(0.6, 2.2)
    f2 = min(MAX_FREQ, f1 * rng.uniform(1.4, 2.6))
    return (f1, f2, rng.uniform(0.3, 0.8), rng.uniform(0.0, 0.45),
            rng.uniform(0.2, 3.1), rng.uniform(0.2, 3.1))


def default_signatures(num_sources: int) -> List[SourceSignature]:
    if not 2 <= num_sources <= 16:
        raise ConfigurationError(f"num_sources must be in [2, 16], got {num_sources}")
    sigs = [SourceSignature(0, (Fundamental(1.35, 1.0, 0.15),), harmonic_ratio=0.35,
                            rate_range=(1.0, 1.7))]
    for s in range(1, num_sources):
        f1, f2, w, h, sp1, sp2 = _forgery_params(s)
        sigs.append(SourceSignature(
            s, (Fundamental(round(f1, 4), 1.0, sp1), Fundamental(round(f2, 4), 0.8, sp2)),
            harmonic_ratio=h, mix_weight=w, freq_jitter=0.05))
    return sigs


def _channel_profile(channels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Baseline color and pulse gain per channel (green carries the strongest pulse)."""
    if channels == 3:
        return np.array([160.0, 120.0, 95.0]), np.array([0.35, 1.0, 0.55])
    return np.linspace(150.0, 100.0, channels), np.linspace(1.0, 0.5, channels)


def generate_trace(signature: SourceSignature, video_id: int, frames: int, fps: float,
                   n: int, c: int, seed: int) -> RoiTrace:
    """One video's ``[frames, n, c]`` trace; identical inputs give identical output."""
    if frames < 1 or n < 1 or c < 1:
        raise ConfigurationError(f"frames, n and c must be positive, got {frames}, {n}, {c}")
    rng = np.random.default_rng(seed)
    t = np.arange(frames) / fps
    base, chan_gain = _channel_profile(c)
    base = base + rng.normal(0.0, 8.0, size=c)
    roi_gain = rng.uniform(0.7, 1.3, size=n)

    weights = [signature.mix_weight, 1.0 - signature.mix_weight] if len(signature.fundamentals) == 2 \
        else [1.0] * len(signature.fundamentals)
    pulse = np.zeros((frames, n))
    for j, (fund, w) in enumerate(zip(signature.fundamentals, weights)):
        freq = fund.frequency
        if j == 0 and signature.rate_range is not None:
            freq = rng.uniform(*signature.rate_range)
        elif signature.freq_jitter:
            freq = freq + rng.uniform(-signature.freq_jitter, signature.freq_jitter)
        phase = rng.uniform(0.0, 2 * np.pi) + fund.phase_spread * rng.uniform(-1.0, 1.0, size=n)
        theta = 2 * np.pi * freq * t[:, None] + phase[None, :]
        pulse += w * fund.amplitude * (np.sin(theta) + signature.harmonic_ratio * np.sin(2 * theta))

    values = base[None, None, :] + pulse[:, :, None] * roi_gain[None, :, None] * chan_gain[None, None, :]
    if signature.drift_amplitude:
        psi = rng.uniform(0.0, 2 * np.pi)
        drift = signature.drift_amplitude * np.sin(2 * np.pi * t / signature.drift_period + psi)
        values = values + drift[:, None, None] * rng.uniform(0.8, 1.2, size=n)[None, :, None]
    if signature.noise_sigma:
        values = values + rng.normal(0.0, signature.noise_sigma, size=values.shape)
    if signature.quant_step:
        values = np.round(values / signature.quant_step) * signature.quant_step
    return RoiTrace(video_id, signature.source_id, fps, values)


@dataclass(frozen=True)
class SynthSpec:
    num_sources: int = 6
    videos_per_source: int = 60
    frames_per_video: int = 640
    fps: float = 30.0
    n_rois: int = 6
    channels: int = 3
    seed: int = 42
    noise_scale: float = 1.0  # multiplies every source's white-noise sigma

    def __post_init__(self):
        for name in ("num_sources", "videos_per_source", "frames_per_video", "n_rois", "channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.fps <= 0 or self.noise_scale < 0:
            raise ConfigurationError("fps must be positive and noise_scale non-negative")


def generate_dataset(spec: SynthSpec) -> List[RoiTrace]:
    """All videos, source-major; video ``v`` is seeded with ``spec.seed ^ v``."""
    sigs = default_signatures(spec.num_sources)
    traces = []
    for sig in sigs:
        if spec.noise_scale != 1.0:
            sig = sig.with_noise(sigma=sig.noise_sigma * spec.noise_scale)
        for j in range(spec.videos_per_source):
            vid = sig.source_id * spec.videos_per_source + j
            traces.append(generate_trace(sig, vid, spec.frames_per_video, spec.fps,
                                         spec.n_rois, spec.channels, spec.seed ^ vid))
    return traces


def signature_dict(sig: SourceSignature) -> dict:
    return asdict(sig)
