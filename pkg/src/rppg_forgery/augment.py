"""Intra- and inter-source blending of map groups."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError
from .stmap import MapGroup

BLEND_MODES = ("none", "intra", "inter")


@dataclass
class BlendedSample:
    group: MapGroup
    t1: int
    t2: int
    alpha: float


def blend_weights(alpha: float) -> Tuple[float, float]:
    """Weights ``(w1, w2)`` with ``w1 + w2 == 1`` exactly and ``w1 ~= alpha``.

    The larger weight is computed first so the subtraction is exact; this
    makes ``blend(a, b, alpha)`` and ``blend(b, a, 1 - alpha)`` bit-identical.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha >= 0.5:
        return alpha, 1.0 - alpha
    w2 = 1.0 - alpha
    return 1.0 - w2, w2


def blend_arrays(m1: np.ndarray, m2: np.ndarray, alpha: float) -> np.ndarray:
    if m1.shape != m2.shape:
        raise ContractError(f"cannot blend maps of shapes {m1.shape} and {m2.shape}")
    w1, w2 = blend_weights(alpha)
    out = w1 * m1 + w2 * m2
    # rounding may step one ulp outside the parents' range; adding 0.0
    # turns a -0.0 picked up from the clip bounds into +0.0
    return np.clip(out, np.minimum(m1, m2), np.maximum(m1, m2)) + 0.0


def blend(g1: MapGroup, g2: MapGroup, alpha: float) -> BlendedSample:
    """Convex combination ``alpha * g1 + (1 - alpha) * g2`` applied to all k maps."""
    data = blend_arrays(g1.data, g2.data, alpha)
    w1, _ = blend_weights(alpha)
    group = MapGroup(data, g1.video_id, g1.source_id, g1.clip_index,
                     partner_source=g2.source_id, alpha=w1)
    return BlendedSample(group, g1.source_id, g2.source_id, w1)


class GroupPool:
    """Index of candidate blend partners, bucketed by source."""

    def __init__(self, groups: Sequence[MapGroup]):
        self.groups: List[MapGroup] = list(groups)
        self.sources = np.array([g.source_id for g in self.groups], dtype=np.int64)
        self.by_source: Dict[int, np.ndarray] = {
            int(s): np.flatnonzero(self.sources == s) for s in np.unique(self.sources)}

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def num_sources(self) -> int:
        return len(self.by_source)

    def check_mode(self, mode: str) -> None:
        if mode not in BLEND_MODES:
            raise ConfigurationError(f"blend mode must be one of {BLEND_MODES}, got {mode!r}")
        if mode == "inter" and self.num_sources < 2:
            raise ConfigurationError(
                f"inter-source blending needs at least 2 sources, dataset has {self.num_sources}")


def sample_pair(pool: GroupPool, anchor: MapGroup, mode: str,
                rng: np.random.Generator) -> Tuple[MapGroup, float]:
    """Draw a blend partner and coefficient for ``anchor``.

    ``none`` returns ``(anchor, 1.0)`` without consuming randomness. ``intra``
    draws uniformly among groups of the anchor's source, ``inter`` among
    groups of every other source; ``alpha ~ U[0, 1]``.
    """
    pool.check_mode(mode)
    if mode == "none":
        return anchor, 1.0
    if mode == "intra":
        candidates = pool.by_source.get(anchor.source_id)
        if candidates is None or len(candidates) == 0:
            raise ConfigurationError(f"no groups of source {anchor.source_id} to blend with")
        pick = candidates[rng.integers(len(candidates))]
    else:
        others = np.flatnonzero(pool.sources != anchor.source_id)
        if len(others) == 0:
            raise ConfigurationError(f"no groups outside source {anchor.source_id} to blend with")
        pick = others[rng.integers(len(others))]
    alpha = float(rng.uniform(0.0, 1.0))
    return pool.groups[int(pick)], alpha
