"""N-way K-shot episode construction and seeded random substreams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

DEFAULT_SEED = 42


def substream(seed: int, purpose: str, number: int = 0) -> np.random.Generator:
    """Independent PCG64 generator keyed by ``(seed, purpose, number)``.

    Episode ``n`` of a given purpose draws the same numbers no matter what ran
    before it, so evaluation does not depend on training history.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng([int(seed), tag, int(number)])


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries: int = 15

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1 or self.queries < 1:
            raise ValueError("shots and queries must be >= 1")

    @property
    def per_class(self) -> int:
        return self.shots + self.queries


@dataclass
class EpisodeBatch:
    support_indices: list
    support_labels: list
    query_indices: list
    query_labels: list
    episode_classes: list


class EpisodeError(ValueError):
    """The class index cannot supply the requested episode."""


ClassIndex = Mapping[Hashable, list]


def build_class_index(labels: Sequence) -> dict:
    index: dict = {}
    for i, lbl in enumerate(labels):
        index.setdefault(lbl, []).append(i)
    return index


def sample_episode(index: ClassIndex, spec: EpisodeSpec, rng: np.random.Generator) -> EpisodeBatch:
    classes = sorted(index)
    if len(classes) < spec.ways:
        raise EpisodeError(f"insufficient classes: need {spec.ways}, have {len(classes)}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=spec.ways, replace=False)]
    batch = EpisodeBatch([], [], [], [], chosen)
    need = spec.per_class
    for cls in chosen:
        pool = index[cls]
        if len(pool) < need:
            raise EpisodeError(f"not enough samples for class {cls!r} (need {need}, have {len(pool)})")
        picks = [pool[i] for i in rng.choice(len(pool), size=need, replace=False)]
        batch.support_indices.extend(picks[:spec.shots])
        batch.support_labels.extend([cls] * spec.shots)
        batch.query_indices.extend(picks[spec.shots:])
        batch.query_labels.extend([cls] * spec.queries)
    return batch
