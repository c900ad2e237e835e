from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class Interaction:
    """One user-item rating event."""

    user_id: str
    item_id: str
    user_attrs: tuple[tuple[str, str], ...]
    item_attrs: tuple[tuple[str, str], ...]
    item_title: str
    rating: int
    timestamp: int
    label: int
    # synthetic bench only: ground-truth cue flag and whether CUE is rendered
    is_cue: bool | None = None
    cue_token: bool = False


@dataclass
class DatasetSplit:
    train: list[Interaction] = field(default_factory=list)
    valid: list[Interaction] = field(default_factory=list)
    test: list[Interaction] = field(default_factory=list)

    def stream(self) -> list[Interaction]:
        return self.train + self.valid + self.test

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def movielens_label(rating: int) -> int:
    return int(rating >= 4)


def amazon_label(rating: int) -> int:
    return int(rating == 5)


def split_points(n: int) -> tuple[int, int]:
    return math.floor(0.8 * n), math.floor(0.9 * n)


def chronological_split(interactions: Sequence[Interaction]) -> DatasetSplit:
    """Stable sort by timestamp, then 80/10/10 cut."""
    order = sorted(range(len(interactions)), key=lambda i: (interactions[i].timestamp, i))
    ordered = [interactions[i] for i in order]
    a, b = split_points(len(ordered))
    return DatasetSplit(ordered[:a], ordered[a:b], ordered[b:])
