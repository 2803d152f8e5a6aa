"""Visual-token pruning schedules: attention-ranked (FastV) and drop-all (VTW).

Pruning is pure row deletion between layers. Survivors keep their original
position ids, so rotary geometry is unchanged for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ScheduleError, StateError

STRATEGIES = ("none", "fastv", "vtw")


@dataclass(frozen=True)
class PruneConfig:
    """``k`` is the 0-based index of the layer after which tokens are dropped."""

    strategy: str = "none"
    k: int = 0
    ratio: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown pruning strategy {self.strategy!r}")
        if self.k < 0:
            raise InputError("prune layer K must be >= 0")
        if not 0.0 <= self.ratio <= 1.0:
            raise InputError("prune ratio R must lie in [0, 1]")

    @classmethod
    def none(cls) -> "PruneConfig":
        return cls()

    @classmethod
    def fastv(cls, k: int, ratio: float) -> "PruneConfig":
        return cls("fastv", int(k), float(ratio))

    @classmethod
    def vtw(cls, k: int) -> "PruneConfig":
        return cls("vtw", int(k))

    def check(self, num_layers: int) -> None:
        if self.strategy != "none" and self.k >= num_layers:
            raise ScheduleError(f"prune layer K={self.k} must be < L={num_layers}")

    def visual_after(self, v: int) -> int:
        """Visual tokens left once the event has fired."""
        if self.strategy == "fastv":
            return v - drop_count(self.ratio, v)
        if self.strategy == "vtw":
            return 0
        return v

    def to_json(self) -> dict:
        if self.strategy == "none":
            return {"strategy": "none"}
        if self.strategy == "vtw":
            return {"strategy": "vtw", "k": self.k}
        return {"strategy": "fastv", "k": self.k, "ratio": self.ratio}

    @classmethod
    def from_json(cls, d: dict | None) -> "PruneConfig":
        if not d:
            return cls()
        return cls(d.get("strategy", "none"), int(d.get("k", 0)), float(d.get("ratio", 0.0)))


@dataclass(frozen=True)
class PruneEvent:
    after_layer: int
    dropped: tuple[int, ...]
    surviving: tuple[int, ...]

    def to_json(self) -> dict:
        return {"after_layer": self.after_layer, "dropped": list(self.dropped),
                "survivor_count": len(self.surviving)}


def drop_count(ratio: float, v: int) -> int:
    # floor(R*v), shielded from 0.29*100 == 28.999... style representation error
    return min(v, math.floor(ratio * v + 1e-9))


def fastv_rank(attn, visual_positions) -> np.ndarray:
    """Order visual positions by mean received attention, most important first.

    A position's importance averages its weight over heads and over every
    query row that can see it (queries at or after it); rows with no query
    (frozen rows) do not vote. Ties go to the smaller position.
    """
    if attn is None:
        raise StateError("FastV ranking needs the attention map of layer K")
    visual_positions = np.asarray(visual_positions, dtype=np.int64)
    if visual_positions.size == 0:
        return visual_positions
    keys = np.asarray(attn.key_positions)
    queries = np.asarray(attn.query_positions)
    col = {int(p): j for j, p in enumerate(keys)}
    missing = [int(p) for p in visual_positions if int(p) not in col]
    if missing:
        raise InputError(f"positions {missing} are not keys of the attention map")
    probs = np.asarray(attn.probs, dtype=np.float64)
    per_query = probs.mean(axis=0) if probs.shape[1] else np.zeros((0, keys.size))
    score = np.zeros(visual_positions.size)
    for n, p in enumerate(visual_positions):
        sees = queries >= p
        if sees.any():
            score[n] = per_query[sees, col[int(p)]].mean()
    order = np.lexsort((visual_positions, -score))
    return visual_positions[order]


def fastv_prune(ranking, ratio: float, positions, after_layer: int) -> PruneEvent:
    """Drop the ``floor(ratio * v)`` least important visual tokens."""
    ranking = [int(p) for p in ranking]
    n = drop_count(ratio, len(ranking))
    dropped = tuple(sorted(ranking[len(ranking) - n:])) if n else ()
    gone = set(dropped)
    surviving = tuple(int(p) for p in positions if int(p) not in gone)
    return PruneEvent(after_layer, dropped, surviving)


def vtw_event(k: int, positions, is_visual) -> PruneEvent:
    """Drop every visual token after layer ``k``."""
    positions = np.asarray(positions, dtype=np.int64)
    is_visual = np.asarray(is_visual, dtype=bool)
    return PruneEvent(int(k), tuple(positions[is_visual].tolist()),
                      tuple(positions[~is_visual].tolist()))
