"""Wall-clock first-pass latency (prompt prefill to first-token logits)."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

from .model import LayerPlan, Weights, logits_last
from .pruning import PruneConfig


def first_pass_latency(weights: Weights, seqs, plan: LayerPlan | None = None,
                       prune: PruneConfig | None = None, repeat: int = 5,
                       warmup: int = 1) -> float:
    """Median over ``repeat`` runs of the time to score every sequence once."""
    times = []
    for r in range(warmup + repeat):
        start = time.perf_counter()
        for s in seqs:
            logits_last(s, weights, plan, prune)
        if r >= warmup:
            times.append(time.perf_counter() - start)
    return statistics.median(times)


@dataclass
class BenchResult:
    dense_s: float
    planned_s: float
    repeat: int

    @property
    def speedup(self) -> float:
        return self.dense_s / self.planned_s

    def to_json(self) -> dict:
        return {"dense_median_s": self.dense_s, "planned_median_s": self.planned_s,
                "speedup": self.speedup, "repeat": self.repeat}


def compare(weights: Weights, seqs, plan: LayerPlan, prune: PruneConfig | None = None,
            repeat: int = 5) -> BenchResult:
    # interleave the two timings so slow drift on the machine hits both
    dense, planned = [], []
    dense_plan = LayerPlan.dense(weights.config.num_layers)
    first_pass_latency(weights, seqs, dense_plan, None, 1, 1)
    first_pass_latency(weights, seqs, plan, prune, 1, 1)
    for _ in range(repeat):
        dense.append(first_pass_latency(weights, seqs, dense_plan, None, 1, 0))
        planned.append(first_pass_latency(weights, seqs, plan, prune, 1, 0))
    return BenchResult(statistics.median(dense), statistics.median(planned), repeat)
