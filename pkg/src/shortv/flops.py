"""Analytical FLOP accounting for dense and frozen-visual layers.

Only attention and FFN matrix products are charged: the four h-by-h
projections, the three FFN matrices, and the score and context products
(charged as full rectangles, not causal triangles). Norms, softmax, rotary
embedding, residual adds and the LM head are excluded. One multiply-add
counts as 2 FLOPs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import AccountingError, InputError, ScheduleError
from .model import LayerPlan, ModelConfig, Selector, TokenSequence, Weights, forward
from .core import FlopCounter
from .pruning import PruneConfig


def _check(t, v, h, m):
    if min(t, v, h, m) < 0:
        raise InputError("token counts and dimensions must be non-negative")
    if t + v < 1:
        raise InputError("a layer needs at least one token")


def dense_layer_flops(t: int, v: int, h: int, m: int) -> int:
    _check(t, v, h, m)
    n = t + v
    return 2 * n * (4 * h + 3 * m) * h + 4 * n * n * h


def shortv_layer_flops(t: int, v: int, h: int, m: int) -> int:
    """Layer with ``v`` frozen visual rows and ``t`` text queries."""
    _check(t, v, h, m)
    if t < 1:
        raise InputError("a frozen-visual layer needs at least one text token")
    return 2 * t * (4 * h + 3 * m) * h + 4 * v * h * h + 4 * t * (t + v) * h


def sparse_layer_flops(active: int, frozen: int, h: int, m: int) -> int:
    """Any frozen layer: ``active`` rows processed, ``frozen`` rows only give K/V.

    With no active rows the engine skips the layer outright, so the cost is 0.
    """
    if active == 0:
        return 0
    return shortv_layer_flops(active, frozen, h, m)


def model_ratio(L: int, N: int, t: int, v: int, h: int, m: int) -> float:
    if L < 1 or not 0 <= N <= L:
        raise InputError("need L >= 1 and 0 <= N <= L")
    dense = dense_layer_flops(t, v, h, m)
    sparse = shortv_layer_flops(t, v, h, m)
    return ((L - N) * dense + N * sparse) / (L * dense)


@dataclass
class LayerEntry:
    layer: int
    kind: str
    t: int
    v: int
    flops: int


@dataclass
class FlopsReport:
    layers: list[LayerEntry]
    total: int
    baseline: int
    events: list[dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.total / self.baseline

    def to_json(self) -> dict:
        return {
            "layers": [vars(e) for e in self.layers],
            "total": self.total,
            "baseline": self.baseline,
            "ratio": self.ratio,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "t", "v", "flops"])
        for e in self.layers:
            w.writerow([e.layer, e.kind, e.t, e.v, e.flops])
        w.writerow(["total", "", "", "", self.total])
        w.writerow(["ratio", "", "", "", repr(self.ratio)])
        return buf.getvalue()


def expected_counts(L: int, t: int, v: int, prune: PruneConfig | None) -> list[tuple[int, int]]:
    """(text, visual) rows entering each layer under a pruning schedule."""
    prune = prune or PruneConfig.none()
    prune.check(L)
    out = []
    for i in range(L):
        fired = prune.strategy != "none" and i > prune.k
        out.append((t, prune.visual_after(v) if fired else v))
    return out


def _layer_cost(kind, t, v, h, m) -> tuple[str, int]:
    if not kind.is_frozen:
        return "dense", dense_layer_flops(t, v, h, m)
    sel = kind.selector
    if sel is Selector.VISUAL:
        return "frozen:visual", sparse_layer_flops(t, v, h, m)
    if sel is Selector.TEXT:
        return "frozen:text", sparse_layer_flops(v, t, h, m)
    if sel is Selector.ALL:
        return "frozen:all", 0
    raise InputError("explicit-position layers need realized counts; use crosscheck")


def schedule_flops(config: ModelConfig, plan: LayerPlan, t: int, v: int,
                   prune: PruneConfig | None = None,
                   counts: list[tuple[int, int]] | None = None) -> FlopsReport:
    """Sum per-layer costs using each layer's surviving (t, v).

    ``counts`` may be supplied (e.g. from a real run); it must agree with
    what the pruning schedule implies.
    """
    L, h, m = config.num_layers, config.hidden_size, config.intermediate_size
    if len(plan) != L:
        raise ScheduleError(f"plan has {len(plan)} layers, model has {L}")
    derived = expected_counts(L, t, v, prune)
    if counts is not None and [tuple(c) for c in counts] != derived:
        raise ScheduleError(f"per-layer counts {counts} disagree with the schedule {derived}")
    entries = []
    for i, (kind, (tl, vl)) in enumerate(zip(plan.kinds, derived)):
        name, cost = _layer_cost(kind, tl, vl, h, m)
        entries.append(LayerEntry(i, name, tl, vl, cost))
    total = sum(e.flops for e in entries)
    return FlopsReport(entries, total, L * dense_layer_flops(t, v, h, m))


@dataclass
class CrossCheck:
    analytical: int
    instrumented: int
    per_layer: list[tuple[int, int]]

    @property
    def gap(self) -> float:
        return (self.instrumented - self.analytical) / max(self.analytical, 1)


def crosscheck(weights: Weights, plan: LayerPlan, seq: TokenSequence,
               prune: PruneConfig | None = None, strict: bool = True) -> CrossCheck:
    """Run the engine with a counter and compare against the formulas per layer."""
    c = weights.config
    counter = FlopCounter()
    res = forward(seq, weights, plan, prune, counter)
    per_layer = []
    h, m = c.hidden_size, c.intermediate_size
    for i, ((tl, vl), frozen) in enumerate(zip(res.layer_counts, res.frozen_counts)):
        n = tl + vl
        if plan[i].is_frozen:
            expect = sparse_layer_flops(n - frozen, frozen, h, m)
        else:
            expect = dense_layer_flops(tl, vl, h, m)
        per_layer.append((expect, counter.by_layer.get(i, 0)))
    out = CrossCheck(sum(a for a, _ in per_layer), counter.total, per_layer)
    if strict and any(a != b for a, b in per_layer):
        bad = [i for i, (a, b) in enumerate(per_layer) if a != b]
        raise AccountingError(f"instrumented FLOPs differ from the formulas at layers {bad}")
    return out
