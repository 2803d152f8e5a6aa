"""Layer Contribution (LC) profiling, the cosine baseline, and layer selection.

The LC score of layer ``i`` for a token class is the KL divergence between
the vanilla model's next-token distribution and the distribution obtained
when only layer ``i`` runs with that class frozen, averaged over a
calibration set. The vanilla model is always the reference (first) argument.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import core
from .errors import DegenerateInputError, InputError
from .model import (DENSE, LayerKind, LayerPlan, Selector, TokenSequence, Weights,
                    layer_states, logits_last)

log = logging.getLogger(__name__)

CLASSES = (Selector.VISUAL, Selector.TEXT)


def _cls(token_class) -> Selector:
    sel = Selector(token_class)
    if sel not in CLASSES:
        raise InputError(f"token class must be visual or text, got {sel.value}")
    return sel


def _check_calib(calib: Sequence[TokenSequence], token_class: Selector | None = None):
    if not calib:
        raise InputError("calibration set is empty")
    for n, seq in enumerate(calib):
        if not seq.ends_with_text:
            raise InputError(f"calibration sample {n} does not end in a text token")
        if token_class is Selector.VISUAL and seq.v == 0:
            raise InputError(f"calibration sample {n} has no visual tokens")
        if token_class is Selector.TEXT and seq.t == 0:
            raise InputError(f"calibration sample {n} has no text tokens")


def single_layer_plan(num_layers: int, layer: int, token_class) -> LayerPlan:
    if not 0 <= layer < num_layers:
        raise InputError(f"layer {layer} outside [0, {num_layers})")
    kinds = [DENSE] * num_layers
    kinds[layer] = LayerKind.frozen(token_class)
    return LayerPlan(tuple(kinds))


def mean(values: Iterable[float]) -> float:
    values = list(values)
    # fsum is exactly rounded, so the mean does not depend on sample order
    return math.fsum(values) / len(values)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def vanilla_logits(weights: Weights, calib: Sequence[TokenSequence], workers: int = 1):
    return _map(lambda s: logits_last(s, weights), calib, workers)


def lc_score(weights: Weights, layer: int, token_class, calib: Sequence[TokenSequence],
             reference: Sequence[np.ndarray] | None = None, workers: int = 1) -> float:
    cls = _cls(token_class)
    _check_calib(calib, cls)
    plan = single_layer_plan(weights.config.num_layers, layer, cls)
    if reference is None:
        reference = vanilla_logits(weights, calib, workers)
    kls = _map(lambda pair: core.kl_divergence(pair[0], logits_last(pair[1], weights, plan)),
               list(zip(reference, calib)), workers)
    return mean(kls)


@dataclass
class LCReport:
    """Per-layer mean scores keyed by token class (``"visual"`` / ``"text"``)."""

    scores: dict[str, list[float]]
    n_samples: int
    fingerprint: str
    metric: str = "lc"
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(next(iter(self.scores.values())))

    def to_json(self) -> dict:
        return {"metric": self.metric, "n_samples": self.n_samples,
                "fingerprint": self.fingerprint, "num_layers": self.num_layers,
                "scores": {k: list(v) for k, v in self.scores.items()},
                "excluded": dict(self.excluded)}

    @classmethod
    def from_json(cls, d: dict) -> "LCReport":
        try:
            return cls({k: [float(x) for x in v] for k, v in d["scores"].items()},
                       int(d["n_samples"]), str(d.get("fingerprint", "")),
                       str(d.get("metric", "lc")), dict(d.get("excluded", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed metric report: {exc}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "class", "metric", "score", "n_samples"])
        for name, vals in self.scores.items():
            for i, s in enumerate(vals):
                w.writerow([i, name, self.metric, repr(s), self.n_samples])
        return buf.getvalue()


def lc_profile(weights: Weights, calib: Sequence[TokenSequence],
               classes: Iterable = CLASSES, workers: int = 1) -> LCReport:
    classes = [_cls(c) for c in classes]
    for c in classes:
        _check_calib(calib, c)
    reference = vanilla_logits(weights, calib, workers)
    L = weights.config.num_layers
    scores = {c.value: [lc_score(weights, i, c, calib, reference, workers) for i in range(L)]
              for c in classes}
    return LCReport(scores, len(calib), weights.fingerprint())


def cosine_profile(weights: Weights, calib: Sequence[TokenSequence], token_class,
                   workers: int = 1) -> tuple[list[float], int]:
    """Mean input/output cosine similarity per layer for one token class.

    Each sample contributes the mean over its rows of that class; samples are
    then averaged. Zero-norm rows are skipped and counted.
    """
    cls = _cls(token_class)
    _check_calib(calib, cls)
    L = weights.config.num_layers

    def per_sample(seq):
        states = layer_states(seq, weights)
        rows = np.flatnonzero(seq.is_visual if cls is Selector.VISUAL else ~seq.is_visual)
        sims, skipped = [], 0
        for i in range(L):
            vals = []
            for r in rows:
                try:
                    vals.append(core.cosine_similarity(states[i][r], states[i + 1][r]))
                except DegenerateInputError:
                    skipped += 1
            sims.append(mean(vals) if vals else None)
        return sims, skipped

    results = _map(per_sample, list(calib), workers)
    skipped = sum(s for _, s in results)
    if skipped:
        log.warning("cosine_profile: %d zero-norm rows excluded", skipped)
    profile = []
    for i in range(L):
        vals = [sims[i] for sims, _ in results if sims[i] is not None]
        profile.append(mean(vals) if vals else float("nan"))
    return profile, skipped


def cosine_report(weights: Weights, calib: Sequence[TokenSequence], classes: Iterable = CLASSES,
                  workers: int = 1) -> LCReport:
    scores, excluded = {}, {}
    for c in classes:
        c = _cls(c)
        scores[c.value], excluded[c.value] = cosine_profile(weights, calib, c, workers)
    return LCReport(scores, len(calib), weights.fingerprint(), metric="cosine", excluded=excluded)


@dataclass(frozen=True)
class RedundancyRanking:
    order: tuple[int, ...]     # most redundant first
    metric: str
    token_class: str


def rank_layers(report: LCReport, token_class="visual", metric: str | None = None) -> RedundancyRanking:
    """Most redundant first: ascending LC or descending cosine; ties go deeper-first."""
    name = _cls(token_class).value
    metric = metric or report.metric
    if name not in report.scores:
        raise InputError(f"report has no scores for class {name!r}")
    scores = report.scores[name]
    if metric == "lc":
        key = lambda i: (scores[i], -i)
    elif metric == "cosine":
        key = lambda i: (-scores[i], -i)
    else:
        raise InputError(f"unknown metric {metric!r}")
    return RedundancyRanking(tuple(sorted(range(len(scores)), key=key)), metric, name)


def make_plan(ranking: RedundancyRanking | Sequence[int], n: int,
              selector=Selector.VISUAL) -> LayerPlan:
    order = tuple(ranking.order if isinstance(ranking, RedundancyRanking) else ranking)
    L = len(order)
    if not 0 <= n <= L:
        raise InputError(f"N={n} outside [0, {L}]")
    return LayerPlan.with_frozen(L, order[:n], selector)


def plan_divergence(weights: Weights, calib: Sequence[TokenSequence], plan: LayerPlan,
                    reference: Sequence[np.ndarray] | None = None, workers: int = 1) -> float:
    """Mean KL(vanilla || planned) over the calibration set."""
    _check_calib(calib)
    if reference is None:
        reference = vanilla_logits(weights, calib, workers)
    kls = _map(lambda pair: core.kl_divergence(pair[0], logits_last(pair[1], weights, plan)),
               list(zip(reference, calib)), workers)
    return mean(kls)


@dataclass
class Ablation:
    n: int
    lc: float
    cosine: float
    random_mean: float
    random: list[float]
    lc_layers: tuple[int, ...]
    cosine_layers: tuple[int, ...]

    def to_json(self) -> dict:
        return {"n": self.n, "lc_selected": self.lc, "cosine_selected": self.cosine,
                "random_mean": self.random_mean, "random": self.random,
                "lc_layers": list(self.lc_layers), "cosine_layers": list(self.cosine_layers)}


def ablate(weights: Weights, calib: Sequence[TokenSequence], n: int, trials: int = 20,
           seed: int = 0, eval_calib: Sequence[TokenSequence] | None = None,
           workers: int = 1) -> Ablation:
    """Compare LC-selected, cosine-selected and random N-layer visual plans.

    Layers are selected on ``calib``; divergence is measured on ``eval_calib``
    (defaults to the same set).
    """
    eval_calib = calib if eval_calib is None else eval_calib
    L = weights.config.num_layers
    ref = vanilla_logits(weights, eval_calib, workers)
    lc_rank = rank_layers(lc_profile(weights, calib, [Selector.VISUAL], workers), "visual")
    cos_rank = rank_layers(cosine_report(weights, calib, [Selector.VISUAL], workers), "visual")
    lc_plan = make_plan(lc_rank, n)
    cos_plan = make_plan(cos_rank, n)
    rng = np.random.default_rng(seed)
    rand = []
    for _ in range(trials):
        layers = rng.choice(L, size=n, replace=False)
        rand.append(plan_divergence(weights, eval_calib,
                                    LayerPlan.with_frozen(L, layers.tolist()), ref, workers))
    return Ablation(n, plan_divergence(weights, eval_calib, lc_plan, ref, workers),
                    plan_divergence(weights, eval_calib, cos_plan, ref, workers),
                    mean(rand), rand, lc_plan.frozen_layers, cos_plan.frozen_layers)
