"""Pre-norm decoder-only transformer over interleaved visual/text sequences.

The block is LLaMA-shaped: RMS norm, rotary position embedding on Q and K,
causal multi-head attention and a SiLU-gated FFN, all without biases.  Any
layer can run in *frozen* mode, where a subset of rows passes through
untouched: those rows get no query, no output projection and no FFN, but
they still contribute keys and values to the rows that are processed.

Weight layout (row-vector convention, ``y = x @ W``)::

    wq, wk, wv, wo : (h, h)
    ffn_gate, ffn_up : (h, m)
    ffn_down : (m, h)
    embedding : (vocab, h)     lm_head : (h, vocab)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import core
from .core import F32, F64, FlopCounter
from .errors import InputError, NumericError, ScheduleError, ShapeError
from .pruning import PruneConfig, PruneEvent, fastv_prune, fastv_rank, vtw_event


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    intermediate_size: int
    num_heads: int
    vocab_size: int
    max_positions: int = 4096
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "intermediate_size", "num_heads",
                     "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.hidden_size % self.num_heads:
            raise InputError("hidden_size must be divisible by num_heads")
        if self.head_dim % 2:
            raise InputError("rotary embedding needs an even head dimension")
        if not self.norm_eps > 0:
            raise InputError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "rope_theta": self.rope_theta,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(
                num_layers=int(d["num_layers"]),
                hidden_size=int(d["hidden_size"]),
                intermediate_size=int(d["intermediate_size"]),
                num_heads=int(d["num_heads"]),
                vocab_size=int(d["vocab_size"]),
                max_positions=int(d.get("max_positions", 4096)),
                rope_theta=float(d.get("rope_theta", 10000.0)),
                norm_eps=float(d.get("norm_eps", 1e-5)),
            )
        except KeyError as exc:
            raise InputError(f"model config is missing {exc.args[0]!r}") from None


LAYER_TENSORS = ("wq", "wk", "wv", "wo", "ffn_gate", "ffn_up", "ffn_down",
                 "attn_norm", "ffn_norm")


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_gate: np.ndarray
    ffn_up: np.ndarray
    ffn_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    @staticmethod
    def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        h, m = config.hidden_size, config.intermediate_size
        return {"wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
                "ffn_gate": (h, m), "ffn_up": (h, m), "ffn_down": (m, h),
                "attn_norm": (h,), "ffn_norm": (h,)}

    def __post_init__(self):
        for name in LAYER_TENSORS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=F32))

    def validate(self, config: ModelConfig) -> None:
        for name, shape in LayerWeights.expected_shapes(config).items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")

    @classmethod
    def zeros(cls, config: ModelConfig) -> "LayerWeights":
        shapes = cls.expected_shapes(config)
        arrs = {k: np.zeros(s, F32) for k, s in shapes.items()}
        arrs["attn_norm"][:] = 1
        arrs["ffn_norm"][:] = 1
        return cls(**arrs)


@dataclass(frozen=True, eq=False)
class Weights:
    """All model parameters plus the config they were built for."""

    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self):
        c = self.config
        object.__setattr__(self, "layers", tuple(self.layers))
        for name in ("embedding", "final_norm", "lm_head"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=F32))
        if len(self.layers) != c.num_layers:
            raise ShapeError(f"expected {c.num_layers} layers, got {len(self.layers)}")
        if self.embedding.shape != (c.vocab_size, c.hidden_size):
            raise ShapeError(f"embedding shape {self.embedding.shape}")
        if self.final_norm.shape != (c.hidden_size,):
            raise ShapeError(f"final_norm shape {self.final_norm.shape}")
        if self.lm_head.shape != (c.hidden_size, c.vocab_size):
            raise ShapeError(f"lm_head shape {self.lm_head.shape}")
        for lw in self.layers:
            lw.validate(c)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Weights":
        h, vocab = config.hidden_size, config.vocab_size
        return cls(config, np.zeros((vocab, h), F32),
                   tuple(LayerWeights.zeros(config) for _ in range(config.num_layers)),
                   np.ones(h, F32), np.zeros((h, vocab), F32))

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Tensors in canonical order (also the weight-file payload order)."""
        out = [("embedding", self.embedding)]
        for i, lw in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", getattr(lw, n)) for n in LAYER_TENSORS)
        out.append(("final_norm", self.final_norm))
        out.append(("lm_head", self.lm_head))
        return out

    def replace_layer(self, index: int, layer: LayerWeights) -> "Weights":
        layers = list(self.layers)
        layers[index] = layer
        return Weights(self.config, self.embedding, tuple(layers), self.final_norm, self.lm_head)

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


# -- token sequences ---------------------------------------------------------

@dataclass(frozen=True)
class TextToken:
    id: int


@dataclass(frozen=True, eq=False)
class VisualToken:
    embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embedding", core.as_vector(self.embedding))


class TokenSequence:
    """Ordered mix of text ids and pre-projected visual embeddings."""

    def __init__(self, positions: Iterable[TextToken | VisualToken]):
        self.positions = tuple(positions)
        if not self.positions:
            raise InputError("a token sequence needs at least one position")
        for p in self.positions:
            if not isinstance(p, (TextToken, VisualToken)):
                raise InputError(f"unsupported position type {type(p).__name__}")
        self.is_visual = np.array([isinstance(p, VisualToken) for p in self.positions])

    @classmethod
    def build(cls, text_ids: Sequence[int] = (), visual: Sequence | np.ndarray = (),
              visual_first: bool = True) -> "TokenSequence":
        """Visual block followed by text (the usual image-then-prompt layout)."""
        vis = [VisualToken(e) for e in visual]
        txt = [TextToken(int(i)) for i in text_ids]
        return cls(vis + txt if visual_first else txt + vis)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def t(self) -> int:
        return int((~self.is_visual).sum())

    @property
    def v(self) -> int:
        return int(self.is_visual.sum())

    @property
    def ends_with_text(self) -> bool:
        return isinstance(self.positions[-1], TextToken)

    def require_text_last(self) -> None:
        if not self.ends_with_text:
            raise InputError("the last position must be a text token")

    def __repr__(self) -> str:
        return f"TokenSequence(t={self.t}, v={self.v})"


# -- layer plans -------------------------------------------------------------

class Selector(str, Enum):
    VISUAL = "visual"
    TEXT = "text"
    ALL = "all"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class LayerKind:
    """``selector is None`` means a dense layer."""

    selector: Selector | None = None
    positions: frozenset[int] = frozenset()

    @property
    def is_frozen(self) -> bool:
        return self.selector is not None

    @classmethod
    def frozen(cls, selector: Selector | str, positions: Iterable[int] = ()) -> "LayerKind":
        selector = Selector(selector)
        positions = frozenset(int(p) for p in positions)
        if positions and selector is not Selector.EXPLICIT:
            raise InputError("explicit positions need the explicit selector")
        return cls(selector, positions)

    def frozen_rows(self, is_visual: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Resolve against the rows currently alive; returns sorted row indices."""
        if self.selector is None:
            return np.empty(0, dtype=np.intp)
        if self.selector is Selector.VISUAL:
            mask = is_visual
        elif self.selector is Selector.TEXT:
            mask = ~is_visual
        elif self.selector is Selector.ALL:
            mask = np.ones_like(is_visual)
        else:
            mask = np.isin(positions, np.fromiter(self.positions, dtype=np.int64))
        return np.flatnonzero(mask)

    def to_json(self) -> dict:
        if self.selector is None:
            return {"kind": "dense"}
        d = {"kind": "frozen", "selector": self.selector.value}
        if self.selector is Selector.EXPLICIT:
            d["positions"] = sorted(self.positions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayerKind":
        kind = d.get("kind")
        if kind == "dense":
            return cls()
        if kind == "frozen":
            try:
                return cls.frozen(d["selector"], d.get("positions", ()))
            except (KeyError, ValueError) as exc:
                raise InputError(f"bad frozen layer entry {d!r}") from exc
        raise InputError(f"unknown layer kind {kind!r}")


DENSE = LayerKind()


@dataclass(frozen=True)
class LayerPlan:
    kinds: tuple[LayerKind, ...]

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))

    @classmethod
    def dense(cls, num_layers: int) -> "LayerPlan":
        return cls((DENSE,) * num_layers)

    @classmethod
    def with_frozen(cls, num_layers: int, layers: Iterable[int],
                    selector: Selector | str = Selector.VISUAL) -> "LayerPlan":
        layers = set(layers)
        bad = [i for i in layers if not 0 <= i < num_layers]
        if bad:
            raise InputError(f"layer indices out of range: {bad}")
        kind = LayerKind.frozen(selector)
        return cls(tuple(kind if i in layers else DENSE for i in range(num_layers)))

    def __len__(self) -> int:
        return len(self.kinds)

    def __getitem__(self, i: int) -> LayerKind:
        return self.kinds[i]

    @property
    def n_frozen(self) -> int:
        return sum(k.is_frozen for k in self.kinds)

    @property
    def frozen_layers(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.kinds) if k.is_frozen)

    def to_json(self) -> dict:
        return {"num_layers": len(self), "n_frozen": self.n_frozen,
                "layers": [k.to_json() for k in self.kinds]}

    @classmethod
    def from_json(cls, d: dict) -> "LayerPlan":
        if "layers" not in d:
            raise InputError("plan document has no 'layers' list")
        return cls(tuple(LayerKind.from_json(x) for x in d["layers"]))


# -- layer kernels -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Post-softmax weights of one layer: ``probs[head, query, key]``.

    Only queried rows appear; masked (future) keys hold exactly 0.
    """

    layer: int
    query_positions: np.ndarray
    key_positions: np.ndarray
    probs: np.ndarray


def _rope(x: np.ndarray, positions: np.ndarray, num_heads: int, theta: float) -> np.ndarray:
    """Rotate-half rotary embedding applied per head; ``x`` is (rows, h)."""
    rows, h = x.shape
    d = h // num_heads
    half = d // 2
    inv_freq = theta ** (-np.arange(half, dtype=F64) * 2.0 / d)
    ang = positions.astype(F64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    xh = x.astype(F64).reshape(rows, num_heads, d)
    x1, x2 = xh[..., :half], xh[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)
    return out.reshape(rows, h).astype(F32)


def _block(x: np.ndarray, lw: LayerWeights, frozen_rows: np.ndarray, positions: np.ndarray,
           config: ModelConfig, counter: FlopCounter | None, layer: int | None,
           capture: bool) -> tuple[np.ndarray, AttentionMap | None]:
    n, h = x.shape
    active = np.setdiff1d(np.arange(n), frozen_rows, assume_unique=True)
    out = x.copy()
    if active.size == 0:
        return out, None
    heads, d = config.num_heads, config.head_dim

    a = core.rms_norm(x, lw.attn_norm, config.norm_eps)
    # keys/values come from every row, frozen or not
    k = core.matmul(a, lw.wk, counter, layer)
    v = core.matmul(a, lw.wv, counter, layer)
    q = core.matmul(a[active], lw.wq, counter, layer)
    q = _rope(q, positions[active], heads, config.rope_theta)
    k = _rope(k, positions, heads, config.rope_theta)

    t = active.size
    qh = q.reshape(t, heads, d).transpose(1, 0, 2)
    kh = k.reshape(n, heads, d).transpose(1, 2, 0)
    vh = v.reshape(n, heads, d).transpose(1, 0, 2)
    scores = core.batched_matmul(qh, kh, counter, layer) / np.sqrt(d)
    future = positions[None, :] > positions[active][:, None]
    scores = np.where(future[None], -np.inf, scores)
    probs = core.softmax(scores, axis=-1)
    ctx = core.batched_matmul(probs, vh, counter, layer)
    ctx = ctx.transpose(1, 0, 2).reshape(t, h).astype(F32)

    mid = x[active] + core.matmul(ctx, lw.wo, counter, layer)
    b = core.rms_norm(mid, lw.ffn_norm, config.norm_eps)
    gate = core.matmul(b, lw.ffn_gate, counter, layer)
    up = core.matmul(b, lw.ffn_up, counter, layer)
    act = (core.silu(gate) * up).astype(F32)
    res = mid + core.matmul(act, lw.ffn_down, counter, layer)
    if not np.all(np.isfinite(res)):
        raise NumericError("non-finite hidden state", layer)
    out[active] = res
    attn = None
    if capture:
        attn = AttentionMap(-1 if layer is None else layer, positions[active].copy(),
                            positions.copy(), probs)
    return out, attn


def _check_rows(x, positions, config):
    x = core.as_matrix(x)
    if x.shape[1] != config.hidden_size:
        raise ShapeError(f"hidden width {x.shape[1]} != {config.hidden_size}")
    if positions is None:
        positions = np.arange(x.shape[0])
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (x.shape[0],):
        raise ShapeError("one position id per row is required")
    if positions.size and (positions.min() < 0 or positions.max() >= config.max_positions):
        raise InputError("position id outside [0, max_positions)")
    return x, positions


def forward_dense_layer(hs, lw: LayerWeights, config: ModelConfig, positions=None,
                        counter: FlopCounter | None = None, layer: int | None = None) -> np.ndarray:
    hs, positions = _check_rows(hs, positions, config)
    return _block(hs, lw, np.empty(0, np.intp), positions, config, counter, layer, False)[0]


def forward_frozen_layer(hs, lw: LayerWeights, config: ModelConfig, frozen_mask,
                         positions=None, counter: FlopCounter | None = None,
                         layer: int | None = None) -> np.ndarray:
    """Run a layer with the rows in ``frozen_mask`` (row indices) held fixed."""
    hs, positions = _check_rows(hs, positions, config)
    rows = np.unique(np.asarray(list(frozen_mask), dtype=np.intp))
    if rows.size and (rows[0] < 0 or rows[-1] >= hs.shape[0]):
        raise InputError(f"frozen row index outside [0, {hs.shape[0]})")
    return _block(hs, lw, rows, positions, config, counter, layer, False)[0]


# -- whole model -------------------------------------------------------------

def embed(seq: TokenSequence, weights: Weights) -> np.ndarray:
    c = weights.config
    rows = np.empty((len(seq), c.hidden_size), F32)
    for j, p in enumerate(seq.positions):
        if isinstance(p, TextToken):
            if not 0 <= p.id < c.vocab_size:
                raise InputError(f"token id {p.id} outside vocabulary of {c.vocab_size}")
            rows[j] = weights.embedding[p.id]
        else:
            if p.embedding.shape != (c.hidden_size,):
                raise ShapeError(f"visual embedding length {p.embedding.shape[0]} != {c.hidden_size}")
            rows[j] = p.embedding
    return rows


@dataclass
class ForwardResult:
    hidden: np.ndarray            # residual stream after the last layer
    normed: np.ndarray            # final RMS norm applied
    positions: np.ndarray         # original ids of surviving rows
    is_visual: np.ndarray
    layer_counts: list[tuple[int, int]]   # (text, visual) rows entering each layer
    frozen_counts: list[int]              # rows frozen in each layer
    events: list[PruneEvent] = field(default_factory=list)
    attention: dict[int, AttentionMap] = field(default_factory=dict)


def apply_event(hidden: np.ndarray, positions: np.ndarray, is_visual: np.ndarray,
                event: PruneEvent, last_position: int):
    """Delete the dropped rows; the final text position must survive."""
    if last_position in set(event.dropped):
        raise ScheduleError(f"pruning after layer {event.after_layer} removes the last text position")
    present = set(positions.tolist())
    if not set(event.dropped) <= present:
        raise ScheduleError("prune event drops positions that are not alive")
    keep = ~np.isin(positions, np.asarray(event.dropped, dtype=np.int64))
    return hidden[keep], positions[keep], is_visual[keep]


def forward(seq: TokenSequence, weights: Weights, plan: LayerPlan | None = None,
            prune: PruneConfig | None = None, counter: FlopCounter | None = None,
            capture_attention: bool | Iterable[int] = False) -> ForwardResult:
    c = weights.config
    plan = LayerPlan.dense(c.num_layers) if plan is None else plan
    if len(plan) != c.num_layers:
        raise ScheduleError(f"plan has {len(plan)} layers, model has {c.num_layers}")
    if len(seq) > c.max_positions:
        raise InputError(f"sequence of {len(seq)} exceeds max_positions={c.max_positions}")
    prune = prune or PruneConfig.none()
    prune.check(c.num_layers)
    if capture_attention is True:
        capture = set(range(c.num_layers))
    elif capture_attention is False:
        capture = set()
    else:
        capture = set(capture_attention)
    if prune.strategy == "fastv":
        capture.add(prune.k)

    x = embed(seq, weights)
    positions = np.arange(len(seq), dtype=np.int64)
    is_visual = seq.is_visual.copy()
    last = len(seq) - 1
    res = ForwardResult(x, x, positions, is_visual, [], [])

    for i, (kind, lw) in enumerate(zip(plan.kinds, weights.layers)):
        frozen_rows = kind.frozen_rows(is_visual, positions)
        v_now = int(is_visual.sum())
        res.layer_counts.append((len(positions) - v_now, v_now))
        res.frozen_counts.append(int(frozen_rows.size))
        x, attn = _block(x, lw, frozen_rows, positions, c, counter, i, i in capture)
        if i in capture:
            if attn is None:
                attn = AttentionMap(i, np.empty(0, np.int64), positions.copy(),
                                    np.zeros((c.num_heads, 0, len(positions))))
            res.attention[i] = attn
        if prune.strategy != "none" and i == prune.k:
            vis_pos = positions[is_visual]
            if prune.strategy == "fastv":
                ranking = fastv_rank(attn, vis_pos)
                event = fastv_prune(ranking, prune.ratio, positions, i)
            else:
                event = vtw_event(i, positions, is_visual)
            x, positions, is_visual = apply_event(x, positions, is_visual, event, last)
            res.events.append(event)

    res.hidden = x
    res.normed = core.rms_norm(x, weights.final_norm, c.norm_eps)
    res.positions = positions
    res.is_visual = is_visual
    return res


def layer_states(seq: TokenSequence, weights: Weights) -> list[np.ndarray]:
    """Residual stream entering layer 0, then after each layer (all dense)."""
    c = weights.config
    x = embed(seq, weights)
    positions = np.arange(len(seq), dtype=np.int64)
    none = np.empty(0, np.intp)
    out = [x]
    for i, lw in enumerate(weights.layers):
        x = _block(x, lw, none, positions, c, None, i, False)[0]
        out.append(x)
    return out


def logits_from(result: ForwardResult, weights: Weights, last_position: int) -> np.ndarray:
    if result.positions.size == 0 or result.positions[-1] != last_position:
        raise ScheduleError("the last text position did not survive")
    return core.matmul(result.normed[-1:], weights.lm_head)[0]


def logits_last(seq: TokenSequence, weights: Weights, plan: LayerPlan | None = None,
                prune: PruneConfig | None = None, counter: FlopCounter | None = None) -> np.ndarray:
    """Next-token logits: LM head on the final-normed state of the last position."""
    seq.require_text_last()
    res = forward(seq, weights, plan, prune, counter)
    return logits_from(res, weights, len(seq) - 1)
