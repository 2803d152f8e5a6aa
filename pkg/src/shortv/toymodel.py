"""Deterministic toy models with a controllable per-layer redundancy profile.

Generator: ``numpy.random.default_rng(seed)`` (PCG64). Every matrix is
drawn with ``rng.standard_normal(shape)`` in float64, multiplied by its
scale and rounded to float32, in this fixed order:

    embedding                          std 1
    for each layer:
        wq, wk, wv, wo                 std 1/sqrt(h)
        ffn_gate, ffn_up               std 1/sqrt(h)
        ffn_down                       std 1/sqrt(m)
    lm_head                            std 1/sqrt(h)

All norm gains are ones. Afterwards ``wo`` and ``ffn_down`` of layer ``i``
are multiplied by ``profile[i]``; a 0 makes the layer an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import F32
from .errors import InputError
from .model import LayerWeights, ModelConfig, TextToken, TokenSequence, VisualToken, Weights


@dataclass(frozen=True)
class ToySpec:
    config: ModelConfig
    seed: int = 0
    profile: tuple[float, ...] = ()
    visual_mean: float = 0.0
    visual_std: float = 1.0

    def __post_init__(self):
        profile = tuple(float(x) for x in self.profile) or (1.0,) * self.config.num_layers
        object.__setattr__(self, "profile", profile)
        if len(profile) != self.config.num_layers:
            raise InputError(f"profile has {len(profile)} entries for {self.config.num_layers} layers")
        if any(not 0.0 <= s <= 1.0 for s in profile):
            raise InputError("profile scales must lie in [0, 1]")
        if self.seed < 0:
            raise InputError("seed must be non-negative")
        if self.visual_std < 0:
            raise InputError("visual_std must be non-negative")

    def to_json(self) -> dict:
        return {"config": self.config.to_dict(), "seed": self.seed, "profile": list(self.profile),
                "visual_mean": self.visual_mean, "visual_std": self.visual_std}

    @classmethod
    def from_json(cls, d: dict) -> "ToySpec":
        if "config" not in d:
            raise InputError("toy spec needs a 'config' object")
        return cls(ModelConfig.from_dict(d["config"]), int(d.get("seed", 0)),
                   tuple(d.get("profile", ())), float(d.get("visual_mean", 0.0)),
                   float(d.get("visual_std", 1.0)))


def monotone_profile(num_layers: int, low: float = 0.05, high: float = 1.0,
                     increasing: bool = False) -> tuple[float, ...]:
    """Evenly spaced scales; decreasing by default (shallow layers strongest)."""
    vals = np.linspace(high, low, num_layers) if num_layers > 1 else np.array([high])
    return tuple(float(x) for x in (vals[::-1] if increasing else vals))


def build_toy(spec: ToySpec) -> Weights:
    c = spec.config
    h, m, vocab = c.hidden_size, c.intermediate_size, c.vocab_size
    rng = np.random.default_rng(spec.seed)

    def draw(shape, std):
        return (rng.standard_normal(shape) * std).astype(F32)

    embedding = draw((vocab, h), 1.0)
    layers = []
    for scale in spec.profile:
        wq, wk, wv, wo = (draw((h, h), h ** -0.5) for _ in range(4))
        gate = draw((h, m), h ** -0.5)
        up = draw((h, m), h ** -0.5)
        down = draw((m, h), m ** -0.5)
        layers.append(LayerWeights(wq, wk, wv, (wo * F32(scale)).astype(F32), gate, up,
                                   (down * F32(scale)).astype(F32),
                                   np.ones(h, F32), np.ones(h, F32)))
    lm_head = draw((h, vocab), h ** -0.5)
    return Weights(c, embedding, tuple(layers), np.ones(h, F32), lm_head)


def _range(r) -> tuple[int, int]:
    lo, hi = (r, r) if np.isscalar(r) else tuple(r)
    lo, hi = int(lo), int(hi)
    if lo < 0 or hi < lo:
        raise InputError(f"bad count range {r!r}")
    return lo, hi


def gen_calibration(spec: ToySpec, n_samples: int, t_range=(1, 8), v_range=(1, 16),
                    seed: int = 0) -> list[TokenSequence]:
    """Random interleaved samples: text prefix, visual block, text suffix.

    Per sample the generator draws t, v, the prefix length in [0, t-1], the
    text ids (uniform over the vocabulary) and then the visual embeddings.
    The suffix always holds at least one token, so samples end in text.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    t_lo, t_hi = _range(t_range)
    v_lo, v_hi = _range(v_range)
    if t_lo < 1:
        raise InputError("every sample needs at least one text token")
    c = spec.config
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        t = int(rng.integers(t_lo, t_hi + 1))
        v = int(rng.integers(v_lo, v_hi + 1))
        prefix = int(rng.integers(0, t))
        ids = rng.integers(0, c.vocab_size, size=t)
        vis = (spec.visual_mean + spec.visual_std * rng.standard_normal((v, c.hidden_size))).astype(F32)
        text = [TextToken(int(i)) for i in ids]
        out.append(TokenSequence(text[:prefix] + [VisualToken(e) for e in vis] + text[prefix:]))
    return out
