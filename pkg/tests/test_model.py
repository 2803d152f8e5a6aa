import math

import numpy as np
import pytest

import oracle
from conftest import random_hidden
from shortv import (FlopCounter, LayerKind, LayerPlan, LayerWeights, ModelConfig, Selector,
                    TextToken, TokenSequence, VisualToken, Weights, embed, forward,
                    forward_dense_layer, forward_frozen_layer, logits_last)
from shortv.errors import InputError, NumericError, ScheduleError, ShapeError
from shortv.metrics import single_layer_plan
from shortv.model import apply_event
from shortv.pruning import PruneEvent


def visual_seq(rng, h, t, v, vocab=11):
    return TokenSequence.build(rng.integers(0, vocab, t), rng.standard_normal((v, h)))


# -- embed ---------------------------------------------------------------

def test_embed_text_rows(small_weights):
    seq = TokenSequence([TextToken(3), TextToken(0), TextToken(3)])
    rows = embed(seq, small_weights)
    assert np.array_equal(rows, small_weights.embedding[[3, 0, 3]])


def test_embed_visual_passthrough(small_weights, rng):
    e = rng.standard_normal(8).astype(np.float32)
    assert np.array_equal(embed(TokenSequence([VisualToken(e)]), small_weights), e[None])


def test_embed_interleaved_order(small_weights, rng):
    e1, e2 = rng.standard_normal((2, 8)).astype(np.float32)
    rows = embed(TokenSequence([VisualToken(e1), TextToken(5), VisualToken(e2)]), small_weights)
    assert np.array_equal(rows, np.stack([e1, small_weights.embedding[5], e2]))


def test_embed_errors(small_weights):
    with pytest.raises(InputError):
        embed(TokenSequence([TextToken(11)]), small_weights)
    with pytest.raises(ShapeError):
        embed(TokenSequence([VisualToken(np.ones(3))]), small_weights)


def test_sequence_counts():
    seq = TokenSequence([VisualToken(np.ones(2)), TextToken(1), VisualToken(np.ones(2)), TextToken(0)])
    assert (seq.t, seq.v, len(seq)) == (2, 2, 4)
    assert seq.is_visual.tolist() == [True, False, True, False]
    with pytest.raises(InputError):
        TokenSequence([])


# -- dense layer ---------------------------------------------------------

def test_zero_weights_layer_is_identity(small_config, rng):
    x = random_hidden(rng, 5, 8)
    out = forward_dense_layer(x, LayerWeights.zeros(small_config), small_config)
    assert np.array_equal(out, x)


def test_single_token_matches_scalar_oracle(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 1, 8)
    out = forward_dense_layer(x, small_weights.layers[0], cfg)
    ref = oracle.layer(x.tolist(), small_weights.layers[0], cfg)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_multi_token_matches_scalar_oracle(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 6, 8)
    for i, lw in enumerate(small_weights.layers):
        np.testing.assert_allclose(forward_dense_layer(x, lw, cfg),
                                   oracle.layer(x.tolist(), lw, cfg), rtol=1e-5, atol=1e-5)


def test_hand_worked_two_token_layer():
    """h=2, one head, two tokens, identity attention projections.

    x0 = [1, 0], x1 = [0, 1]; both normalise to sqrt(2)/sqrt(1+eps') times a
    unit vector. Rotary rotates position 1 by one radian. FFN: gate=up=[1,1]^T,
    down=[0.5, -0.5].
    """
    eps = 1e-6
    cfg = ModelConfig(1, 2, 1, 1, 3, norm_eps=eps)
    eye = np.eye(2, dtype=np.float32)
    lw = LayerWeights(eye, eye, eye, eye, np.ones((2, 1)), np.ones((2, 1)),
                      np.array([[0.5, -0.5]]), np.ones(2), np.ones(2))
    x = np.array([[1, 0], [0, 1]], np.float32)

    s = math.sqrt(2) / math.sqrt(1 + 2 * eps)       # |normed row| components
    # token 0: attends only to itself, context = its value [s, 0]
    mid0 = [1 + s, 0.0]
    # token 1: q1 = k1 = rot(1)[0, s] = [-s sin1, s cos1]; k0 = [s, 0]
    q1 = [-s * math.sin(1), s * math.cos(1)]
    sc = [(q1[0] * s) / math.sqrt(2), (q1[0] ** 2 + q1[1] ** 2) / math.sqrt(2)]
    e = [math.exp(v - max(sc)) for v in sc]
    p = [v / sum(e) for v in e]
    mid1 = [p[0] * s, 1 + p[1] * s]

    def ffn(mid):
        r = 1 / math.sqrt((mid[0] ** 2 + mid[1] ** 2) / 2 + eps)
        b = [mid[0] * r, mid[1] * r]
        g = b[0] + b[1]
        a = g / (1 + math.exp(-g)) * g
        return [mid[0] + 0.5 * a, mid[1] - 0.5 * a]

    expected = [ffn(mid0), ffn(mid1)]
    out = forward_dense_layer(x, lw, cfg)
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_non_finite_raises_with_layer(small_config, rng):
    lw = LayerWeights.zeros(small_config)
    huge = np.full((8, 8), np.float32(3e38))
    bad = LayerWeights(lw.wq, lw.wk, huge, huge, lw.ffn_gate,
                       lw.ffn_up, lw.ffn_down, lw.attn_norm, lw.ffn_norm)
    x = random_hidden(rng, 3, 8)
    with pytest.raises(NumericError) as info, np.errstate(all="ignore"):
        forward_dense_layer(x, bad, small_config, layer=5)
    assert info.value.layer == 5


# -- frozen layer --------------------------------------------------------

def test_frozen_empty_mask_equals_dense(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 7, 8)
    lw = small_weights.layers[1]
    np.testing.assert_allclose(forward_frozen_layer(x, lw, cfg, []),
                               forward_dense_layer(x, lw, cfg), atol=1e-6, rtol=0)


def test_frozen_all_is_identity(small_weights, rng):
    x = random_hidden(rng, 5, 8)
    out = forward_frozen_layer(x, small_weights.layers[0], small_weights.config, range(5))
    assert np.array_equal(out, x)


def test_frozen_visual_text_rows_match_dense(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 9, 8)
    frozen = [0, 1, 2, 5, 6]
    lw = small_weights.layers[2]
    out = forward_frozen_layer(x, lw, cfg, frozen)
    dense = forward_dense_layer(x, lw, cfg)
    text = [3, 4, 7, 8]
    np.testing.assert_allclose(out[text], dense[text], rtol=1e-5, atol=1e-6)
    assert np.array_equal(out[frozen], x[frozen])


def test_frozen_matches_oracle(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 6, 8)
    frozen = {1, 4}
    out = forward_frozen_layer(x, small_weights.layers[0], cfg, frozen)
    ref = oracle.layer(x.tolist(), small_weights.layers[0], cfg, frozen)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_frozen_bad_index(small_weights, rng):
    with pytest.raises(InputError):
        forward_frozen_layer(random_hidden(rng, 3, 8), small_weights.layers[0],
                             small_weights.config, [3])


def test_frozen_flops_savings(small_weights, rng):
    cfg = small_weights.config
    x = random_hidden(rng, 6, 8)
    dense, frozen = FlopCounter(), FlopCounter()
    forward_dense_layer(x, small_weights.layers[0], cfg, counter=dense)
    forward_frozen_layer(x, small_weights.layers[0], cfg, [0, 1, 2], counter=frozen)
    assert frozen.total < dense.total


# -- full forward --------------------------------------------------------

def test_all_dense_logits_match_oracle(small_weights, small_calib):
    for seq in small_calib:
        np.testing.assert_allclose(logits_last(seq, small_weights), oracle.logits(seq, small_weights),
                                   rtol=1e-5, atol=1e-5)


def test_all_frozen_visual_keeps_embeddings(small_weights, small_calib):
    L = small_weights.config.num_layers
    plan = LayerPlan.with_frozen(L, range(L))
    for seq in small_calib:
        res = forward(seq, small_weights, plan)
        vis = seq.is_visual
        assert np.array_equal(res.hidden[vis], embed(seq, small_weights)[vis])


def test_last_layer_visual_freeze_is_neutral(small_weights, small_calib):
    L = small_weights.config.num_layers
    plan = single_layer_plan(L, L - 1, "visual")
    for seq in small_calib:
        assert np.array_equal(logits_last(seq, small_weights), logits_last(seq, small_weights, plan))


def test_zero_model_zero_logits():
    cfg = ModelConfig(2, 4, 8, 2, 5)
    seq = TokenSequence([TextToken(1), TextToken(2)])
    assert np.array_equal(logits_last(seq, Weights.zeros(cfg)), np.zeros(5, np.float32))


def test_logits_deterministic(small_weights, small_calib):
    seq = small_calib[0]
    assert np.array_equal(logits_last(seq, small_weights), logits_last(seq, small_weights))


def test_forward_flops_strictly_decrease(small_weights, small_calib):
    L = small_weights.config.num_layers
    seq = small_calib[1]
    prev = None
    for n in range(L + 1):
        c = FlopCounter()
        forward(seq, small_weights, LayerPlan.with_frozen(L, range(n)), counter=c)
        if prev is not None:
            assert c.total < prev
        prev = c.total


def test_plan_length_mismatch(small_weights, small_calib):
    with pytest.raises(ScheduleError):
        forward(small_calib[0], small_weights, LayerPlan.dense(3))


def test_logits_needs_text_last(small_weights, rng):
    seq = TokenSequence([TextToken(1), VisualToken(rng.standard_normal(8))])
    with pytest.raises(InputError):
        logits_last(seq, small_weights)


def test_explicit_and_text_selectors(small_weights, small_calib):
    seq = small_calib[0]
    L = small_weights.config.num_layers
    text_rows = np.flatnonzero(~seq.is_visual)
    explicit = LayerPlan((LayerKind.frozen("explicit", text_rows.tolist()),) + (LayerKind(),) * (L - 1))
    by_text = LayerPlan.with_frozen(L, [0], Selector.TEXT)
    assert np.array_equal(forward(seq, small_weights, explicit).hidden,
                          forward(seq, small_weights, by_text).hidden)


def test_plan_json_round_trip():
    plan = LayerPlan((LayerKind(), LayerKind.frozen("visual"), LayerKind.frozen("explicit", [3, 1])))
    assert LayerPlan.from_json(plan.to_json()) == plan
    assert plan.n_frozen == 2 and plan.frozen_layers == (1, 2)


def test_apply_event_refuses_to_drop_last(small_weights):
    x = np.zeros((3, 8), np.float32)
    pos = np.arange(3)
    vis = np.array([True, False, False])
    with pytest.raises(ScheduleError):
        apply_event(x, pos, vis, PruneEvent(0, (2,), (0, 1)), last_position=2)


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(1, 6, 4, 4, 3)
    with pytest.raises(InputError):
        ModelConfig(0, 4, 4, 2, 3)


def test_weights_shape_validation(small_config):
    w = Weights.zeros(small_config)
    with pytest.raises(ShapeError):
        Weights(small_config, w.embedding, w.layers[:2], w.final_norm, w.lm_head)
