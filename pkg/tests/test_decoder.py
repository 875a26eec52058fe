import math

import numpy as np
import pytest

from chart2dsl.decoder import (CrossModalAttention, Decoder, cross_attention, forward_teacher_forced, generate,
                               shift_right, syntax_loss)
from chart2dsl.nn import sinusoidal
from chart2dsl.numerics import Tensor, log_softmax, stream
from conftest import check_grads

V, D = 20, 16


def small_decoder(score="additive", seed=0, layers=2):
    return Decoder(V, D, 2, layers, max_len=12, rng=stream(seed, "dec"), dropout_rate=0.0, score=score).eval()


def visual(seed=1, b=2, m=5):
    return Tensor(stream(seed, "vis").normal(size=(b, m, D)))


# -- cross attention -------------------------------------------------------------------------
@pytest.mark.parametrize("score", ["linear", "additive"])
def test_single_visual_token(score):
    attn = CrossModalAttention(D, stream(0), score)
    f = stream(1).normal(size=(1, D))
    ctx, w = cross_attention(stream(2).normal(size=D), f, attn)
    np.testing.assert_array_equal(w.data, [1.0])
    np.testing.assert_allclose(ctx.data, f[0], rtol=0, atol=0)


@pytest.mark.parametrize("score", ["linear", "additive"])
def test_equal_scores_give_mean(score):
    attn = CrossModalAttention(D, stream(0), score)
    attn.score_visual.data[:] = 0
    attn.score_token.data[:] = 0
    f = stream(1).normal(size=(6, D))
    ctx, w = cross_attention(stream(2).normal(size=D), f, attn)
    np.testing.assert_allclose(w.data, np.full(6, 1 / 6), atol=1e-15)
    np.testing.assert_allclose(ctx.data, f.mean(axis=0), atol=1e-12)


@pytest.mark.parametrize("score", ["linear", "additive"])
def test_context_grad_wrt_score_params(score, rng):
    attn = CrossModalAttention(D, stream(0), score)
    s = Tensor(rng.normal(size=(1, 3, D)))
    f = Tensor(rng.normal(size=(1, 5, D)))
    w = rng.normal(size=(1, 3, D))
    params = [attn.score_token, attn.score_visual, attn.score_bias]
    if score == "additive":
        params.append(attn.score_out)
    check_grads(lambda: (attn.attend(s, f, sinusoidal(3, D), sinusoidal(5, D))[0] * w).sum(), params)


def test_linear_score_is_query_independent(rng):
    """With one 2d -> 1 map the token term cancels: every query gets the same weights."""
    attn = CrossModalAttention(D, stream(0), "linear")
    s = Tensor(rng.normal(size=(1, 4, D)))
    f = Tensor(rng.normal(size=(1, 5, D)))
    _, w = attn.attend(s, f, sinusoidal(4, D), sinusoidal(5, D))
    np.testing.assert_allclose(w.data[0], np.tile(w.data[0, :1], (4, 1)), atol=1e-12)


def test_additive_score_is_query_dependent(rng):
    attn = CrossModalAttention(D, stream(0), "additive")
    s = Tensor(rng.normal(size=(1, 4, D)))
    f = Tensor(rng.normal(size=(1, 5, D)))
    _, w = attn.attend(s, f, sinusoidal(4, D), sinusoidal(5, D))
    assert np.abs(w.data[0, 0] - w.data[0, 1]).max() > 1e-3


def test_unknown_score():
    with pytest.raises(ValueError):
        CrossModalAttention(D, stream(0), "dot")


# -- teacher forcing ---------------------------------------------------------------------------------
@pytest.mark.parametrize("score", ["linear", "additive"])
def test_causality(score):
    dec = small_decoder(score)
    tgt = np.array([[3, 4, 5, 6, 7, 8, 9], [9, 8, 7, 6, 5, 4, 3]])
    base = forward_teacher_forced(dec, visual(), tgt).data
    assert base.shape == (2, 7, V)
    for j in range(7):
        changed = tgt.copy()
        changed[:, j] = (changed[:, j] + 5) % V
        out = forward_teacher_forced(dec, visual(), changed).data
        # Input at position j + 1 holds target j.
        np.testing.assert_array_equal(out[:, :j + 1], base[:, :j + 1])
        if j + 1 < 7:
            assert not np.allclose(out[:, j + 1], base[:, j + 1])


@pytest.mark.parametrize("score", ["linear", "additive"])
def test_every_step_sees_the_visual_tokens(score):
    dec = small_decoder(score)
    tgt = np.array([[3, 4, 5, 6, 7]])
    vis = visual(b=1)
    base = forward_teacher_forced(dec, vis, tgt).data
    bumped = vis.data.copy()
    bumped[0, 2] += 1.0
    out = forward_teacher_forced(dec, Tensor(bumped), tgt).data
    assert (np.abs(out - base).max(axis=-1) > 1e-9).all()


def test_eval_forward_deterministic_and_rejects_bad_ids():
    dec = small_decoder()
    tgt = np.array([[3, 4, 5]])
    np.testing.assert_array_equal(forward_teacher_forced(dec, visual(b=1), tgt).data,
                                  forward_teacher_forced(dec, visual(b=1), tgt).data)
    with pytest.raises(ValueError):
        forward_teacher_forced(dec, visual(b=1), np.array([[V, 3]]))
    with pytest.raises(ValueError):
        forward_teacher_forced(dec, visual(b=1), np.full((1, 13), 3))


def test_shift_right():
    np.testing.assert_array_equal(shift_right(np.array([[5, 6, 7]])), [[1, 5, 6]])


# -- generation -------------------------------------------------------------------------------------
@pytest.mark.parametrize("score", ["linear", "additive"])
def test_incremental_matches_teacher_forced(score):
    dec = small_decoder(score)
    vis = visual()
    seqs, state = generate(dec, vis, max_len=8, return_state=True)
    n = min(len(s) for s in seqs)
    tgt = np.array([s[:n] for s in seqs])
    logits, maps = dec.forward(vis, shift_right(tgt), return_attention=True)
    # Re-run step by step to collect the incremental logits.
    caches = [{} for _ in dec.blocks]
    ids = shift_right(tgt)
    for pos in range(n):
        step_logits, _ = dec.step(vis, ids[:, pos], pos, caches)
        np.testing.assert_allclose(step_logits.data, logits.data[:, pos], atol=1e-8)
    np.testing.assert_allclose(np.stack(state.attention[:n], axis=1), maps[-1].data[:, :n], atol=1e-8)
    assert np.argmax(logits.data, axis=-1).tolist() == tgt.tolist()


def test_attention_rows_sum_to_one():
    dec = small_decoder()
    _, state = generate(dec, visual(), max_len=10, return_state=True)
    for w in state.attention:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


def test_greedy_deterministic_and_bounded():
    dec = small_decoder()
    a = generate(dec, visual(), max_len=10)
    assert a == generate(dec, visual(), max_len=10)
    assert all(len(s) <= 10 and all(0 <= t < V for t in s) for s in a)
    assert [len(s) for s in generate(dec, visual(), max_len=1)] == [1, 1]
    with pytest.raises(ValueError):
        generate(dec, visual(), max_len=0)


def test_sampling_is_seeded():
    dec = small_decoder()
    a = generate(dec, visual(), "sample", 10, stream(5, "sample"))
    b = generate(dec, visual(), "sample", 10, stream(5, "sample"))
    assert a == b
    with pytest.raises(ValueError):
        generate(dec, visual(), "sample", 10, None)


def test_generation_stops_at_end():
    dec = small_decoder()
    # Force "end" (id 3) to win every step.
    dec.head.bias.data[:] = 0
    dec.head.bias.data[3] = 1e3
    assert generate(dec, visual(), max_len=10) == [[3], [3]]


# -- loss ---------------------------------------------------------------------------------------------------
def test_syntax_loss_examples(rng):
    tgt = np.array([[4, 5, 6]])
    assert syntax_loss(Tensor(np.zeros((1, 3, V))), tgt).item() == pytest.approx(math.log(V))
    sharp = np.full((1, 3, V), -50.0)
    sharp[0, np.arange(3), tgt[0]] = 50.0
    assert syntax_loss(Tensor(sharp), tgt).item() < 1e-30
    logits = rng.normal(size=(2, 4, V))
    tgt = np.array([[3, 4, 0, 0], [7, 8, 9, 2]])
    expect, count = 0.0, 0
    for b in range(2):
        for t in range(4):
            if tgt[b, t] != 0:
                row = logits[b, t]
                expect -= row[tgt[b, t]] - math.log(sum(math.exp(v) for v in row))
                count += 1
    assert syntax_loss(Tensor(logits), tgt).item() == pytest.approx(expect / count, rel=1e-12)
    assert syntax_loss(Tensor(logits), tgt).item() >= 0


def test_syntax_loss_shape_check():
    with pytest.raises(ValueError):
        syntax_loss(Tensor(np.zeros((1, 3, V))), np.array([[1, 2]]))


def test_syntax_loss_grad(rng):
    logits = Tensor(rng.normal(size=(2, 3, 7)), requires_grad=True)
    tgt = np.array([[1, 2, 0], [3, 4, 5]])
    check_grads(lambda: syntax_loss(logits, tgt), [logits])
    assert np.all(log_softmax(logits).data <= 0)
