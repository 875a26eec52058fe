import numpy as np
import pytest

from chart2dsl.chartlab import DEFAULT_TYPE_MIX, TYPE_INDEX, rasterize, sample_spec
from chart2dsl.encoder import Encoder, encode, patchify, predict_element_count
from chart2dsl.numerics import OptimizerState, Tensor, adamw_step, backward, clip_gradients, no_grad, stream
from conftest import check_grads


def small_encoder(side=16, patch=8, d=8, seed=0):
    return Encoder(side, patch, d, heads=2, layers=1, rng=stream(seed, "enc"), dropout_rate=0.0)


def test_token_count_for_default_geometry():
    enc = Encoder(64, 8, 16, 2, 1, stream(0, "enc"))
    v = enc.eval()(np.full((64, 64, 3), 255, np.uint8), chart_type=0)
    assert v.tokens.shape == (1, 64, 16)
    assert np.isfinite(v.tokens.data).all()


def test_indivisible_raster_rejected():
    with pytest.raises(ValueError):
        Encoder(60, 8, 8, 2, 1, stream(0))
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 20, 20, 3), np.uint8), 8)


def test_blank_and_full_ink_differ():
    enc = small_encoder().eval()
    blank = enc(np.full((16, 16, 3), 255, np.uint8), 0).tokens.data
    ink = enc(np.zeros((16, 16, 3), np.uint8), 0).tokens.data
    assert not np.allclose(blank, ink)


def test_patch_shuffle_changes_output():
    enc = small_encoder(side=32).eval()
    rgb = stream(0, "img").integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    swapped = rgb.copy()
    swapped[:8, :8], swapped[8:16, 8:16] = rgb[8:16, 8:16], rgb[:8, :8]
    a, b = enc(rgb, 0).tokens.data, enc(swapped, 0).tokens.data
    assert not np.allclose(a, b)


def test_encode_is_deterministic():
    enc = small_encoder().eval()
    rgb = stream(1, "img").integers(0, 256, size=(2, 16, 16, 3)).astype(np.uint8)
    np.testing.assert_array_equal(enc(rgb, [0, 1]).tokens.data, enc(rgb, [0, 1]).tokens.data)


def test_untrained_count_head_closed_form():
    enc = small_encoder().eval()
    v = enc(np.zeros((3, 16, 16, 3), np.uint8), [0, 1, 2])
    np.testing.assert_allclose(predict_element_count(enc, v).data, 4.0, rtol=1e-12)
    enc.count_b.data[:] = 0.0
    np.testing.assert_allclose(predict_element_count(enc, v).data, np.log(2.0), rtol=1e-12)


def test_count_nonnegative(rng):
    enc = small_encoder().eval()
    enc.count_w.data[:] = rng.normal(0, 50, size=8)
    enc.count_b.data[:] = -100.0
    v = enc(rng.integers(0, 256, size=(4, 16, 16, 3)).astype(np.uint8), [0] * 4)
    assert (predict_element_count(enc, v).data >= 0).all()


def test_patch_embedding_grad_matches_fd(rng):
    enc = small_encoder().eval()
    rgb = rng.integers(0, 256, size=(2, 16, 16, 3)).astype(np.uint8)
    w = rng.normal(size=(2, 4, 8))
    W, b = enc.patch_embed.weight, enc.patch_embed.bias
    W.data[:] = rng.normal(0, 0.2, size=W.shape)
    check_grads(lambda: (encode(enc, rgb, [0, 1]).tokens * w).sum(), [W, b], rtol=1e-4, atol=1e-8)


def test_count_head_grad_matches_fd(rng):
    enc = small_encoder().eval()
    enc.count_w.data[:] = rng.normal(size=8)
    v = enc(rng.integers(0, 256, size=(3, 16, 16, 3)).astype(np.uint8), [0, 1, 2])
    tokens = Tensor(v.tokens.data)
    v.tokens = tokens
    target = np.array([2.0, 5.0, 7.0])

    def loss():
        d = predict_element_count(enc, v) - target
        return (d * d).mean()
    check_grads(loss, [enc.count_w, enc.count_b])


@pytest.mark.slow
def test_count_head_learns_element_count():
    """Trained on 2k charts with squared error, the head predicts held-out counts within 1.5."""
    rng = stream(0, "count-data")
    specs = [sample_spec(rng, DEFAULT_TYPE_MIX) for _ in range(2200)]
    rgb = np.stack([rasterize(s).rgb for s in specs])
    counts = np.array([s.element_count for s in specs], float)
    types = np.array([TYPE_INDEX[s.chart_type] for s in specs])
    enc = Encoder(64, 8, 64, 4, 2, stream(0, "init"), dropout_rate=0.0)
    params = enc.parameters()
    state = OptimizerState()
    order = stream(0, "order")
    for _ in range(3):
        perm = order.permutation(2000)
        for i in range(0, 2000, 16):
            idx = perm[i:i + 16]
            d = predict_element_count(enc, enc(rgb[idx], types[idx])) - counts[idx]
            g = backward((d * d).mean(), list(params.values()))
            adamw_step({k: p.data for k, p in params.items()},
                       clip_gradients({k: g[p] for k, p in params.items()}, 1.0), state, 1e-3)
            for p in params.values():
                p.grad = None
    enc.eval()
    with no_grad():
        held = predict_element_count(enc, enc(rgb[2000:], types[2000:])).data
    assert np.abs(held - counts[2000:]).mean() < 1.5
