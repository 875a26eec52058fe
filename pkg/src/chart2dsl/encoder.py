"""Patch-transformer visual front end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import FeedForward, LayerNorm, Linear, Module, SelfAttention, param, sinusoidal
from .numerics import Tensor, dropout, linear, softplus


@dataclass
class VisualTokens:
    tokens: Tensor                 # (B, M, d)
    chart_type: np.ndarray         # (B,) chart-type indices, from metadata
    true_element_count: np.ndarray | None = None  # (B,), supervision only

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]


def patchify(rgb: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) uint8 -> (B, M, patch*patch*3) ink intensities in [0, 1]."""
    if rgb.ndim == 3:
        rgb = rgb[None]
    b, h, w, c = rgb.shape
    if h % patch or w % patch:
        raise ValueError(f"raster {h}x{w} not divisible by patch side {patch}")
    ink = 1.0 - rgb.astype(np.float64) / 255.0
    x = ink.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class EncoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout_rate: float):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng, dropout_rate=dropout_rate)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x), rng)


class Encoder(Module):
    def __init__(self, side: int, patch: int, d: int, heads: int, layers: int,
                 rng: np.random.Generator, dropout_rate: float = 0.1):
        if side % patch:
            raise ValueError(f"raster side {side} not divisible by patch side {patch}")
        self.side, self.patch, self.d = side, patch, d
        self.n_tokens = (side // patch) ** 2
        self.patch_embed = Linear(patch * patch * 3, d, rng)
        self.blocks = [EncoderBlock(d, heads, rng, dropout_rate) for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.dropout_rate = dropout_rate
        self.pe = sinusoidal(self.n_tokens, d)
        # Count head: zero weights, bias at softplus^-1(4) so untrained predictions sit mid-range.
        self.count_w = param(np.zeros(d), "count_w")
        self.count_b = param(np.array([np.log(np.expm1(4.0))]), "count_b")

    def __call__(self, rgb: np.ndarray, chart_type, true_element_count=None, rng=None) -> VisualTokens:
        return encode(self, rgb, chart_type, true_element_count, rng)


def encode(enc: Encoder, rgb: np.ndarray, chart_type, true_element_count=None, rng=None) -> VisualTokens:
    patches = patchify(rgb, enc.patch)
    if patches.shape[1] != enc.n_tokens:
        raise ValueError(f"expected {enc.n_tokens} patches, got {patches.shape[1]}")
    x = enc.patch_embed(Tensor(patches)) + enc.pe
    x = dropout(x, enc.dropout_rate, rng, enc.training)
    for block in enc.blocks:
        x = block(x, rng)
    x = enc.ln_f(x)
    counts = None if true_element_count is None else np.atleast_1d(np.asarray(true_element_count, float))
    return VisualTokens(x, np.atleast_1d(np.asarray(chart_type, dtype=int)), counts)


def predict_element_count(enc: Encoder, v: VisualTokens) -> Tensor:
    """Softplus of a linear head on mean-pooled tokens; shape (B,)."""
    pooled = v.tokens.mean(axis=1)
    return softplus(linear(pooled, enc.count_w.reshape(-1, 1), enc.count_b)).reshape(-1)
