"""Autoregressive DSL decoder with concatenation-scored cross-modal attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chartlab.dsl import BOS, END, PAD
from .nn import FeedForward, LayerNorm, Linear, Module, SelfAttention, param, sinusoidal
from .numerics import Tensor, as_tensor, dropout, getitem, log_softmax, no_grad, pick, softmax, tanh


class CrossModalAttention(Module):
    """Score each (token, visual token) pair from the concatenation of the two
    positionally encoded vectors, softmax over the visual tokens, and take the
    weighted sum of visual tokens.

    ``score="linear"``: one linear map 2d -> 1. The token half of that score
    is constant across visual tokens and cancels in the softmax, so the
    weights depend on the visual side only.
    ``score="additive"``: v . tanh(W [PE(s) ; PE(f)] + b), with W: 2d -> d.
    The tanh couples the two halves, so each token gets its own weights.
    """

    def __init__(self, d: int, rng: np.random.Generator, score: str = "linear"):
        if score not in ("linear", "additive"):
            raise ValueError(f"unknown cross-attention score {score!r}")
        self.score = score
        if score == "linear":
            self.score_token = param(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, 1)), "score_token")
            self.score_visual = param(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, 1)), "score_visual")
            self.score_bias = param(np.zeros(1), "score_bias")
        else:
            self.score_token = param(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, d)), "score_token")
            self.score_visual = param(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, d)), "score_visual")
            self.score_bias = param(np.zeros(d), "score_bias")
            self.score_out = param(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)), "score_out")
        self.o = Linear(d, d, rng)

    def scores(self, s: Tensor, f: Tensor, s_pe: np.ndarray, f_pe: np.ndarray) -> Tensor:
        """(B, N, M) pre-softmax scores."""
        st = (s + s_pe) @ self.score_token                  # (B, N, 1) or (B, N, d)
        fv = (f + f_pe) @ self.score_visual                 # (B, M, 1) or (B, M, d)
        if self.score == "linear":
            return st + fv.transpose(0, 2, 1) + self.score_bias
        b, n, h = st.shape
        m = fv.shape[1]
        hidden = tanh(st.reshape(b, n, 1, h) + fv.reshape(b, 1, m, h) + self.score_bias)
        return (hidden @ self.score_out).reshape(b, n, m)

    def attend(self, s: Tensor, f: Tensor, s_pe: np.ndarray, f_pe: np.ndarray) -> tuple[Tensor, Tensor]:
        """``s`` (B, N, d) token states, ``f`` (B, M, d) visual tokens.

        Returns the context (B, N, d) and attention weights (B, N, M).
        """
        weights = softmax(self.scores(s, f, s_pe, f_pe), axis=-1)
        return weights @ f, weights

    def __call__(self, s, f, s_pe, f_pe) -> tuple[Tensor, Tensor]:
        ctx, weights = self.attend(s, f, s_pe, f_pe)
        return self.o(ctx), weights


def cross_attention(token_state, visual, attn: CrossModalAttention, position: int = 0):
    """Single-vector form: context and weights for one token state against (M, d) visual tokens."""
    s = as_tensor(token_state).reshape(1, 1, -1)
    f = as_tensor(visual)
    m, d = f.shape
    ctx, w = attn.attend(s, f.reshape(1, m, d), sinusoidal(position + 1, d)[position], sinusoidal(m, d))
    return ctx.reshape(d), w.reshape(m)


class DecoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout_rate: float,
                 score: str = "linear"):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross = CrossModalAttention(d, rng, score)
        self.ln3 = LayerNorm(d)
        self.ffn = FeedForward(d, rng, dropout_rate=dropout_rate)

    def __call__(self, x, visual, s_pe, f_pe, rng=None, cache=None):
        x = x + self.attn(self.ln1(x), causal=True, cache=cache)
        ctx, weights = self.cross(self.ln2(x), visual, s_pe, f_pe)
        x = x + ctx
        x = x + self.ffn(self.ln3(x), rng)
        return x, weights


@dataclass
class DecoderState:
    tokens: list[list[int]]
    attention: list[np.ndarray] = field(default_factory=list)  # per step (B, M), last block


class Decoder(Module):
    def __init__(self, vocab: int, d: int, heads: int, layers: int, max_len: int,
                 rng: np.random.Generator, dropout_rate: float = 0.1, score: str = "linear"):
        self.vocab, self.d, self.max_len = vocab, d, max_len
        self.embed = param(rng.normal(0.0, 1.0, size=(vocab, d)), "embed")
        self.blocks = [DecoderBlock(d, heads, rng, dropout_rate, score) for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, vocab, rng)
        self.dropout_rate = dropout_rate
        self.pe = sinusoidal(max_len + 1, d)

    def _check(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"token id outside vocabulary of size {self.vocab}")

    def forward(self, visual: Tensor, inputs: np.ndarray, rng=None, return_attention: bool = False):
        """Logits (B, N, V) for decoder inputs (B, N) under a causal mask."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.intp))
        self._check(inputs)
        b, n = inputs.shape
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.max_len}")
        m = visual.shape[1]
        s_pe, f_pe = self.pe[:n], sinusoidal(m, self.d)
        x = getitem(self.embed, inputs) + s_pe
        x = dropout(x, self.dropout_rate, rng, self.training)
        maps = []
        for block in self.blocks:
            x, w = block(x, visual, s_pe, f_pe, rng)
            maps.append(w)
        logits = self.head(self.ln_f(x))
        return (logits, maps) if return_attention else logits

    def step(self, visual: Tensor, ids: np.ndarray, position: int, caches: list[dict]):
        """One incremental step: logits (B, V) for tokens ``ids`` (B,) at ``position``."""
        m = visual.shape[1]
        s_pe = self.pe[position:position + 1]
        x = getitem(self.embed, np.asarray(ids, dtype=np.intp)[:, None]) + s_pe
        f_pe = sinusoidal(m, self.d)
        w = None
        for block, cache in zip(self.blocks, caches):
            x, w = block(x, visual, s_pe, f_pe, cache=cache)
        return self.head(self.ln_f(x)).reshape(x.shape[0], self.vocab), w


def shift_right(target: np.ndarray) -> np.ndarray:
    """Decoder inputs for teacher forcing: BOS followed by the target minus its last token."""
    target = np.atleast_2d(target)
    return np.concatenate([np.full((target.shape[0], 1), BOS), target[:, :-1]], axis=1)


def forward_teacher_forced(dec: Decoder, visual: Tensor, target: np.ndarray, rng=None) -> Tensor:
    return dec.forward(visual, shift_right(np.asarray(target)), rng)


def generate(dec: Decoder, visual: Tensor, mode: str = "greedy", max_len: int | None = None,
             rng: np.random.Generator | None = None, temperature: float = 1.0,
             return_state: bool = False):
    """Decode a batch; each sequence stops at ``end`` or ``max_len`` tokens."""
    max_len = dec.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    was_training = dec.training
    dec.eval()
    b = visual.shape[0]
    out: list[list[int]] = [[] for _ in range(b)]
    state = DecoderState(out)
    done = np.zeros(b, dtype=bool)
    caches = [{} for _ in dec.blocks]
    ids = np.full(b, BOS)
    try:
        with no_grad():
            for pos in range(max_len):
                logits, w = dec.step(visual, ids, pos, caches)
                state.attention.append(w.data[:, 0, :])
                if mode == "greedy":
                    ids = logits.data.argmax(axis=-1)
                else:
                    logp = log_softmax(logits * (1.0 / temperature), axis=-1).data
                    ids = np.array([rng.choice(dec.vocab, p=np.exp(row)) for row in logp])
                for i in range(b):
                    if not done[i]:
                        out[i].append(int(ids[i]))
                        done[i] = ids[i] == END
                if done.all():
                    break
    finally:
        dec.train(was_training)
    return (out, state) if return_state else out


def syntax_loss(logits: Tensor, target: np.ndarray, pad: int = PAD) -> Tensor:
    """Mean token cross-entropy over non-padding target positions."""
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {target.shape}")
    nll = -pick(log_softmax(logits, axis=-1), target)
    mask = (target != pad).astype(float)
    return (nll * mask).sum() * (1.0 / max(mask.sum(), 1.0))
