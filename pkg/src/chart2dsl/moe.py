"""Complexity-aware mixture-of-experts layer.

Routing pipeline per token: linear gate scores, Gaussian exploration noise
(training only), softmax, complexity reweighting, then top-k or sampled
dispatch under a per-expert capacity, and a weighted sum of expert outputs
added to the token (residual path).
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .chartlab.spec import CHART_TYPES
from .nn import FeedForward, Linear, Module, param
from .numerics import NumericalError, Tensor, as_tensor, exp, getitem, index_add, log, log_softmax, softmax

# Initial per-type complexity, in CHART_TYPES order; "complex" has no published
# value and starts at 4.0.
TYPE_COMPLEXITY_INIT = (3.2, 4.1, 4.5, 2.7, 4.0)


class ComplexityHead(Module):
    def __init__(self, alpha: float = 0.05, beta: float = 0.1, type_init=TYPE_COMPLEXITY_INIT):
        if len(type_init) != len(CHART_TYPES):
            raise ValueError(f"need one complexity entry per chart type ({len(CHART_TYPES)})")
        self.alpha = param(np.array(alpha), "alpha")
        self.beta = param(np.array(beta), "beta")
        self.type_complexity = param(np.array(type_init, dtype=float), "type_complexity")


def complexity_score(count: Tensor, chart_type, head: ComplexityHead) -> Tensor:
    """``alpha * count + beta * type_complexity[type]`` per chart."""
    types = np.atleast_1d(np.asarray(chart_type, dtype=int))
    return head.alpha * as_tensor(count) + head.beta * getitem(head.type_complexity, types)


@dataclass
class GateOutput:
    raw: Tensor
    noised: Tensor
    log_probs: Tensor
    probs: Tensor


def gate(tokens: Tensor, gate_linear: Linear, sigma: float, rng: np.random.Generator | None,
         training: bool) -> GateOutput:
    if sigma < 0:
        raise ValueError(f"noise std must be non-negative, got {sigma}")
    raw = gate_linear(tokens)
    noised = raw
    if training and sigma > 0:
        noised = raw + rng.normal(0.0, sigma, size=raw.shape)
    logp = log_softmax(noised, axis=-1)
    return GateOutput(raw, noised, logp, exp(logp))


def reweight(probs, c, temperature: float = 1.0, mode: str = "sharpen", log_probs=None) -> Tensor:
    """Complexity reweighting of routing probabilities.

    ``literal``: ``p_i exp(c/T) / sum_j p_j exp(c/T)``; the factor is shared by
    all experts of a token, so this returns ``p`` up to rounding.
    ``sharpen``: ``softmax(log p * (1 + c/T))``, a complexity-dependent
    sharpening that keeps the argmax.

    ``c`` broadcasts against the leading (token) axes of ``probs``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    probs = as_tensor(probs)
    pd = probs.data
    if not np.isfinite(pd).all():
        raise NumericalError("non-finite routing probabilities")
    if (pd < 0).any() or not np.allclose(pd.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("routing probabilities must be non-negative and sum to 1")
    c = as_tensor(c)
    if c.ndim:
        c = c.reshape(c.shape + (1,) * (probs.ndim - c.ndim))
    if mode == "literal":
        num = probs * exp(c * (1.0 / temperature))
        return num / num.sum(axis=-1, keepdims=True)
    if mode == "sharpen":
        lp = log(probs) if log_probs is None else log_probs
        return softmax(lp * (c * (1.0 / temperature) + 1.0), axis=-1)
    raise ValueError(f"unknown reweight mode {mode!r}")


@dataclass
class Dispatch:
    """Flat (token, expert) assignments for a group of tokens."""
    token: np.ndarray    # (S,) token index within the group
    expert: np.ndarray   # (S,) expert id
    n_tokens: int
    n_experts: int

    def load(self) -> np.ndarray:
        return np.bincount(self.expert, minlength=self.n_experts)

    def per_token(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_tokens)]
        for t, e in zip(self.token.tolist(), self.expert.tolist()):
            out[t].append(e)
        return out


def preference_order(p: np.ndarray, strategy: str, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """Per-token expert ranking (M, N): highest first, lower id wins ties.

    For probabilistic routing the first ``k`` entries are drawn without
    replacement in proportion to ``p`` (Gumbel top-k); the rest follow by
    probability.
    """
    m, n = p.shape
    order = np.argsort(-p, axis=1, kind="stable")
    if strategy == "topk":
        return order
    if strategy != "prob":
        raise ValueError(f"unknown routing strategy {strategy!r}")
    if rng is None:
        raise ValueError("probabilistic routing needs an rng")
    with np.errstate(divide="ignore"):
        keys = np.log(p) + rng.gumbel(size=p.shape)
    drawn = np.argsort(-keys, axis=1, kind="stable")[:, :k]
    out = np.empty_like(order)
    for t in range(m):
        head = list(drawn[t])
        out[t] = head + [e for e in order[t] if e not in head]
    return out


def dispatch(p: np.ndarray, k: int, capacity: int, strategy: str = "topk",
             rng: np.random.Generator | None = None) -> Dispatch:
    """Assign each token up to ``k`` distinct experts under a per-expert capacity.

    Choices are filled rank by rank over all tokens (every token's first pick
    before any second pick). A token whose pick is full falls through to its
    next-ranked unused expert; if every expert is full the slot stays empty,
    and a token with no slots bypasses the layer.
    """
    p = np.asarray(p)
    m, n = p.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must satisfy 1 <= k <= {n}")
    if capacity < 1:
        raise ValueError(f"capacity must be positive, got {capacity}")
    order = preference_order(p, strategy, k, rng)
    load = np.zeros(n, dtype=int)
    cursor = np.zeros(m, dtype=int)
    toks, exps = [], []
    for _ in range(k):
        for t in range(m):
            c = cursor[t]
            while c < n and load[order[t, c]] >= capacity:
                c += 1
            if c < n:
                e = order[t, c]
                load[e] += 1
                toks.append(t)
                exps.append(e)
                c += 1
            cursor[t] = c
    assert (load <= capacity).all(), "expert capacity exceeded"
    return Dispatch(np.array(toks, dtype=np.intp), np.array(exps, dtype=np.intp), m, n)


def fusion_weights(p_flat: Tensor, token: np.ndarray, expert: np.ndarray, n_tokens: int) -> Tensor:
    """Selected probabilities renormalized over each token's selected set."""
    picked = getitem(p_flat, (token, expert))
    denom = index_add(Tensor(np.zeros(n_tokens)), token, picked)
    return picked / getitem(denom, token)


def fuse(tokens: Tensor, token: np.ndarray, expert: np.ndarray, weights: Tensor, experts,
         rng: np.random.Generator | None = None) -> Tensor:
    """``token + sum_selected w * expert(token)`` over flat (S, d) tokens."""
    out = tokens
    for e, ffn in enumerate(experts):
        sel = np.flatnonzero(expert == e)
        if sel.size == 0:
            continue
        rows = token[sel]
        y = ffn(getitem(tokens, rows), rng)
        w = getitem(weights, sel).reshape(-1, 1)
        out = index_add(out, rows, y * w)
    return out


def load_balance_loss(p, per_token: bool = False) -> Tensor:
    """Squared deviation of routing probabilities from uniform.

    Default: on the batch-mean distribution ``sum_i (mean p_i - 1/N)^2``.
    ``per_token=True`` averages ``sum_i (p_i - 1/N)^2`` over tokens instead.
    """
    p = as_tensor(p)
    n = p.shape[-1]
    flat = p.reshape(-1, n)
    if per_token:
        dev = flat - 1.0 / n
        return (dev * dev).sum(axis=-1).mean()
    dev = flat.mean(axis=0) - 1.0 / n
    return (dev * dev).sum()


def router_kl_loss(p, log_probs=None) -> Tensor:
    """Mean over tokens of KL(p || uniform) = sum_i p_i log(p_i N); 0 log 0 = 0."""
    p = as_tensor(p)
    n = p.shape[-1]
    flat = p.reshape(-1, n)
    if log_probs is None:
        lp = log(flat + np.where(flat.data > 0, 0.0, 1.0))
    else:
        lp = as_tensor(log_probs).reshape(-1, n)
    return (flat * (lp + math.log(n))).sum(axis=-1).mean()


@dataclass
class RoutingDecision:
    raw_scores: np.ndarray      # (B, M, N)
    noised_scores: np.ndarray
    probs: np.ndarray
    reweighted: np.ndarray
    complexity: np.ndarray      # (B,)
    token: np.ndarray           # (S,) flat token index b * M + m
    expert: np.ndarray          # (S,)
    weights: np.ndarray         # (S,)
    chart_type: np.ndarray      # (B,)

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]

    def selected(self, b: int, m: int) -> list[tuple[int, float]]:
        flat = b * self.probs.shape[1] + m
        idx = np.flatnonzero(self.token == flat)
        return [(int(self.expert[i]), float(self.weights[i])) for i in idx]

    def bypassed(self) -> int:
        b, m, _ = self.probs.shape
        return b * m - np.unique(self.token).size


class MoELayer(Module):
    def __init__(self, d: int, n_experts: int, rng: np.random.Generator, k: int = 2,
                 capacity: int = 32, strategy: str = "topk", temperature: float = 1.0,
                 sigma: float = 0.01, reweight_mode: str = "sharpen", dropout_rate: float = 0.1,
                 alpha: float = 0.05, beta: float = 0.1):
        if n_experts < 2:
            raise ValueError("need at least two experts")
        if not 1 <= k <= n_experts:
            raise ValueError(f"k={k} must satisfy 1 <= k <= {n_experts}")
        self.gate = Linear(d, n_experts, rng, std=0.02)
        self.complexity = ComplexityHead(alpha, beta)
        self.experts = [FeedForward(d, rng, dropout_rate=dropout_rate) for _ in range(n_experts)]
        self.k, self.capacity, self.strategy = k, capacity, strategy
        self.temperature, self.sigma, self.reweight_mode = temperature, sigma, reweight_mode

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def __call__(self, x: Tensor, count: Tensor, chart_type, noise_rng=None, route_rng=None,
                 dropout_rng=None):
        """Route (B, M, d) tokens; returns the fused tokens, gate output and decision."""
        b, m, d = x.shape
        types = np.atleast_1d(np.asarray(chart_type, dtype=int))
        c = complexity_score(count, types, self.complexity)
        g = gate(x, self.gate, self.sigma, noise_rng, self.training)
        p_re = reweight(g.probs, c, self.temperature, self.reweight_mode, log_probs=g.log_probs)
        # Inference without a route stream falls back to deterministic top-k.
        strategy = self.strategy if self.training or route_rng is not None else "topk"
        toks, exps = [], []
        for i in range(b):
            disp = dispatch(p_re.data[i], self.k, self.capacity, strategy, route_rng)
            toks.append(disp.token + i * m)
            exps.append(disp.expert)
        token = np.concatenate(toks)
        expert = np.concatenate(exps)
        p_flat = p_re.reshape(b * m, self.n_experts)
        w = fusion_weights(p_flat, token, expert, b * m)
        out = fuse(x.reshape(b * m, d), token, expert, w, self.experts, dropout_rng).reshape(b, m, d)
        decision = RoutingDecision(g.raw.data, g.noised.data, g.probs.data, p_re.data, c.data,
                                   token, expert, w.data, types)
        return out, g, decision


# -- utilization accounting ----------------------------------------------------------
@dataclass
class UtilizationTracker:
    n_experts: int
    window: int = 1000
    n_types: int = len(CHART_TYPES)
    _steps: deque = field(default_factory=deque, repr=False)

    def update(self, decision: RoutingDecision) -> UtilizationTracker:
        m = decision.probs.shape[1]
        types = decision.chart_type[decision.token // m]
        counts = np.zeros((self.n_types, self.n_experts), dtype=np.int64)
        np.add.at(counts, (types, decision.expert), 1)
        return self.record(counts)

    def record(self, counts: np.ndarray) -> UtilizationTracker:
        """Push one step's (types x experts) slot counts, dropping the oldest past the window."""
        self._steps.append(np.asarray(counts, dtype=np.int64))
        while len(self._steps) > self.window:
            self._steps.popleft()
        return self

    def totals(self) -> np.ndarray:
        if not self._steps:
            return np.zeros((self.n_types, self.n_experts), dtype=np.int64)
        return np.sum(self._steps, axis=0)

    def utilization(self) -> np.ndarray:
        per_expert = self.totals().sum(axis=0)
        total = per_expert.sum()
        return per_expert / total if total else np.zeros(self.n_experts)

    def heatmap(self) -> np.ndarray:
        """(experts x types) share of each type's routed slots per expert."""
        t = self.totals().T.astype(float)
        col = t.sum(axis=0, keepdims=True)
        return np.divide(t, col, out=np.zeros_like(t), where=col > 0)

    def write_heatmap_csv(self, path) -> None:
        h = self.heatmap()
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["expert", *CHART_TYPES])
            for e in range(self.n_experts):
                w.writerow([e, *(f"{v:.6f}" for v in h[e])])


def utilization_balance(u: np.ndarray) -> float:
    """``1 - std(u) / max_std``; 1 for uniform use, 0 when one expert takes everything."""
    u = np.asarray(u, dtype=float)
    n = u.size
    if u.sum() == 0:
        return 0.0
    max_std = math.sqrt(n - 1) / n
    return float(1.0 - np.std(u) / max_std)
