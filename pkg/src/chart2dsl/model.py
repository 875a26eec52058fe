"""Encoder -> MoE fusion -> decoder assembly."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import lora
from .chartlab.dsl import VOCAB_SIZE
from .decoder import Decoder, generate, shift_right
from .encoder import Encoder, VisualTokens, encode, predict_element_count
from .moe import GateOutput, MoELayer, RoutingDecision
from .nn import FeedForward, Module
from .numerics import Tensor, no_grad, stream


@dataclass
class ModelConfig:
    side: int = 64
    patch: int = 8
    d: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    vocab: int = VOCAB_SIZE
    max_len: int = 96
    dropout: float = 0.1
    cross_score: str = "linear"
    use_moe: bool = True
    experts: int = 8
    capacity: int = 32
    top_k: int = 2
    routing: str = "topk"
    temperature: float = 1.0
    sigma: float = 0.01
    reweight: str = "sharpen"
    complexity_alpha: float = 0.05
    complexity_beta: float = 0.1
    use_lora: bool = True
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: str = "attn+mlp"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    logits: Tensor
    visual: VisualTokens
    fused: Tensor
    count: Tensor
    gate: GateOutput | None
    decision: RoutingDecision | None


class ChartToCode(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "init", "base")
        self.encoder = Encoder(cfg.side, cfg.patch, cfg.d, cfg.heads, cfg.enc_layers, rng, cfg.dropout)
        if cfg.use_moe:
            self.moe = MoELayer(cfg.d, cfg.experts, stream(seed, "init", "moe"), k=cfg.top_k,
                                capacity=cfg.capacity, strategy=cfg.routing,
                                temperature=cfg.temperature, sigma=cfg.sigma,
                                reweight_mode=cfg.reweight, dropout_rate=cfg.dropout,
                                alpha=cfg.complexity_alpha, beta=cfg.complexity_beta)
        else:
            self.fusion_ffn = FeedForward(cfg.d, stream(seed, "init", "moe"), dropout_rate=cfg.dropout)
        self.decoder = Decoder(cfg.vocab, cfg.d, cfg.heads, cfg.dec_layers, cfg.max_len, rng, cfg.dropout,
                               cfg.cross_score)
        if cfg.use_lora:
            lora.attach(self, cfg.lora_targets, cfg.lora_rank, cfg.lora_alpha, stream(seed, "init", "lora"))

    @property
    def adapters(self) -> list[lora.LoRAAdapter]:
        return lora.adapters_of(self)

    @property
    def has_moe(self) -> bool:
        return self.cfg.use_moe

    def visual_tokens(self, rgb, chart_type, counts=None, rng=None) -> VisualTokens:
        return encode(self.encoder, rgb, chart_type, counts, rng)

    def fuse_visual(self, v: VisualTokens, rngs: dict | None = None, bypass_moe: bool = False):
        """Route encoder tokens through the fusion layer; returns (fused, count, gate, decision)."""
        rngs = rngs or {}
        count = predict_element_count(self.encoder, v)
        if bypass_moe:
            return v.tokens, count, None, None
        if self.cfg.use_moe:
            fused, g, decision = self.moe(v.tokens, count, v.chart_type, rngs.get("noise"),
                                          rngs.get("route"), rngs.get("dropout"))
            return fused, count, g, decision
        return v.tokens + self.fusion_ffn(v.tokens, rngs.get("dropout")), count, None, None

    def forward(self, rgb, chart_type, target, counts=None, rngs: dict | None = None,
                bypass_moe: bool = False) -> ModelOutput:
        rngs = rngs or {}
        v = self.visual_tokens(rgb, chart_type, counts, rngs.get("dropout"))
        fused, count, g, decision = self.fuse_visual(v, rngs, bypass_moe)
        logits = self.decoder.forward(fused, shift_right(np.asarray(target)), rngs.get("dropout"))
        return ModelOutput(logits, v, fused, count, g, decision)

    def generate(self, rgb, chart_type, mode: str = "greedy", max_len: int | None = None,
                 rng=None, bypass_moe: bool = False) -> list[list[int]]:
        was = self.training
        self.eval()
        try:
            with no_grad():
                v = self.visual_tokens(rgb, chart_type)
                fused, *_ = self.fuse_visual(v, {"route": rng}, bypass_moe)
            return generate(self.decoder, fused, mode, max_len, rng)
        finally:
            self.train(was)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())
