"""Run configuration: sectioned dataclasses addressed by flat dotted keys.

A config file is a flat JSON object such as ``{"moe.experts": 8, "train.epochs": 5}``;
command-line overrides use the same keys (``moe.experts=12``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..chartlab.spec import DEFAULT_TYPE_MIX
from ..lora import TARGET_PRESETS
from ..model import ModelConfig

MODES = ("full_finetune", "lora_only", "moe_lora")


@dataclass
class ModelSection:
    side: int = 64
    patch: int = 8
    d: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 96
    dropout: float = 0.1
    cross_score: str = "linear"


@dataclass
class MoESection:
    enabled: bool = True
    experts: int = 8
    capacity: int = 32
    top_k: int = 2
    routing: str = "topk"
    temperature: float = 1.0
    sigma: float = 0.01
    reweight: str = "sharpen"
    complexity_alpha: float = 0.05
    complexity_beta: float = 0.1
    loss_source: str = "probs"       # "probs" (before reweighting) or "reweighted"
    per_token_load: bool = False


@dataclass
class LoRASection:
    rank: int = 8
    alpha: float = 16.0
    targets: str = "attn+mlp"


@dataclass
class LossSection:
    lambda1: float = 0.5        # inside the utilization regularizer
    lambda2: float = 0.7        # router KL
    lambda3: float = 0.3        # utilization regularizer
    lambda_load: float = 50.0   # batch-mean deviations are tiny, so the term needs weight
    lambda_frob: float = 1e-4
    lambda_count: float = 0.01  # element-count head supervision
    semantic_mode: str = "log_only"
    semantic_every: int = 1


@dataclass
class TrainSection:
    batch_size: int = 4
    epochs: int = 5
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    t_max: int = 50_000         # 0: anneal over the whole run
    max_steps: int = 0          # 0: no cap beyond epochs
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    augment_prob: float = 1.0
    eval_every: int = 0         # steps; 0: once per epoch
    patience: int = 2
    util_window: int = 1000


@dataclass
class DataSection:
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 200
    type_mix: tuple = DEFAULT_TYPE_MIX
    eval_limit: int = 0         # 0: evaluate every sample of the split


@dataclass
class EvalSection:
    tau: float = 0.85


@dataclass
class RunConfig:
    mode: str = "moe_lora"
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    moe: MoESection = field(default_factory=MoESection)
    lora: LoRASection = field(default_factory=LoRASection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- flat view ------------------------------------------------------------
    def flat(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if hasattr(val, "__dataclass_fields__"):
                for k, v in asdict(val).items():
                    out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
            else:
                out[f.name] = val
        return out

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        cfg = replace(self, **{f.name: replace(getattr(self, f.name)) for f in fields(self)
                               if hasattr(getattr(self, f.name), "__dataclass_fields__")})
        known = self.flat()
        for key, value in overrides.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            value = _coerce(key, value, known[key])
            if "." in key:
                section, name = key.split(".", 1)
                setattr(getattr(cfg, section), name, value)
            else:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.flat(), sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path, preset: str | None = None) -> RunConfig:
        base = PRESETS[preset]() if preset else cls()
        return base.with_overrides(json.loads(Path(path).read_text()))

    # -- derived ----------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        m, moe, lo = self.model, self.moe, self.lora
        return ModelConfig(
            side=m.side, patch=m.patch, d=m.d, heads=m.heads, enc_layers=m.enc_layers,
            dec_layers=m.dec_layers, max_len=m.max_len, dropout=m.dropout, cross_score=m.cross_score,
            use_moe=moe.enabled, experts=moe.experts, capacity=moe.capacity, top_k=moe.top_k,
            routing=moe.routing, temperature=moe.temperature, sigma=moe.sigma,
            reweight=moe.reweight, complexity_alpha=moe.complexity_alpha,
            complexity_beta=moe.complexity_beta, use_lora=self.mode != "full_finetune",
            lora_rank=lo.rank, lora_alpha=lo.alpha, lora_targets=lo.targets)

    def validate(self) -> None:
        m, moe, lo, ls, t, d = self.model, self.moe, self.lora, self.loss, self.train, self.data
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (m.side % m.patch == 0, "model.side must be divisible by model.patch"),
            (m.side % 16 == 0, "model.side must be a multiple of 16"),
            (m.d % m.heads == 0 and m.d % 2 == 0, "model.d must be even and divisible by model.heads"),
            (m.enc_layers >= 1 and m.dec_layers >= 1, "need at least one encoder and decoder layer"),
            (m.max_len >= 1, "model.max_len must be positive"),
            (0.0 <= m.dropout < 1.0, "model.dropout must lie in [0, 1)"),
            (m.cross_score in ("additive", "linear"), "model.cross_score must be 'additive' or 'linear'"),
            (moe.experts >= 2, "moe.experts must be at least 2"),
            (moe.capacity >= 1, "moe.capacity must be positive"),
            (1 <= moe.top_k <= moe.experts, "moe.top_k must lie in [1, moe.experts]"),
            (moe.routing in ("topk", "prob"), "moe.routing must be 'topk' or 'prob'"),
            (moe.temperature > 0, "moe.temperature must be positive"),
            (moe.sigma >= 0, "moe.sigma must be non-negative"),
            (moe.reweight in ("sharpen", "literal"), "moe.reweight must be 'sharpen' or 'literal'"),
            (moe.loss_source in ("probs", "reweighted"), "moe.loss_source must be 'probs' or 'reweighted'"),
            (0 < lo.rank < m.d, "lora.rank must satisfy 0 < rank < model.d"),
            (lo.alpha > 0, "lora.alpha must be positive"),
            (lo.targets in TARGET_PRESETS, f"lora.targets must be one of {sorted(TARGET_PRESETS)}"),
            (all(v >= 0 for v in (ls.lambda1, ls.lambda2, ls.lambda3, ls.lambda_load,
                                  ls.lambda_frob, ls.lambda_count)), "loss weights must be non-negative"),
            (ls.semantic_mode in ("log_only", "scaled_ce"), "loss.semantic_mode must be log_only or scaled_ce"),
            (ls.semantic_every >= 0, "loss.semantic_every must be non-negative"),
            (t.batch_size >= 1, "train.batch_size must be positive"),
            (t.epochs >= 0, "train.epochs must be non-negative"),
            (0 < t.lr_min < t.lr_max, "need 0 < train.lr_min < train.lr_max"),
            (t.t_max >= 0 and t.max_steps >= 0, "train.t_max and train.max_steps must be non-negative"),
            (t.clip > 0, "train.clip must be positive"),
            (0.0 <= t.augment_prob <= 1.0, "train.augment_prob must lie in [0, 1]"),
            (t.patience >= 1 and t.util_window >= 1, "train.patience and train.util_window must be positive"),
            (min(d.train_size, d.val_size, d.test_size) >= 1, "data sizes must be positive"),
            (len(d.type_mix) == 5 and abs(sum(d.type_mix) - 1.0) < 1e-9 and min(d.type_mix) >= 0,
             "data.type_mix must be five non-negative weights summing to 1"),
            (0.75 <= self.eval.tau <= 0.90, "eval.tau must lie in [0.75, 0.90]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise ValueError(f"cannot parse {value!r} for {key}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValueError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        return tuple(float(v) for v in value)
    return str(value)


def toy_config() -> RunConfig:
    """Desk-scale settings used by the smoke-convergence run.

    Trains from scratch, so every weight is trainable (there is no pretrained
    backbone to freeze) and the learning rate is raised to suit d=64.
    """
    cfg = RunConfig()
    return cfg.with_overrides({
        "mode": "full_finetune",
        "model.dropout": 0.0,
        "train.lr_max": 3e-3,
        "train.lr_min": 3e-5,
        "train.t_max": 0,
        "train.augment_prob": 0.25,
        "train.patience": 5,
        "loss.semantic_every": 50,
        "data.eval_limit": 100,
    })


PRESETS = {"default": RunConfig, "toy": toy_config}
