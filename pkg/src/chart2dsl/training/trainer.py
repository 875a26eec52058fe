"""Training loop: augment, forward, compose loss, backward, clip, AdamW."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..chartlab import augment_image
from ..decoder import syntax_loss
from ..lora import frobenius_penalty
from ..model import ChartToCode
from ..moe import UtilizationTracker, load_balance_loss, router_kl_loss
from ..numerics import (LRSchedule, NumericalError, OptimizerState, Tensor, activation_count,
                        adamw_step, backward, clip_gradients, cosine_lr, stream)
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Batch, Sample, batches
from .evaluate import evaluate_model
from .losses import LossBreakdown, LossWeights, compose_loss, semantic_penalty, utilization_regularizer

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient stopped the run."""


def set_trainable(model: ChartToCode, mode: str) -> list[str]:
    """Flag parameters for ``mode``; returns the trainable names in sorted order.

    full_finetune: everything. lora_only: adapters, output head and the small
    routing heads. moe_lora: adapters, output head and the whole MoE layer.
    The element-count head trains in every mode.
    """
    params = model.parameters()
    if mode != "full_finetune" and not model.adapters:
        raise ValueError(f"mode {mode!r} needs LoRA adapters attached")

    def wanted(name: str) -> bool:
        if mode == "full_finetune":
            return True
        if ".adapter." in name or name.startswith("decoder.head.") or name.startswith("encoder.count_"):
            return True
        if mode == "lora_only":
            return name.startswith(("moe.gate.", "moe.complexity."))
        return name.startswith("moe.")

    for name, p in params.items():
        p.requires_grad = wanted(name)
    return sorted(n for n, p in params.items() if p.requires_grad)


@dataclass
class StepResult:
    loss: LossBreakdown
    grads: dict[str, np.ndarray]
    activations: int
    decision: object = None


def loss_step(model: ChartToCode, cfg: RunConfig, batch: Batch, names: list[str], rngs: dict,
              tracker: UtilizationTracker | None = None, semantic: float = 0.0) -> StepResult:
    """Forward, loss composition and backward for one batch (no parameter update)."""
    params = model.parameters()
    out = model.forward(batch.rgb, batch.chart_type, batch.target, batch.counts, rngs)
    syn = syntax_loss(out.logits, batch.target)
    kl = load = 0.0
    if out.gate is not None:
        src = out.gate.probs if cfg.moe.loss_source == "probs" else None
        if src is None:
            src = Tensor(out.decision.reweighted)
        kl = router_kl_loss(src, out.gate.log_probs if cfg.moe.loss_source == "probs" else None)
        load = load_balance_loss(src, per_token=cfg.moe.per_token_load)
        if tracker is not None:
            tracker.update(out.decision)
    util = utilization_regularizer(tracker.utilization(), cfg.loss.lambda1) if tracker else 0.0
    frob = frobenius_penalty(model.adapters, 1.0) if model.adapters else 0.0
    diff = out.count - batch.counts
    count = (diff * diff).mean()
    ls = cfg.loss
    weights = LossWeights(ls.lambda1, ls.lambda2, ls.lambda3, ls.lambda_load, ls.lambda_frob, ls.lambda_count)
    lb = compose_loss(syn, kl, load, frob, count, util, semantic, weights, ls.semantic_mode)
    acts = activation_count(lb.objective)
    g = backward(lb.objective, [params[n] for n in names])
    grads = {n: g[params[n]] for n in names}
    for n in names:
        params[n].grad = None
    lb.objective = None
    return StepResult(lb, grads, acts, out.decision)


@dataclass
class RunReport:
    config_hash: str
    mode: str
    steps: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    initial_syntax: float | None = None
    final_syntax: float | None = None
    evals: list[dict] = field(default_factory=list)
    utilization: list[float] = field(default_factory=list)
    trainable_params: int = 0
    total_params: int = 0
    peak_activations: int = 0
    optimizer_scalars: int = 0
    convergence_step: int = 0

    @property
    def memory_proxy(self) -> int:
        return self.total_params + self.optimizer_scalars + self.peak_activations

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["memory_proxy"] = self.memory_proxy
        return d


def total_steps(cfg: RunConfig, n_train: int) -> int:
    steps = cfg.train.epochs * math.ceil(n_train / cfg.train.batch_size)
    return min(steps, cfg.train.max_steps) if cfg.train.max_steps else steps


def convergence_step(losses: list[float], window: int = 50, tol: float = 0.10) -> int:
    """First step whose trailing-mean loss is within ``tol`` of the final trailing mean."""
    if not losses:
        return 0
    x = np.asarray(losses)
    w = min(window, len(x))
    smooth = np.convolve(x, np.ones(w) / w, mode="valid")
    target = smooth[-1] * (1.0 + tol)
    return int(np.argmax(smooth <= target)) + w


def _eval_samples(cfg: RunConfig, val: list[Sample]) -> list[Sample]:
    return val[: cfg.data.eval_limit] if cfg.data.eval_limit else val


def train(cfg: RunConfig, train_set: list[Sample], val_set: list[Sample], out_dir=None,
          model: ChartToCode | None = None) -> tuple[ChartToCode, RunReport]:
    """Run the configured schedule. With ``out_dir`` the run log, report,
    checkpoint and utilization heatmap are written there; wall-clock numbers
    go to a separate ``timing.json``.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    t_start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = model or ChartToCode(cfg.model_config(), seed=cfg.seed)
    names = set_trainable(model, cfg.mode)
    params = model.parameters()
    tc = cfg.train
    opt = OptimizerState(tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    n_steps = total_steps(cfg, len(train_set))
    sched = LRSchedule(tc.lr_max, tc.lr_min, tc.t_max or max(n_steps, 1))
    tracker = UtilizationTracker(cfg.moe.experts, tc.util_window) if model.has_moe else None
    rngs = {k: stream(cfg.seed, "train", k) for k in ("dropout", "noise", "route")}
    aug_rng = stream(cfg.seed, "train", "augment")
    report = RunReport(cfg.digest(), cfg.mode, trainable_params=sum(params[n].size for n in names),
                       total_params=model.num_parameters())
    eval_set = _eval_samples(cfg, val_set)
    log_fh = (out / "run_log.jsonl").open("w") if out is not None else None
    timing = {"eval_s": 0.0}

    def emit(record: dict) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    def run_eval(step: int) -> dict:
        t0 = time.perf_counter()
        metrics, _ = evaluate_model(model, eval_set, cfg.eval.tau)
        timing["eval_s"] += time.perf_counter() - t0
        rec = {"kind": "eval", "step": step, **metrics}
        report.evals.append(rec)
        emit(rec)
        return metrics

    syntax_hist: list[float] = []
    best = run_eval(0)
    stale = 0
    semantic = 0.0
    step = 0
    try:
        for epoch in range(tc.epochs):
            if step >= n_steps or report.stopped_early:
                break
            order_rng = stream(cfg.seed, "train", "order", epoch)
            for idx in batches(train_set, tc.batch_size, order_rng):
                if step >= n_steps:
                    break
                samples = [train_set[i] for i in idx]
                rasters = [augment_image(s.raster, aug_rng) if aug_rng.random() < tc.augment_prob
                           else s.raster for s in samples]
                batch = Batch(samples, rasters)
                if cfg.loss.semantic_every and step % cfg.loss.semantic_every == 0:
                    semantic = semantic_penalty(rasters, model.generate(batch.rgb, batch.chart_type),
                                                cfg.eval.tau)
                try:
                    res = loss_step(model, cfg, batch, names, rngs, tracker, semantic)
                except NumericalError as err:
                    emit({"kind": "abort", "step": step, "error": str(err)})
                    raise TrainingAborted(f"step {step}: {err}") from err
                grads = clip_gradients(res.grads, tc.clip)
                lr = cosine_lr(step, sched)
                adamw_step({n: params[n].data for n in names}, grads, opt, lr)
                step += 1
                report.peak_activations = max(report.peak_activations, res.activations)
                syntax_hist.append(res.loss.syntax)
                emit({"kind": "step", "step": step, "epoch": epoch, "lr": lr, "loss": res.loss.as_dict(),
                      "utilization": tracker.utilization().tolist() if tracker else []})
                if tc.eval_every and step % tc.eval_every == 0 and step < n_steps:
                    best, stale = _early_stop_update(run_eval(step), best, stale, report, tc.patience)
                    if report.stopped_early:
                        break
            report.epochs_run = epoch + 1
            if not tc.eval_every and not report.stopped_early:
                best, stale = _early_stop_update(run_eval(step), best, stale, report, tc.patience)
        if tc.eval_every and (not report.evals or report.evals[-1]["step"] != step):
            run_eval(step)
    finally:
        if log_fh is not None:
            log_fh.close()

    report.steps = step
    report.optimizer_scalars = opt.scalar_count()
    if syntax_hist:
        report.initial_syntax = syntax_hist[0]
        report.final_syntax = float(np.mean(syntax_hist[-min(50, len(syntax_hist)):]))
        report.convergence_step = convergence_step(syntax_hist)
    if tracker is not None:
        report.utilization = tracker.utilization().tolist()
    if out is not None:
        save_checkpoint(out / "model.ckpt", model, cfg, step, opt)
        cfg.save(out / "config.json")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        if tracker is not None:
            tracker.write_heatmap_csv(out / "utilization_heatmap.csv")
        timing["total_s"] = time.perf_counter() - t_start
        (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return model, report


def _early_stop_update(metrics: dict, best: dict, stale: int, report: RunReport, patience: int):
    """Improvement = higher success rate, or equal success with higher mean IoU."""
    key = (metrics["success_rate"], metrics["mean_iou"])
    if key > (best["success_rate"], best["mean_iou"]):
        return metrics, 0
    stale += 1
    if stale >= patience:
        report.stopped_early = True
    return best, stale
