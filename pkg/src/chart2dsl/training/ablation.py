"""Grid runner over MoE and LoRA settings: one train + evaluate per cell."""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..moe import utilization_balance
from .config import RunConfig
from .data import Sample
from .evaluate import evaluate_model
from .trainer import train

MOE_AXES = {"moe.experts": (4, 8, 12), "moe.capacity": (16, 32, 64), "moe.routing": ("topk", "prob")}
LORA_AXES = {"lora.rank": (4, 8, 16), "lora.alpha": (16.0, 32.0, 64.0), "lora.targets": ("attn", "out", "attn+out")}
ALLOWED = {**MOE_AXES, **LORA_AXES}

COLUMNS = ("grid", "cell", "experts", "capacity", "routing", "rank", "alpha", "targets", "accuracy",
           "mean_iou", "memory_proxy", "train_steps", "convergence_step", "overhead", "util_balance",
           "trainable_params", "total_params", "status", "error")


@dataclass(frozen=True)
class Cell:
    grid: str
    index: int
    overrides: tuple[tuple[str, object], ...]


def expand(axes: dict[str, tuple], grid: str) -> list[Cell]:
    for key, values in axes.items():
        if key not in ALLOWED or any(v not in ALLOWED[key] for v in values):
            raise ValueError(f"grid axis {key}={values} outside the supported ablation values")
    keys = list(axes)
    return [Cell(grid, i, tuple(zip(keys, combo)))
            for i, combo in enumerate(itertools.product(*(axes[k] for k in keys)))]


def default_cells() -> list[Cell]:
    return expand(MOE_AXES, "moe") + expand(LORA_AXES, "lora")


def routing_overhead(cfg: RunConfig) -> float:
    """Multiply-adds spent in gating and experts per visual token, relative to
    the rest of a forward pass over one chart and a mean-length program.

    A deterministic stand-in for the measured generation-time overhead,
    which lives in the timing sidecar.
    """
    m = cfg.model
    d, tokens = m.d, (m.side // m.patch) ** 2
    n_out = 34
    attn = 4 * d * d
    ffn = 8 * d * d
    enc = tokens * (m.patch * m.patch * 3 * d + m.enc_layers * (attn + ffn)) + m.enc_layers * tokens * tokens * d * 2
    dec = n_out * m.dec_layers * (attn + d * d + ffn + 2 * d) + n_out * 92 * d
    if not cfg.moe.enabled:
        return 0.0
    route = tokens * (d * cfg.moe.experts + cfg.moe.top_k * ffn)
    return route / (enc + dec)


def run_cell(cell: Cell, base: RunConfig, train_set: list[Sample], val_set: list[Sample]) -> tuple[dict, dict]:
    over = dict(cell.overrides)
    row = {"grid": cell.grid, "cell": cell.index, "status": "ok", "error": ""}
    timing = {"grid": cell.grid, "cell": cell.index}
    try:
        cfg = base.with_overrides(over)
        row.update(experts=cfg.moe.experts, capacity=cfg.moe.capacity, routing=cfg.moe.routing,
                   rank=cfg.lora.rank, alpha=cfg.lora.alpha, targets=cfg.lora.targets)
        t0 = time.perf_counter()
        model, report = train(cfg, train_set, val_set)
        timing["train_s"] = time.perf_counter() - t0
        metrics, _ = evaluate_model(model, val_set, cfg.eval.tau)
        row.update(accuracy=metrics["success_rate"], mean_iou=metrics["mean_iou"],
                   memory_proxy=report.memory_proxy, train_steps=report.steps,
                   convergence_step=report.convergence_step, overhead=routing_overhead(cfg),
                   util_balance=utilization_balance(report.utilization) if report.utilization else 0.0,
                   trainable_params=report.trainable_params, total_params=report.total_params)
    except Exception as err:  # noqa: BLE001 - a failed cell is recorded and the grid continues
        row.update(status="failed", error=f"{type(err).__name__}: {err}")
    return row, timing


def _run_cell_args(args):
    return run_cell(*args)


def run_ablation(base: RunConfig, train_set: list[Sample], val_set: list[Sample],
                 cells: list[Cell] | None = None, out_dir=None, jobs: int = 1) -> list[dict]:
    """Rows in cell order. With ``out_dir``, writes ablation.csv and
    ablation_timing.json (wall-clock, not reproducible)."""
    cells = default_cells() if cells is None else cells
    work = [(c, base, train_set, val_set) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, work))
    else:
        results = [run_cell(*w) for w in work]
    rows = [r for r, _ in results]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(out / "ablation.csv", rows)
        (out / "ablation_timing.json").write_text(json.dumps([t for _, t in results], indent=1) + "\n")
    return rows


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, COLUMNS, lineterminator="\n", restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
