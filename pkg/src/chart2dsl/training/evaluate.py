"""Held-out evaluation: success rate, IoU, parse rate and per-type breakdown."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from ..chartlab import CHART_TYPES, TYPE_INDEX, ExecutionFailure, execute, iou
from ..model import ChartToCode
from .data import Sample

METRIC_FIELDS = (
    ("n", int), ("tau", float), ("success_rate", float), ("mean_iou", float), ("parse_rate", float),
    *((f"success_{t}", float) for t in CHART_TYPES),
    *((f"n_{t}", int) for t in CHART_TYPES),
    ("trainable_fraction", float),
)


def trainable_fraction(model: ChartToCode) -> float:
    params = model.parameters().values()
    total = sum(p.size for p in params)
    return sum(p.size for p in params if p.requires_grad) / total


def generate_programs(model: ChartToCode, samples: list[Sample], batch_size: int = 50,
                      bypass_moe: bool = False) -> list[list[int]]:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        rgb = np.stack([s.raster.rgb for s in chunk])
        types = np.array([TYPE_INDEX[s.spec.chart_type] for s in chunk])
        out += model.generate(rgb, types, bypass_moe=bypass_moe)
    return out


def score_programs(samples: list[Sample], programs: list[list[int]], tau: float = 0.85) -> dict:
    """Metrics for given programs against the samples' rasters (no model involved)."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if len(samples) != len(programs):
        raise ValueError("one program per sample is required")
    if not 0.75 <= tau <= 0.90:
        raise ValueError(f"tau={tau} outside [0.75, 0.90]")
    ious, parsed = [], []
    for s, ids in zip(samples, programs):
        out = execute(ids, s.raster.width)
        ok = not isinstance(out, ExecutionFailure)
        parsed.append(ok)
        ious.append(iou(s.raster, out) if ok else 0.0)
    ious = np.array(ious)
    passed = (ious >= tau) & np.array(parsed)
    types = np.array([s.spec.chart_type for s in samples])
    rec = {"n": len(samples), "tau": float(tau), "success_rate": float(passed.mean()),
           "mean_iou": float(ious.mean()), "parse_rate": float(np.mean(parsed))}
    for t in CHART_TYPES:
        sel = types == t
        rec[f"success_{t}"] = float(passed[sel].mean()) if sel.any() else 0.0
        rec[f"n_{t}"] = int(sel.sum())
    rec["trainable_fraction"] = 0.0
    return rec


def evaluate_model(model: ChartToCode, samples: list[Sample], tau: float = 0.85,
                   batch_size: int = 50) -> tuple[dict, list[list[int]]]:
    programs = generate_programs(model, samples, batch_size)
    rec = score_programs(samples, programs, tau)
    rec["trainable_fraction"] = trainable_fraction(model)
    validate_metrics(rec)
    return rec, programs


def measure_timing(model: ChartToCode, samples: list[Sample], batch_size: int = 1) -> dict:
    """Wall-clock generation latency per chart, with routing and with routing bypassed.

    Timings vary run to run, so they are kept apart from the deterministic metrics.
    """
    def run(bypass: bool) -> float:
        t0 = time.perf_counter()
        generate_programs(model, samples, batch_size, bypass_moe=bypass)
        return (time.perf_counter() - t0) / len(samples)

    routed = run(False)
    bypassed = run(True) if model.has_moe else routed
    return {"latency_s_per_chart": routed, "latency_s_bypassed": bypassed,
            "route_overhead_s": routed - bypassed, "n": len(samples)}


def validate_metrics(rec: dict) -> None:
    """Schema check: exact key set, types, and ranges."""
    expected = {k for k, _ in METRIC_FIELDS}
    if set(rec) != expected:
        raise ValueError(f"metric keys differ: missing {expected - set(rec)}, extra {set(rec) - expected}")
    for key, kind in METRIC_FIELDS:
        v = rec[key]
        if kind is int and (not isinstance(v, int) or v < 0):
            raise ValueError(f"{key} must be a non-negative integer")
        if kind is float:
            if not isinstance(v, float) or not np.isfinite(v):
                raise ValueError(f"{key} must be a finite float")
            if key != "tau" and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")
    if sum(rec[f"n_{t}"] for t in CHART_TYPES) != rec["n"]:
        raise ValueError("per-type counts do not add up")


def write_metrics_csv(path, rows: list[dict], extra_columns=("split", "checkpoint")) -> None:
    header = [*extra_columns, *(k for k, _ in METRIC_FIELDS)]
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
