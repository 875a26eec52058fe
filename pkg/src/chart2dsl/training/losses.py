"""Multi-task objective: syntax CE plus routing, utilization, adapter and count terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..chartlab import ExecutionFailure, execute, iou
from ..numerics import NumericalError, Tensor, as_tensor


def utilization_regularizer(u, lam1: float = 0.5) -> float:
    """lam1 * sum_i (u_i - 1/N)^2 on the windowed routing shares.

    u is a routing statistic, not a function of current parameters, so the
    value is a plain float and carries no gradient.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("utilization must be a non-empty vector")
    total = u.sum()
    if total != 0.0 and abs(total - 1.0) > 1e-9:
        raise ValueError(f"utilization must sum to 1 (or be all zero), got {total}")
    return float(lam1 * np.sum((u - 1.0 / u.size) ** 2))


def semantic_penalty(targets, generations, tau: float = 0.85) -> float:
    """Mean hinge max(0, tau - IoU) over rendered generations; failures count as IoU 0."""
    if not 0.75 <= tau <= 0.90:
        raise ValueError(f"tau={tau} outside [0.75, 0.90]")
    targets, generations = list(targets), list(generations)
    if len(targets) != len(generations) or not targets:
        raise ValueError("need equally many targets and generations, at least one")
    hinge = []
    for target, ids in zip(targets, generations):
        out = execute(ids, target.width)
        score = 0.0 if isinstance(out, ExecutionFailure) else iou(target, out)
        hinge.append(max(0.0, tau - score))
    return float(np.mean(hinge))


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.7
    lambda3: float = 0.3
    lambda_load: float = 50.0
    lambda_frob: float = 1e-4
    lambda_count: float = 0.01


@dataclass
class LossBreakdown:
    syntax: float
    semantic: float
    router_kl: float
    load: float
    util: float
    frobenius: float
    count: float
    total: float
    weights: LossWeights
    objective: Tensor | None = None   # differentiable part of total

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("total", "syntax", "semantic", "router_kl", "load", "util", "frobenius", "count")}


def compose_loss(syntax, router_kl=0.0, load=0.0, frobenius=0.0, count=0.0, util: float = 0.0,
                 semantic: float = 0.0, weights: LossWeights | None = None,
                 semantic_mode: str = "log_only") -> LossBreakdown:
    """Weighted sum of the loss parts.

    total = syntax + semantic + l2*router_kl + l3*util + l_load*load + l_frob*frob + l_count*count.
    ``semantic`` is the hinge penalty s. In log_only mode the semantic part
    is s itself, a constant. In scaled_ce mode it is s * syntax, so the
    syntax term is effectively scaled by (1 + s). ``util`` is always a constant.
    """
    w = weights or LossWeights()
    if semantic_mode not in ("log_only", "scaled_ce"):
        raise ValueError(f"unknown semantic mode {semantic_mode!r}")
    parts = {"syntax": as_tensor(syntax), "router_kl": as_tensor(router_kl), "load": as_tensor(load),
             "frobenius": as_tensor(frobenius), "count": as_tensor(count)}
    values = {k: t.item() for k, t in parts.items()}
    values.update(util=float(util), semantic=float(semantic))
    if semantic_mode == "scaled_ce":
        values["semantic"] *= values["syntax"]
    for k, v in values.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite loss component {k!r}: {v}")

    objective = (parts["syntax"] + w.lambda2 * parts["router_kl"] + w.lambda_load * parts["load"]
                 + w.lambda_frob * parts["frobenius"] + w.lambda_count * parts["count"])
    if semantic_mode == "scaled_ce":
        objective = objective + float(semantic) * parts["syntax"]
    total = (values["syntax"] + values["semantic"] + w.lambda2 * values["router_kl"]
             + w.lambda3 * values["util"] + w.lambda_load * values["load"]
             + w.lambda_frob * values["frobenius"] + w.lambda_count * values["count"])
    return LossBreakdown(total=total, weights=w, objective=objective, **values)
