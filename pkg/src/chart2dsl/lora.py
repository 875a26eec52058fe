"""Low-rank adapters on named weight matrices."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, param
from .numerics import Tensor, linear, matmul

# Module-name suffixes adapted by each preset; expert FFNs are never targets.
TARGET_PRESETS: dict[str, tuple[str, ...]] = {
    "attn": ("attn.q", "attn.k", "attn.v"),
    "out": ("attn.o", "cross.o"),
    "attn+out": ("attn.q", "attn.k", "attn.v", "attn.o", "cross.o"),
    "attn+mlp": ("attn.q", "attn.k", "attn.v", "attn.o", "cross.o", "ffn.fc1", "ffn.fc2"),
}


@dataclass(eq=False)
class LoRAAdapter(Module):
    target: str
    A: Tensor  # (d_in, r)
    B: Tensor  # (r, d_out)
    rank: int
    alpha: float
    merged: bool = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def num_parameters(self) -> int:
        return self.A.size + self.B.size


def make_adapter(target: str, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator) -> LoRAAdapter:
    if not 0 < rank < min(d_in, d_out):
        raise ValueError(f"rank {rank} must satisfy 0 < r < {min(d_in, d_out)} for {target}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    A = param(rng.uniform(-0.01, 0.01, size=(d_in, rank)), "lora_A")
    B = param(np.zeros((rank, d_out)), "lora_B")
    return LoRAAdapter(target, A, B, rank, float(alpha))


def forward_adapted(x: Tensor, W0: Tensor, adapter: LoRAAdapter, bias: Tensor | None = None) -> Tensor:
    """``x @ W0 (+ b) + (alpha / r) * (x @ A) @ B``."""
    if x.shape[-1] != W0.shape[0] or adapter.A.shape[0] != W0.shape[0] or adapter.B.shape[1] != W0.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, W0 {W0.shape}, "
                         f"A {adapter.A.shape}, B {adapter.B.shape}")
    base = linear(x, W0, bias)
    return base + matmul(matmul(x, adapter.A), adapter.B) * adapter.scale


def frobenius_penalty(adapters, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = Tensor(0.0)
    for ad in adapters:
        total = total + (ad.A * ad.A).sum() + (ad.B * ad.B).sum()
    return total * lam


def merged_weight(W0: np.ndarray, adapter: LoRAAdapter) -> np.ndarray:
    return W0 + adapter.scale * (adapter.A.data @ adapter.B.data)


def merge(layer: Linear) -> None:
    """Fold the layer's adapter into its weight; a second merge is an error."""
    ad = layer.adapter
    if ad is None:
        raise ValueError("layer has no adapter")
    if ad.merged:
        raise RuntimeError(f"adapter on {ad.target} is already merged")
    layer.weight.data = merged_weight(layer.weight.data, ad)
    ad.merged = True


def matching_layers(model: Module, preset: str) -> list[tuple[str, Linear]]:
    try:
        suffixes = TARGET_PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown target preset {preset!r}; choose from {sorted(TARGET_PRESETS)}") from None
    return [(name, m) for name, m in model.modules()
            if isinstance(m, Linear) and ".experts." not in name and name.endswith(suffixes)]


def attach(model: Module, preset: str, rank: int, alpha: float, rng: np.random.Generator) -> list[LoRAAdapter]:
    adapters = []
    for name, layer in matching_layers(model, preset):
        layer.adapter = make_adapter(name, layer.d_in, layer.d_out, rank, alpha, rng)
        adapters.append(layer.adapter)
    return adapters


def adapters_of(model: Module) -> list[LoRAAdapter]:
    return [m.adapter for _, m in model.modules() if isinstance(m, Linear) and m.adapter is not None]


# -- adapter-only checkpoints ------------------------------------------------------
MAGIC = b"C2DLORA\n"


def save_adapters(adapters, path) -> None:
    header, blobs, offset = [], [], 0
    for ad in adapters:
        entry = {"target": ad.target, "rank": ad.rank, "alpha": ad.alpha, "tensors": {}}
        for key, t in (("A", ad.A), ("B", ad.B)):
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entry["tensors"][key] = {"shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
            blobs.append(raw)
            offset += len(raw)
        header.append(entry)
    head = json.dumps({"format_version": 1, "adapters": header}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def load_adapters(path) -> dict[str, dict]:
    """Read an adapter file into ``{target: {"A", "B", "rank", "alpha"}}``."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not an adapter checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    head = json.loads(data[start:start + n])
    body = io.BytesIO(data[start + n:]).getbuffer()
    out = {}
    for entry in head["adapters"]:
        arrays = {}
        for key, meta in entry["tensors"].items():
            raw = body[meta["offset"]:meta["offset"] + meta["nbytes"]]
            arrays[key] = np.frombuffer(raw, dtype="<f8").reshape(meta["shape"]).copy()
        out[entry["target"]] = {**arrays, "rank": entry["rank"], "alpha": entry["alpha"]}
    return out
