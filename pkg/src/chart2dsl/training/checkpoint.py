"""Full-model checkpoints: magic, JSON header with a tensor table, raw float64 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..model import ChartToCode
from ..numerics import OptimizerState
from .config import RunConfig

MAGIC = b"C2DCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tables(named: dict[str, np.ndarray], offset: int):
    table, blobs = [], []
    for name in sorted(named):
        raw = np.ascontiguousarray(named[name], dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(named[name])), "dtype": "<f8",
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return table, blobs, offset


def save_checkpoint(path, model: ChartToCode, cfg: RunConfig, step: int = 0,
                    opt: OptimizerState | None = None, extra: dict | None = None) -> None:
    params = {n: p.data for n, p in model.parameters().items()}
    tensors, blobs, offset = _tables(params, 0)
    header = {"format_version": FORMAT_VERSION, "config_hash": cfg.digest(), "config": cfg.flat(),
              "step": step, "tensors": tensors, "extra": extra or {}}
    if opt is not None:
        m1, b1, offset = _tables({f"m/{k}": v for k, v in opt.first_moment.items()}, offset)
        m2, b2, offset = _tables({f"v/{k}": v for k, v in opt.second_moment.items()}, offset)
        header["optimizer"] = {"step_count": opt.step_count, "beta1": opt.beta1, "beta2": opt.beta2,
                               "eps": opt.epsilon, "weight_decay": opt.weight_decay, "tensors": m1 + m2}
        blobs += b1 + b2
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and every stored array (optimizer moments under ``m/`` and ``v/``)."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a model checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    body = memoryview(data)[start + n:]
    arrays = {}
    entries = header["tensors"] + header.get("optimizer", {}).get("tensors", [])
    for e in entries:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, cfg: RunConfig | None = None, strict_config: bool = False):
    """Rebuild the model stored at ``path``; returns (model, config, header).

    The stored config is used unless ``cfg`` is given; with ``strict_config``
    a config hash mismatch is an error.
    """
    header, arrays = read_checkpoint(path)
    stored = RunConfig().with_overrides(header["config"])
    if cfg is not None and strict_config and cfg.digest() != header["config_hash"]:
        raise CheckpointError("checkpoint was written under a different config")
    cfg = cfg or stored
    model = ChartToCode(cfg.model_config(), seed=cfg.seed)
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}...")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
        p.data[...] = arrays[name]
    return model, cfg, header


def restore_optimizer(header: dict, arrays: dict[str, np.ndarray]) -> OptimizerState | None:
    meta = header.get("optimizer")
    if meta is None:
        return None
    st = OptimizerState(beta1=meta["beta1"], beta2=meta["beta2"], epsilon=meta["eps"],
                        weight_decay=meta["weight_decay"])
    st.step_count = meta["step_count"]
    st.first_moment = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    st.second_moment = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    return st
