"""Synthetic dataset files: stratified splits stored as JSON-lines records."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..chartlab import CHART_TYPES, TYPE_INDEX, ChartSpec, Raster, emit_code, rasterize, sample_spec
from ..chartlab.dsl import PAD
from ..numerics import stream

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Sample:
    spec: ChartSpec
    tokens: list[int]
    raster: Raster
    id: int = -1

    def to_record(self) -> dict:
        return {"id": self.id, "spec": self.spec.to_dict(), "tokens": self.tokens,
                "png": base64.b64encode(self.raster.to_png()).decode("ascii")}

    @classmethod
    def from_record(cls, rec: dict) -> Sample:
        return cls(ChartSpec.from_dict(rec["spec"]), list(rec["tokens"]),
                   Raster.from_png(base64.b64decode(rec["png"])), int(rec["id"]))


def make_sample(spec: ChartSpec, index: int = -1) -> Sample:
    return Sample(spec, emit_code(spec), rasterize(spec), index)


def sample_specs(count: int, seed: int, type_mix, side: int = 64) -> list[ChartSpec]:
    """``count`` specs with distinct rendered content."""
    rng = stream(seed, "data", "specs")
    seen, specs = set(), []
    while len(specs) < count:
        spec = sample_spec(rng, type_mix, side, seed=len(specs))
        key = spec.content_key()
        if key not in seen:
            seen.add(key)
            specs.append(spec)
    return specs


def split_sizes(count: int, fractions=SPLIT_FRACTIONS) -> list[int]:
    """Largest-remainder split of ``count``; 100 -> [70, 15, 15]."""
    raw = np.asarray(fractions) * count
    sizes = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - sizes), kind="stable")[: count - sizes.sum()]:
        sizes[j] += 1
    return sizes.tolist()


def stratified_allocation(type_counts, fractions=SPLIT_FRACTIONS) -> np.ndarray:
    """(types, splits) integer table with row sums = type counts and column sums
    = split_sizes(total), each cell within one sample of its exact share."""
    type_counts = np.asarray(type_counts, dtype=int)
    frac = np.asarray(fractions, dtype=float)
    exact = type_counts[:, None] * frac[None, :]
    table = np.floor(exact).astype(int)
    col_need = np.array(split_sizes(int(type_counts.sum()), fractions)) - table.sum(axis=0)
    row_need = type_counts - table.sum(axis=1)
    # Hand out the leftover units, rows with the most left first, each to the
    # columns still needing the most (ties: larger fractional part).
    for t in sorted(range(len(type_counts)), key=lambda i: (-row_need[i], i)):
        order = sorted(range(len(frac)), key=lambda j: (-col_need[j], -(exact[t, j] - table[t, j]), j))
        for j in order[: row_need[t]]:
            table[t, j] += 1
            col_need[j] -= 1
        row_need[t] = 0
    if (col_need != 0).any():
        raise RuntimeError("stratified allocation failed")
    return table


def stratified_split(specs: list[ChartSpec]) -> dict[str, list[int]]:
    by_type = {t: [i for i, s in enumerate(specs) if s.chart_type == t] for t in CHART_TYPES}
    table = stratified_allocation([len(by_type[t]) for t in CHART_TYPES])
    out = {s: [] for s in SPLITS}
    for ti, t in enumerate(CHART_TYPES):
        start = 0
        for j, split in enumerate(SPLITS):
            out[split] += by_type[t][start:start + table[ti, j]]
            start += table[ti, j]
    return {k: sorted(v) for k, v in out.items()}


def write_dataset(out_dir, count: int, seed: int = 0, type_mix=None, side: int = 64) -> dict:
    """Write train/val/test JSONL files plus manifest.json; returns the manifest."""
    from ..chartlab import DEFAULT_TYPE_MIX
    if count < 10:
        raise ValueError("count must be at least 10")
    mix = DEFAULT_TYPE_MIX if type_mix is None else tuple(type_mix)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = sample_specs(count, seed, mix, side)
    splits = stratified_split(specs)
    manifest = {"seed": seed, "count": count, "side": side, "type_mix": list(mix), "splits": {}}
    for split in SPLITS:
        lines = [json.dumps(make_sample(specs[i], i).to_record(), sort_keys=True) for i in splits[split]]
        body = ("\n".join(lines) + "\n").encode()
        (out / f"{split}.jsonl").write_bytes(body)
        per_type = {t: sum(specs[i].chart_type == t for i in splits[split]) for t in CHART_TYPES}
        manifest["splits"][split] = {"file": f"{split}.jsonl", "size": len(lines), "per_type": per_type,
                                     "sha256": hashlib.sha256(body).hexdigest()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_split(data_dir, split: str) -> list[Sample]:
    path = Path(data_dir) / f"{split}.jsonl"
    if split not in SPLITS or not path.exists():
        raise FileNotFoundError(f"no {split!r} split under {data_dir}")
    with path.open() as fh:
        return [Sample.from_record(json.loads(line)) for line in fh if line.strip()]


class Batch:
    """Stacked arrays for a list of samples; targets padded with PAD."""

    def __init__(self, samples: list[Sample], rasters: list[Raster] | None = None):
        rasters = rasters or [s.raster for s in samples]
        self.samples = samples
        self.rgb = np.stack([r.rgb for r in rasters])
        self.chart_type = np.array([TYPE_INDEX[s.spec.chart_type] for s in samples])
        self.counts = np.array([s.spec.element_count for s in samples], dtype=float)
        n = max(len(s.tokens) for s in samples)
        self.target = np.full((len(samples), n), PAD, dtype=np.intp)
        for i, s in enumerate(samples):
            self.target[i, :len(s.tokens)] = s.tokens

    def __len__(self) -> int:
        return len(self.samples)


def batches(samples: list[Sample], size: int, rng: np.random.Generator | None = None):
    """Index chunks over a (optionally shuffled) permutation; the last one may be short."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for i in range(0, len(order), size):
        yield [int(j) for j in order[i:i + size]]
