"""Ground-truth chart descriptions and their sampler."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

CHART_TYPES = ("bar", "line", "scatter", "pie", "complex")
TYPE_INDEX = {t: i for i, t in enumerate(CHART_TYPES)}

# Share of training samples per chart type; the raw column sums to 1.003.
_RAW_MIX = np.array([0.313, 0.268, 0.179, 0.134, 0.089])
DEFAULT_TYPE_MIX = tuple(float(x) for x in _RAW_MIX / _RAW_MIX.sum())

N_SLOTS = 8
N_COLORS = 8
N_BINS = 64
MAX_ELEMENTS = 16

# Inclusive element-count range per series kind.
COUNT_RANGE = {
    "bar": (1, 8),
    "line": (2, 8),
    "scatter": (1, 10),
    "pie": (2, 6),
}
# Complex charts overlay a bar series with a line or scatter series.
COMPLEX_RANGE = {"bar": (1, 6), "line": (2, 6), "scatter": (1, 6)}


@dataclass(frozen=True)
class Element:
    value: float
    category: int = 0
    color: int = 0
    series: int = 0
    x: float | None = None  # horizontal position, scatter points only


@dataclass(frozen=True)
class ChartSpec:
    chart_type: str
    series_kinds: tuple[str, ...]
    elements: tuple[Element, ...]
    width: int = 64
    height: int = 64
    seed: int = 0

    def __post_init__(self):
        validate_spec(self)

    @property
    def element_count(self) -> int:
        return len(self.elements)

    def content_key(self) -> tuple:
        """Everything that affects the rendered chart; excludes the seed."""
        return (self.chart_type, self.series_kinds, self.elements, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "chart_type": self.chart_type,
            "series_kinds": list(self.series_kinds),
            "elements": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.elements],
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ChartSpec:
        return cls(
            chart_type=d["chart_type"],
            series_kinds=tuple(d["series_kinds"]),
            elements=tuple(Element(**e) for e in d["elements"]),
            width=d["width"],
            height=d["height"],
            seed=d.get("seed", 0),
        )


def validate_spec(spec: ChartSpec) -> None:
    if spec.chart_type not in TYPE_INDEX:
        raise ValueError(f"unknown chart type {spec.chart_type!r}")
    n = len(spec.elements)
    if not 1 <= n <= MAX_ELEMENTS:
        raise ValueError(f"element count {n} outside [1, {MAX_ELEMENTS}]")
    if spec.chart_type == "complex":
        if len(spec.series_kinds) < 2:
            raise ValueError("complex charts need at least two sub-series")
    elif spec.series_kinds != (spec.chart_type,):
        raise ValueError(f"series kinds {spec.series_kinds} do not match {spec.chart_type}")
    for e in spec.elements:
        vals = [e.value] if e.x is None else [e.value, e.x]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("element values must be finite")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"element values must lie in [0, 1], got {vals}")
        if not 0 <= e.series < len(spec.series_kinds):
            raise ValueError(f"element refers to missing sub-series {e.series}")
        if spec.series_kinds[e.series] == "pie" and e.value <= 0.0:
            raise ValueError("pie values must be strictly positive")
    if spec.width % 16 or spec.height % 16 or spec.width != spec.height:
        raise ValueError("raster must be square with a side divisible by 16")


def quantize(v: float) -> int:
    return min(N_BINS - 1, int(np.floor(v * N_BINS)))


def _sample_series(rng: np.random.Generator, kind: str, lo: int, hi: int, series: int) -> list[Element]:
    n = int(rng.integers(lo, hi + 1))
    if kind == "scatter":
        color = int(rng.integers(N_COLORS))
        return [Element(value=float(rng.random()), x=float(rng.random()), color=color, series=series)
                for _ in range(n)]
    if kind == "pie":
        colors = rng.permutation(N_COLORS)[:n]
        return [Element(value=float(1.0 - rng.random()), category=i, color=int(colors[i]), series=series)
                for i in range(n)]
    slots = np.sort(rng.choice(N_SLOTS, size=n, replace=False))
    if kind == "line":
        color = int(rng.integers(N_COLORS))
        return [Element(value=float(rng.random()), category=int(s), color=color, series=series)
                for s in slots]
    return [Element(value=float(rng.random()), category=int(s), color=int(rng.integers(N_COLORS)),
                    series=series) for s in slots]


def sample_spec(rng: np.random.Generator, type_mix=DEFAULT_TYPE_MIX, side: int = 64,
                seed: int = 0) -> ChartSpec:
    mix = np.asarray(type_mix, dtype=float)
    if mix.shape != (len(CHART_TYPES),) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"type_mix must be a distribution over {CHART_TYPES}")
    chart_type = CHART_TYPES[int(rng.choice(len(CHART_TYPES), p=mix))]
    if chart_type == "complex":
        second = "line" if rng.random() < 0.5 else "scatter"
        kinds = ("bar", second)
        elements = []
        for i, kind in enumerate(kinds):
            lo, hi = COMPLEX_RANGE[kind]
            elements += _sample_series(rng, kind, lo, hi, i)
    else:
        kinds = (chart_type,)
        lo, hi = COUNT_RANGE[chart_type]
        elements = _sample_series(rng, chart_type, lo, hi, 0)
    return ChartSpec(chart_type, kinds, tuple(elements), side, side, seed)
