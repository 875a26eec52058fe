"""Deterministic rasterizer, IoU, success rate and image augmentation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .dsl import ParseError, Program, parse, spec_to_program
from .spec import N_BINS, N_SLOTS, ChartSpec

BACKGROUND = (255, 255, 255)
AXIS_COLOR = (0, 0, 0)
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (23, 190, 207),
], dtype=np.uint8)


@dataclass(eq=False)
class Raster:
    mask: np.ndarray  # (H, W) bool, True where ink was drawn
    rgb: np.ndarray   # (H, W, 3) uint8

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Raster) and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.rgb, other.rgb))

    @classmethod
    def blank(cls, width: int, height: int) -> Raster:
        rgb = np.empty((height, width, 3), dtype=np.uint8)
        rgb[:] = BACKGROUND
        return cls(np.zeros((height, width), dtype=bool), rgb)

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.rgb, "RGB").save(buf, format="PNG", optimize=False, compress_level=9)
        return buf.getvalue()

    @classmethod
    def from_png(cls, data: bytes) -> Raster:
        """Decode a PNG; ink is any pixel that is not pure background."""
        rgb = np.array(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.uint8)
        return cls((rgb != np.array(BACKGROUND, dtype=np.uint8)).any(axis=-1), rgb)


@dataclass(frozen=True)
class ExecutionFailure:
    reason: str

    def __bool__(self) -> bool:
        return False


# -- geometry ------------------------------------------------------------------
class _Canvas:
    def __init__(self, side: int):
        self.side = side
        self.margin = side // 16
        self.plot = side - 2 * self.margin
        self.slot = self.plot // N_SLOTS
        self.raster = Raster.blank(side, side)

    def fill(self, rows: slice | np.ndarray, cols: slice | np.ndarray, color) -> None:
        self.raster.mask[rows, cols] = True
        self.raster.rgb[rows, cols] = color

    def bar_height(self, q: int) -> int:
        return int(round((q + 1) * self.plot / N_BINS))

    def axes(self) -> None:
        m, s = self.margin, self.side
        self.fill(slice(m - 1, s - m + 1), slice(m - 1, m), AXIS_COLOR)
        self.fill(slice(s - m, s - m + 1), slice(m - 1, s - m + 1), AXIS_COLOR)

    def bars(self, stmts) -> None:
        base = self.side - self.margin
        for st in stmts:
            x0 = self.margin + self.slot * st.a
            h = self.bar_height(st.value)
            self.fill(slice(base - h, base), slice(x0, x0 + self.slot - 1), PALETTE[st.color])

    def line(self, stmts) -> None:
        base = self.side - self.margin
        pts = sorted((self.margin + self.slot * st.a + self.slot // 2,
                      base - self.bar_height(st.value), st.color) for st in stmts)
        color = PALETTE[pts[0][2]]
        if len(pts) == 1:
            x, y, _ = pts[0]
            self.fill(slice(y, y + 2), slice(x, x + 2), color)
            return
        for (xa, ya, _), (xb, yb, _) in zip(pts, pts[1:]):
            n = max(abs(xb - xa), abs(yb - ya)) + 1
            xs = np.rint(np.linspace(xa, xb, n)).astype(int)
            ys = np.rint(np.linspace(ya, yb, n)).astype(int)
            for dy in (0, 1):
                yy = np.clip(ys + dy, 0, self.side - 1)
                self.raster.mask[yy, xs] = True
                self.raster.rgb[yy, xs] = color

    def scatter(self, stmts, marker: int = 4) -> None:
        span = self.plot - marker
        for st in stmts:
            x = self.margin + int(round(st.a * span / (N_BINS - 1)))
            y = self.margin + int(round((N_BINS - 1 - st.value) * span / (N_BINS - 1)))
            self.fill(slice(y, y + marker), slice(x, x + marker), PALETTE[st.color])

    def pie(self, stmts) -> None:
        c = (self.side - 1) / 2.0
        radius = self.side / 2.0 - self.margin - 2
        yy, xx = np.mgrid[0:self.side, 0:self.side]
        dx, dy = xx - c, yy - c
        inside = dx * dx + dy * dy <= radius * radius
        # Clockwise from 12 o'clock.
        theta = np.mod(np.arctan2(dx, -dy), 2 * np.pi)
        weights = np.array([st.value + 1 for st in stmts], dtype=float)
        bounds = 2 * np.pi * np.cumsum(weights) / weights.sum()
        idx = np.minimum(np.searchsorted(bounds, theta, side="right"), len(stmts) - 1)
        colors = PALETTE[[st.color for st in stmts]]
        self.raster.mask[inside] = True
        self.raster.rgb[inside] = colors[idx[inside]]
        if len(stmts) > 1:
            # One-pixel background gaps along each slice boundary ray.
            sep = np.zeros_like(inside)
            for b in np.concatenate([[0.0], bounds[:-1]]):
                ux, uy = math.sin(b), -math.cos(b)
                along = dx * ux + dy * uy
                perp = np.abs(dx * uy - dy * ux)
                sep |= (along > 0) & (perp < 0.5)
            sep &= inside
            self.raster.mask[sep] = False
            self.raster.rgb[sep] = BACKGROUND


def render(prog: Program, side: int = 64) -> Raster:
    canvas = _Canvas(side)
    if prog.chart_type != "pie":
        canvas.axes()
    for block in prog.blocks:
        getattr(canvas, {"bar": "bars"}.get(block.kind, block.kind))(block.statements)
    return canvas.raster


def rasterize(spec: ChartSpec) -> Raster:
    return render(spec_to_program(spec), spec.width)


def execute(ids, side: int = 64) -> Raster | ExecutionFailure:
    """Parse and render a token sequence; never raises on bad programs."""
    try:
        prog = parse(ids)
    except ParseError as exc:
        return ExecutionFailure(str(exc))
    except Exception as exc:  # noqa: BLE001 - execute must be total
        return ExecutionFailure(f"{type(exc).__name__}: {exc}")
    return render(prog, side)


# -- metrics -------------------------------------------------------------------
def iou(a: Raster, b: Raster) -> float:
    if a.mask.shape != b.mask.shape:
        raise ValueError(f"raster shapes differ: {a.mask.shape} vs {b.mask.shape}")
    union = np.count_nonzero(a.mask | b.mask)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.mask & b.mask) / union


def pair_iou(target: Raster, ids) -> float:
    """IoU of the rendered program against ``target``; 0 on execution failure."""
    out = execute(ids, target.width)
    if isinstance(out, ExecutionFailure):
        return 0.0
    return iou(target, out)


def success_rate(pairs, tau: float = 0.85) -> float:
    if not pairs:
        raise ValueError("success_rate needs at least one pair")
    if not 0.75 <= tau <= 0.90:
        raise ValueError(f"tau must lie in [0.75, 0.90], got {tau}")
    return sum(pair_iou(r, ids) >= tau for r, ids in pairs) / len(pairs)


# -- augmentation ----------------------------------------------------------------
def draw_augmentation(rng: np.random.Generator, max_angle: float = 15.0, jitter: float = 0.10):
    """(angle in degrees, per-channel colour factors) for one augmentation."""
    angle = float(rng.uniform(-max_angle, max_angle))
    return angle, rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)


def augment_image(r: Raster, rng: np.random.Generator | None = None, max_angle: float = 15.0,
                  jitter: float = 0.10, *, angle: float | None = None,
                  factors=None) -> Raster:
    """Random rotation about the centre plus per-channel colour scaling.

    ``angle`` (degrees) and ``factors`` (3 channel multipliers) override the
    random draws.
    """
    if angle is None or factors is None:
        drawn_angle, drawn_factors = draw_augmentation(rng, max_angle, jitter)
        angle = drawn_angle if angle is None else angle
        factors = drawn_factors if factors is None else factors
    factors = np.asarray(factors, dtype=float)
    mask, rgb = r.mask, r.rgb
    if angle != 0.0:
        h, w = mask.shape
        c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        t = math.radians(angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        src = rot @ np.stack([yy.ravel() - c[0], xx.ravel() - c[1]]) + c[:, None]
        mask = ndimage.map_coordinates(mask.astype(float), src, order=0, cval=0.0).reshape(h, w) > 0.5
        chans = [ndimage.map_coordinates(rgb[..., k].astype(float), src, order=1, cval=BACKGROUND[k])
                 for k in range(3)]
        rgb = np.clip(np.rint(np.stack(chans, axis=-1).reshape(h, w, 3)), 0, 255)
    scaled = np.clip(np.rint(rgb.astype(float) * factors), 0, 255).astype(np.uint8)
    return Raster(mask.copy(), scaled)
