"""The chart DSL: vocabulary, parser, emitter.

Grammar::

    program   := "figure" TYPE body "end"
    body      := stmt+                       (TYPE in bar/line/scatter/pie)
               | (KIND stmt+){2,}            (TYPE = complex, KIND in bar/line/scatter)
    stmt      := "series" "(" C<i> V<j> K<k> ")"   (bar, line, pie)
               | "series" "(" V<x> V<y> K<k> ")"   (scatter)

``V<j>`` is a value quantized to one of 64 bins, ``C<i>`` a category slot and
``K<k>`` a palette colour.
"""

from __future__ import annotations

from dataclasses import dataclass

from .spec import MAX_ELEMENTS, N_BINS, N_COLORS, N_SLOTS, ChartSpec, quantize

KEYWORDS = ("figure", "end", "bar", "line", "scatter", "pie", "complex", "series", "(", ")")
SPECIALS = ("<pad>", "<bos>")
VOCAB: tuple[str, ...] = (
    SPECIALS + KEYWORDS
    + tuple(f"V{i}" for i in range(N_BINS))
    + tuple(f"C{i}" for i in range(N_SLOTS))
    + tuple(f"K{i}" for i in range(N_COLORS))
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
PAD = TOKEN_ID["<pad>"]
BOS = TOKEN_ID["<bos>"]
END = TOKEN_ID["end"]
V0 = TOKEN_ID["V0"]
C0 = TOKEN_ID["C0"]
K0 = TOKEN_ID["K0"]

SERIES_KINDS = ("bar", "line", "scatter", "pie")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Statement:
    a: int  # category slot, or x bin for scatter
    value: int
    color: int


@dataclass(frozen=True)
class Block:
    kind: str
    statements: tuple[Statement, ...]


@dataclass(frozen=True)
class Program:
    chart_type: str
    blocks: tuple[Block, ...]

    @property
    def element_count(self) -> int:
        return sum(len(b.statements) for b in self.blocks)


def encode(tokens: list[str]) -> list[int]:
    return [TOKEN_ID[t] for t in tokens]


def decode(ids) -> list[str]:
    return [VOCAB[i] if 0 <= i < VOCAB_SIZE else f"<unk:{i}>" for i in ids]


def _field(tok: str, prefix: str, limit: int) -> int:
    if not tok.startswith(prefix) or not tok[1:].isdigit():
        raise ParseError(f"expected {prefix}<n>, got {tok!r}")
    n = int(tok[1:])
    if n >= limit:
        raise ParseError(f"{tok!r} out of range")
    return n


def parse(ids) -> Program:
    """Parse token ids into a :class:`Program`; raises :class:`ParseError`."""
    toks = decode(list(ids))
    pos = 0

    def peek() -> str | None:
        return toks[pos] if pos < len(toks) else None

    def take(expected: str | None = None) -> str:
        nonlocal pos
        tok = peek()
        if tok is None:
            raise ParseError("unexpected end of program")
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r} at {pos}, got {tok!r}")
        pos += 1
        return tok

    def statements(kind: str) -> tuple[Statement, ...]:
        out = []
        while peek() == "series":
            take("series")
            take("(")
            if kind == "scatter":
                a = _field(take(), "V", N_BINS)
            else:
                a = _field(take(), "C", N_SLOTS)
            v = _field(take(), "V", N_BINS)
            k = _field(take(), "K", N_COLORS)
            take(")")
            out.append(Statement(a, v, k))
        if not out:
            raise ParseError(f"{kind} block has no series")
        return tuple(out)

    take("figure")
    chart_type = take()
    if chart_type in SERIES_KINDS:
        blocks = (Block(chart_type, statements(chart_type)),)
    elif chart_type == "complex":
        blocks = []
        while peek() in ("bar", "line", "scatter"):
            kind = take()
            blocks.append(Block(kind, statements(kind)))
        if len(blocks) < 2:
            raise ParseError("complex figure needs at least two blocks")
        blocks = tuple(blocks)
    else:
        raise ParseError(f"unknown chart type {chart_type!r}")
    take("end")
    if pos != len(toks):
        raise ParseError(f"trailing tokens after end: {toks[pos:]}")
    prog = Program(chart_type, blocks)
    if prog.element_count > MAX_ELEMENTS:
        raise ParseError(f"{prog.element_count} elements exceed the limit of {MAX_ELEMENTS}")
    return prog


def emit(prog: Program) -> list[int]:
    toks = ["figure", prog.chart_type]
    for block in prog.blocks:
        if prog.chart_type == "complex":
            toks.append(block.kind)
        first = "V" if block.kind == "scatter" else "C"
        for s in block.statements:
            toks += ["series", "(", f"{first}{s.a}", f"V{s.value}", f"K{s.color}", ")"]
    toks.append("end")
    return encode(toks)


def spec_to_program(spec: ChartSpec) -> Program:
    """Canonical program for a spec: blocks in sub-series order, statements sorted."""
    blocks = []
    for i, kind in enumerate(spec.series_kinds):
        stmts = []
        for e in spec.elements:
            if e.series != i:
                continue
            if kind == "scatter":
                stmts.append(Statement(quantize(e.x), quantize(e.value), e.color))
            else:
                stmts.append(Statement(e.category, quantize(e.value), e.color))
        blocks.append(Block(kind, tuple(sorted(stmts, key=lambda s: (s.a, s.value, s.color)))))
    return Program(spec.chart_type, tuple(blocks))


def emit_code(spec: ChartSpec) -> list[int]:
    return emit(spec_to_program(spec))
