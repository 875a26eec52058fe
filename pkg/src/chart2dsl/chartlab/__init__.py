from .dsl import (BOS, END, PAD, VOCAB, VOCAB_SIZE, ParseError, Program, decode, emit, emit_code, encode,
                  parse, spec_to_program)
from .raster import (Raster, ExecutionFailure, augment_image, draw_augmentation, execute, iou, pair_iou, rasterize, render,
                     success_rate)
from .spec import CHART_TYPES, DEFAULT_TYPE_MIX, TYPE_INDEX, ChartSpec, Element, sample_spec

__all__ = [
    "BOS", "CHART_TYPES", "ChartSpec", "DEFAULT_TYPE_MIX", "END", "Element", "ExecutionFailure", "PAD",
    "ParseError", "Program", "Raster", "TYPE_INDEX", "VOCAB", "VOCAB_SIZE", "augment_image", "decode", "draw_augmentation",
    "emit", "emit_code", "encode", "execute", "iou", "pair_iou", "parse", "rasterize", "render",
    "sample_spec", "spec_to_program", "success_rate",
]
