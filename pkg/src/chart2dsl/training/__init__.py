from .ablation import Cell, default_cells, expand, run_ablation, write_ablation_csv
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import MODES, PRESETS, RunConfig, toy_config
from .data import Batch, Sample, batches, make_sample, read_split, stratified_split, write_dataset
from .evaluate import (evaluate_model, generate_programs, measure_timing, score_programs,
                       trainable_fraction, validate_metrics, write_metrics_csv)
from .losses import LossBreakdown, LossWeights, compose_loss, semantic_penalty, utilization_regularizer
from .trainer import RunReport, TrainingAborted, loss_step, set_trainable, train

__all__ = [
    "Batch", "Cell", "CheckpointError", "LossBreakdown", "LossWeights", "MODES", "PRESETS", "RunConfig",
    "RunReport", "Sample", "TrainingAborted", "batches", "compose_loss", "default_cells",
    "evaluate_model", "expand", "generate_programs", "load_checkpoint", "loss_step", "make_sample",
    "measure_timing", "read_checkpoint", "read_split", "run_ablation", "save_checkpoint",
    "score_programs", "semantic_penalty", "set_trainable", "stratified_split", "toy_config", "train",
    "trainable_fraction", "utilization_regularizer", "validate_metrics", "write_ablation_csv",
    "write_dataset", "write_metrics_csv",
]
