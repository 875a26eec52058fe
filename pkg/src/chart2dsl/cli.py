"""Command-line entry point: gen-data, train, eval, generate, ablate, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .chartlab import TYPE_INDEX, ChartSpec, Raster, decode, rasterize
from .numerics import NumericalError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3
log = logging.getLogger("chart2dsl")


class ConfigProblem(Exception):
    pass


def _keys_epilog() -> str:
    from .training.config import RunConfig
    lines = ["config keys (defaults; override with key=value):"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in RunConfig().flat().items()]
    return "\n".join(lines)


def _load_config(args):
    from .training.config import PRESETS, RunConfig
    if args.config is not None and not Path(args.config).is_file():
        raise ConfigProblem(f"config file not found: {args.config}")
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigProblem(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        cfg = RunConfig.load(args.config, args.preset) if args.config else PRESETS[args.preset]()
        return cfg.with_overrides(overrides)
    except (KeyError, ValueError) as err:
        raise ConfigProblem(str(err).strip("'\"")) from None


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config value)")
    if config:
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--preset", choices=("default", "toy"), default="default",
                       help="base settings before the config file and overrides")
        p.add_argument("overrides", nargs="*", help="dotted key=value overrides")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _keys_epilog()
    parser = argparse.ArgumentParser(prog="chart2dsl", description=__doc__, formatter_class=fmt,
                                     epilog=epilog)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="sample a stratified synthetic dataset", formatter_class=fmt,
                       epilog=epilog)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--type-mix", default=None, help="five comma-separated weights (bar,line,scatter,pie,complex)")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--out", required=True)
    _common(p, config=False)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt, epilog=epilog)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split", formatter_class=fmt, epilog=epilog)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None, help="JSONL of {id, tokens} to score instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="also measure latency and routing overhead")
    _common(p)

    p = sub.add_parser("generate", help="print the program for one chart", formatter_class=fmt, epilog=epilog)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--raster", help="PNG chart image")
    src.add_argument("--spec", help="JSON chart spec to render first")
    p.add_argument("--chart-type", choices=tuple(TYPE_INDEX), help="chart type (required with --raster)")
    _common(p)

    p = sub.add_parser("ablate", help="run the MoE and LoRA ablation grids", formatter_class=fmt,
                       epilog=epilog)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", choices=("all", "moe", "lora"), default="all")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _common(p)

    p = sub.add_parser("report", help="summarize a training run", formatter_class=fmt, epilog=epilog)
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--out", required=True)
    _common(p, config=False)
    return parser


# -- verbs ------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .training.data import write_dataset
    mix = None
    if args.type_mix:
        try:
            mix = tuple(float(x) for x in args.type_mix.split(","))
        except ValueError:
            raise ConfigProblem(f"invalid type mix {args.type_mix!r}") from None
        if len(mix) != 5 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigProblem("type mix must be five non-negative weights summing to 1")
    if args.count < 10:
        raise ConfigProblem("count must be at least 10")
    manifest = write_dataset(args.out, args.count, args.seed or 0, mix, args.side)
    sizes = "/".join(str(manifest["splits"][s]["size"]) for s in ("train", "val", "test"))
    print(f"wrote {args.count} charts to {args.out} (train/val/test = {sizes})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training.data import read_split
    from .training.trainer import train
    cfg = _load_config(args)
    train_set, val_set = read_split(args.data, "train"), read_split(args.data, "val")
    train_set = train_set[: cfg.data.train_size]
    val_set = val_set[: cfg.data.val_size]
    _, report = train(cfg, train_set, val_set, args.out)
    last = report.evals[-1]
    print(f"{report.steps} steps, val success {last['success_rate']:.3f}, "
          f"checkpoint {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def _read_predictions(path) -> dict[int, list[int]]:
    with open(path) as fh:
        return {int(r["id"]): list(r["tokens"]) for r in map(json.loads, fh) if r}


def cmd_eval(args) -> int:
    from .training.checkpoint import load_checkpoint
    from .training.data import read_split
    from .training.evaluate import (evaluate_model, measure_timing, score_programs, validate_metrics,
                                    write_metrics_csv)
    samples = read_split(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.predictions:
        preds = _read_predictions(args.predictions)
        missing = [s.id for s in samples if s.id not in preds]
        if missing:
            raise ConfigProblem(f"predictions lack {len(missing)} sample ids, e.g. {missing[0]}")
        programs = [preds[s.id] for s in samples]
        tau = _load_config(args).eval.tau
        metrics = score_programs(samples, programs, tau)
        validate_metrics(metrics)
        source = str(args.predictions)
    else:
        if not args.checkpoint:
            raise ConfigProblem("eval needs --checkpoint or --predictions")
        model, cfg, _ = load_checkpoint(args.checkpoint)
        if args.config or args.overrides:
            cfg = _load_config(args)
        metrics, programs = evaluate_model(model, samples, cfg.eval.tau)
        source = str(args.checkpoint)
        if args.timing:
            timing = measure_timing(model, samples[: min(len(samples), 20)])
            (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    with open(out / "predictions.jsonl", "w") as fh:
        for s, ids in zip(samples, programs):
            fh.write(json.dumps({"id": s.id, "tokens": [int(t) for t in ids]}) + "\n")
    write_metrics_csv(out / "metrics.csv", [{"split": args.split, "checkpoint": source, **metrics}])
    print(f"{args.split}: success {metrics['success_rate']:.3f}, mean IoU {metrics['mean_iou']:.3f}, "
          f"parse {metrics['parse_rate']:.3f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .training.checkpoint import load_checkpoint
    model, _, _ = load_checkpoint(args.checkpoint)
    if args.spec:
        spec = ChartSpec.from_dict(json.loads(Path(args.spec).read_text()))
        raster, chart_type = rasterize(spec), spec.chart_type
    else:
        if not args.chart_type:
            raise ConfigProblem("--chart-type is required with --raster")
        raster, chart_type = Raster.from_png(Path(args.raster).read_bytes()), args.chart_type
    ids = model.generate(raster.rgb[None], np.array([TYPE_INDEX[chart_type]]))[0]
    print(" ".join(decode(ids)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training.ablation import LORA_AXES, MOE_AXES, default_cells, expand, run_ablation
    from .training.data import read_split
    cfg = _load_config(args)
    cells = {"all": default_cells(), "moe": expand(MOE_AXES, "moe"), "lora": expand(LORA_AXES, "lora")}[args.grid]
    train_set = read_split(args.data, "train")[: cfg.data.train_size]
    val_set = read_split(args.data, "val")[: cfg.data.val_size]
    rows = run_ablation(cfg, train_set, val_set, cells, args.out, jobs=max(1, args.jobs))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed; table at {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run, out = Path(args.run), Path(args.out)
    log_path = run / "run_log.jsonl"
    if not log_path.is_file():
        raise ConfigProblem(f"no run log under {run}")
    out.mkdir(parents=True, exist_ok=True)
    steps, evals = [], []
    with log_path.open() as fh:
        for rec in map(json.loads, fh):
            (steps if rec["kind"] == "step" else evals if rec["kind"] == "eval" else []).append(rec)
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "total", "syntax", "router_kl", "load", "util", "frobenius", "count"])
        for r in steps:
            ls = r["loss"]
            w.writerow([r["step"], f"{r['lr']:.6g}", *(f"{ls[k]:.6f}" for k in
                       ("total", "syntax", "router_kl", "load", "util", "frobenius", "count"))])
    lines = [f"# Training run summary: {run.name}", ""]
    report_path = run / "report.json"
    if report_path.is_file():
        rep = json.loads(report_path.read_text())
        lines += ["| field | value |", "|---|---|"]
        lines += [f"| {k} | {rep[k]} |" for k in ("mode", "steps", "epochs_run", "stopped_early",
                                                  "initial_syntax", "final_syntax", "trainable_params",
                                                  "total_params", "memory_proxy")]
        lines.append("")
    if evals:
        lines += ["## Validation", "", "| step | success | mean IoU | parse |", "|---|---|---|---|"]
        lines += [f"| {e['step']} | {e['success_rate']:.3f} | {e['mean_iou']:.3f} | {e['parse_rate']:.3f} |"
                  for e in evals]
        lines.append("")
    if steps:
        lines += ["## Syntax loss", "", "| step | syntax | total |", "|---|---|---|"]
        stride = max(1, len(steps) // 20)
        for r in steps[::stride] + ([steps[-1]] if (len(steps) - 1) % stride else []):
            lines.append(f"| {r['step']} | {r['loss']['syntax']:.4f} | {r['loss']['total']:.4f} |")
        lines.append("")
    heat = run / "utilization_heatmap.csv"
    if heat.is_file():
        rows = list(csv.reader(heat.open()))
        (out / "utilization_heatmap.csv").write_text(heat.read_text())
        lines += ["## Expert utilization by chart type", "",
                  "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines.append("")
    (out / "summary.md").write_text("\n".join(lines))
    print(f"wrote {out / 'summary.md'}")
    return EXIT_OK


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
         "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    from .training.trainer import TrainingAborted
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return VERBS[args.verb](args)
    except ConfigProblem as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericalError) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
