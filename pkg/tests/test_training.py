import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chart2dsl import lora
from chart2dsl.chartlab import Raster
from chart2dsl.model import ChartToCode
from chart2dsl.numerics import NumericalError, Tensor, backward, exp, stream, tanh
from chart2dsl.training import (Batch, LossWeights, RunConfig, TrainingAborted, compose_loss, load_checkpoint,
                                loss_step, read_checkpoint, run_ablation, semantic_penalty, set_trainable,
                                train, utilization_regularizer)
from chart2dsl.training import losses as losses_mod
from chart2dsl.training.ablation import Cell, expand, routing_overhead
from chart2dsl.training.data import make_sample, sample_specs
from chart2dsl.training.evaluate import evaluate_model
from chart2dsl.training.trainer import convergence_step, total_steps
from conftest import check_grads

TINY = {
    "model.side": 32, "model.patch": 8, "model.d": 16, "model.heads": 2, "model.enc_layers": 1,
    "model.dec_layers": 1, "model.max_len": 64, "model.dropout": 0.0, "moe.experts": 2, "moe.capacity": 8,
    "lora.rank": 2, "lora.alpha": 4.0, "train.batch_size": 4, "train.epochs": 1, "train.lr_max": 1e-3,
    "train.lr_min": 1e-5, "train.t_max": 0, "train.augment_prob": 0.5, "loss.semantic_every": 0,
}


def tiny_cfg(**over) -> RunConfig:
    return RunConfig().with_overrides({**TINY, **over})


def tiny_data(n=12, seed=0):
    specs = sample_specs(n, seed, (0.2,) * 5, side=32)
    return [make_sample(s, i) for i, s in enumerate(specs)]


@pytest.fixture(scope="module")
def data():
    return tiny_data(12), tiny_data(4, seed=1)


# -- utilization regularizer ----------------------------------------------------------------------------
def test_util_examples():
    assert utilization_regularizer([0.25] * 4, 0.5) == 0.0
    assert utilization_regularizer([1.0, 0.0], 0.5) == pytest.approx(0.25, abs=1e-12)
    assert utilization_regularizer([0.4, 0.3, 0.2, 0.1], 0.5) == pytest.approx(0.025, abs=1e-12)
    assert utilization_regularizer([0.0, 0.0, 0.0], 0.5) == pytest.approx(0.5 * 3 / 9)


def test_util_rejects_unnormalized():
    with pytest.raises(ValueError):
        utilization_regularizer([0.5, 0.6], 0.5)
    with pytest.raises(ValueError):
        utilization_regularizer([], 0.5)


# -- semantic penalty ------------------------------------------------------------------------------------------
def test_semantic_examples():
    samples = tiny_data(3)
    targets = [s.raster for s in samples]
    assert semantic_penalty(targets, [s.tokens for s in samples], 0.85) == 0.0
    # A lone PAD token never executes.
    assert semantic_penalty(targets, [[0]] * 3, 0.85) == pytest.approx(0.85)
    with pytest.raises(ValueError):
        semantic_penalty(targets, [[0]], 0.85)
    with pytest.raises(ValueError):
        semantic_penalty(targets, [[0]] * 3, 0.95)


def test_semantic_mixed_fixture(monkeypatch):
    samples = tiny_data(2)
    scores = iter([0.9, 0.5])
    monkeypatch.setattr(losses_mod, "iou", lambda a, b: next(scores))
    got = semantic_penalty([s.raster for s in samples], [s.tokens for s in samples], 0.85)
    assert got == pytest.approx(0.175, abs=1e-12)


# -- compose_loss --------------------------------------------------------------------------------------------
def test_compose_example():
    lb = compose_loss(1.0, router_kl=0.2, util=0.05)
    assert lb.total == pytest.approx(1.155, abs=1e-12)
    zero = LossWeights(0.5, 0.0, 0.0, 0.0, 0.0, 0.0)
    lb = compose_loss(2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.4, zero)
    assert lb.total == pytest.approx(2.4, abs=1e-12)


@given(st.lists(st.floats(0, 10), min_size=7, max_size=7), st.lists(st.floats(0, 2), min_size=6, max_size=6),
       st.sampled_from(["log_only", "scaled_ce"]))
def test_breakdown_identity(parts, lam, mode):
    w = LossWeights(*lam)
    lb = compose_loss(*parts[:5], util=parts[5], semantic=parts[6], weights=w, semantic_mode=mode)
    sem = parts[6] * parts[0] if mode == "scaled_ce" else parts[6]
    assert lb.semantic == pytest.approx(sem, abs=1e-12)
    expect = (lb.syntax + lb.semantic + w.lambda2 * lb.router_kl + w.lambda3 * lb.util
              + w.lambda_load * lb.load + w.lambda_frob * lb.frobenius + w.lambda_count * lb.count)
    assert abs(lb.total - expect) <= 1e-10
    # Only differentiable parts enter the objective.
    obj = lb.objective.item()
    assert obj == pytest.approx(lb.total - w.lambda3 * lb.util - (0.0 if mode == "scaled_ce" else lb.semantic),
                                abs=1e-9)


def test_compose_rejects_nonfinite():
    with pytest.raises(NumericalError, match="router_kl"):
        compose_loss(1.0, router_kl=float("nan"))
    with pytest.raises(ValueError):
        compose_loss(1.0, semantic_mode="other")


@pytest.mark.parametrize("mode", ["log_only", "scaled_ce"])
def test_total_gradient_is_weighted_sum(mode, rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = LossWeights(0.5, 0.7, 0.3, 1.3, 0.2, 0.05)
    comps = {
        "syntax": lambda: (x * x).sum(),
        "router_kl": lambda: exp(x * 2.0).sum(),
        "load": lambda: (x * x * x).mean(),
        "frobenius": lambda: (x * x).sum() * 0.5,
        "count": lambda: tanh(x).sum(),
    }

    def build():
        return compose_loss(*(f() for f in comps.values()), util=0.1, semantic=0.3, weights=w,
                            semantic_mode=mode).objective

    check_grads(build, [x])
    scale = {"syntax": 1.0 + (0.3 if mode == "scaled_ce" else 0.0), "router_kl": w.lambda2,
             "load": w.lambda_load, "frobenius": w.lambda_frob, "count": w.lambda_count}
    expect = np.zeros_like(x.data)
    for k, f in comps.items():
        x.grad = None
        expect += scale[k] * backward(f(), [x])[x]
    x.grad = None
    np.testing.assert_allclose(backward(build(), [x])[x], expect, rtol=1e-12, atol=1e-12)


# -- config ---------------------------------------------------------------------------------------------------------
def test_default_config_values():
    c = RunConfig()
    assert (c.train.batch_size, c.train.lr_max, c.model.dropout) == (4, 1e-4, 0.1)
    assert (c.moe.experts, c.moe.capacity, c.moe.top_k, c.moe.temperature, c.moe.sigma) == (8, 32, 2, 1.0, 0.01)
    assert (c.loss.lambda1, c.loss.lambda2, c.loss.lambda3) == (0.5, 0.7, 0.3)
    assert (c.lora.rank, c.lora.alpha, c.eval.tau) == (8, 16.0, 0.85)


@pytest.mark.parametrize("over", [{"moe.experts": 1}, {"lora.rank": 64}, {"eval.tau": 0.95}, {"mode": "x"},
                                  {"model.side": 24}, {"train.lr_min": 1.0}, {"data.type_mix": [1, 0]}])
def test_config_rejects_illegal_values(over):
    with pytest.raises(ValueError):
        RunConfig().with_overrides(over)


def test_config_rejects_unknown_key_and_round_trips(tmp_path):
    with pytest.raises(KeyError):
        RunConfig().with_overrides({"moe.nope": 1})
    cfg = tiny_cfg(**{"moe.experts": "4"})
    assert cfg.moe.experts == 4
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").digest() == cfg.digest()


def test_total_steps_and_convergence_step():
    cfg = tiny_cfg(**{"train.epochs": 3})
    assert total_steps(cfg, 10) == 9
    assert total_steps(cfg.with_overrides({"train.max_steps": 4}), 10) == 4
    losses = [10.0] * 20 + [1.0] * 80
    # 1-based step that closes the first all-converged window
    assert convergence_step(losses, window=10) == 30
    assert convergence_step([]) == 0


# -- set_trainable ------------------------------------------------------------------------------------------------------
def test_trainable_sets():
    m = ChartToCode(tiny_cfg().model_config(), seed=0)
    full = set_trainable(m, "full_finetune")
    lora_only = set(set_trainable(m, "lora_only"))
    moe_lora = set(set_trainable(m, "moe_lora"))
    assert len(full) == len(m.parameters())
    assert lora_only < moe_lora < set(full)
    assert any(".experts." in n for n in moe_lora - lora_only)
    assert not any(n.startswith("encoder.blocks") and ".adapter." not in n for n in moe_lora)
    plain = ChartToCode(tiny_cfg(mode="full_finetune").model_config(), seed=0)
    with pytest.raises(ValueError):
        set_trainable(plain, "lora_only")


def test_modes_share_step_zero_loss(data):
    train_set, _ = data
    batch = Batch(train_set[:4])
    losses = []
    for mode in ("full_finetune", "lora_only", "moe_lora"):
        cfg = tiny_cfg(mode=mode)
        m = ChartToCode(cfg.model_config(), seed=cfg.seed)
        names = set_trainable(m, mode)
        rngs = {k: stream(0, "train", k) for k in ("dropout", "noise", "route")}
        losses.append(loss_step(m, cfg, batch, names, rngs).loss.syntax)
    assert losses[0] == losses[1] == losses[2]


def test_loss_step_leaves_no_grads_behind(data):
    train_set, _ = data
    cfg = tiny_cfg()
    m = ChartToCode(cfg.model_config(), seed=0)
    names = set_trainable(m, cfg.mode)
    rngs = {k: stream(0, k) for k in ("dropout", "noise", "route")}
    a = loss_step(m, cfg, Batch(train_set[:4]), names, rngs)
    assert set(a.grads) == set(names)
    assert all(p.grad is None for p in m.parameters().values())
    rngs = {k: stream(0, k) for k in ("dropout", "noise", "route")}
    b = loss_step(m, cfg, Batch(train_set[:4]), names, rngs)
    for n in names:
        np.testing.assert_array_equal(a.grads[n], b.grads[n])
    assert a.activations > 0


# -- train ----------------------------------------------------------------------------------------------------
def test_zero_epochs_only_initial_eval(data, tmp_path):
    cfg = tiny_cfg(**{"train.epochs": 0})
    model, report = train(cfg, *data, out_dir=tmp_path)
    assert report.steps == 0 and len(report.evals) == 1 and report.evals[0]["step"] == 0
    lines = (tmp_path / "run_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["kind"] for l in lines] == ["eval"]
    ref = ChartToCode(cfg.model_config(), seed=cfg.seed)
    loaded, _, header = load_checkpoint(tmp_path / "model.ckpt")
    assert header["step"] == 0
    for name, p in ref.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name].data, p.data)


def test_run_is_deterministic(data, tmp_path):
    cfg = tiny_cfg(**{"train.eval_every": 2})
    for sub in ("a", "b"):
        train(cfg, *data, out_dir=tmp_path / sub)
    for name in ("run_log.jsonl", "model.ckpt", "report.json", "utilization_heatmap.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_run_log_schema_and_report(data, tmp_path):
    cfg = tiny_cfg(**{"train.epochs": 2, "train.patience": 5})
    model, report = train(cfg, *data, out_dir=tmp_path)
    recs = [json.loads(l) for l in (tmp_path / "run_log.jsonl").read_text().splitlines()]
    steps = [r for r in recs if r["kind"] == "step"]
    assert [r["step"] for r in steps] == list(range(1, 7))
    for r in steps:
        lb = r["loss"]
        w = cfg.loss
        expect = (lb["syntax"] + lb["semantic"] + w.lambda2 * lb["router_kl"] + w.lambda3 * lb["util"]
                  + w.lambda_load * lb["load"] + w.lambda_frob * lb["frobenius"] + w.lambda_count * lb["count"])
        assert abs(lb["total"] - expect) <= 1e-10
        assert len(r["utilization"]) == 2 and 0 < r["lr"] <= cfg.train.lr_max
    assert report.steps == 6 and report.epochs_run == 2
    assert sum(report.utilization) == pytest.approx(1.0)
    assert report.memory_proxy == report.total_params + report.optimizer_scalars + report.peak_activations
    stored = json.loads((tmp_path / "report.json").read_text())
    assert stored["memory_proxy"] == report.memory_proxy
    assert stored["config_hash"] == cfg.digest()
    assert json.loads((tmp_path / "timing.json").read_text())["total_s"] > 0


def test_frozen_base_unchanged_in_lora_mode(data):
    cfg = tiny_cfg(mode="lora_only")
    before = {n: p.data.copy() for n, p in ChartToCode(cfg.model_config(), seed=cfg.seed).parameters().items()}
    model, _ = train(cfg, *data)
    moved = set()
    for n, p in model.parameters().items():
        if p.requires_grad:
            moved.add(n)
        else:
            np.testing.assert_array_equal(p.data, before[n])
    assert any(".adapter." in n for n in moved)


def test_semantic_term_is_logged(data):
    cfg = tiny_cfg(**{"loss.semantic_every": 1, "train.max_steps": 2})
    _, report = train(cfg, *data)
    assert report.steps == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(data, monkeypatch):
    cfg = tiny_cfg()
    model = ChartToCode(cfg.model_config(), seed=0)
    model.parameters()["decoder.head.bias"].data[:] = np.nan
    with pytest.raises(TrainingAborted, match="syntax"):
        train(cfg, *data, model=model)


def test_empty_split_rejected(data):
    with pytest.raises(ValueError):
        train(tiny_cfg(), data[0], [])


def test_checkpoint_round_trip_and_errors(data, tmp_path):
    cfg = tiny_cfg()
    model, _ = train(cfg, *data, out_dir=tmp_path)
    loaded, cfg2, header = load_checkpoint(tmp_path / "model.ckpt")
    assert cfg2.digest() == cfg.digest() == header["config_hash"]
    for n, p in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[n].data, p.data)
    _, arrays = read_checkpoint(tmp_path / "model.ckpt")
    assert any(k.startswith("m/") for k in arrays) and header["optimizer"]["step_count"] == header["step"]
    m1, _ = evaluate_model(model, data[1])
    m2, _ = evaluate_model(loaded, data[1])
    assert m1["mean_iou"] == m2["mean_iou"]
    from chart2dsl.training import CheckpointError
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "model.ckpt", tiny_cfg(seed=5), strict_config=True)
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")


# -- evaluation ----------------------------------------------------------------------------------------------------
def test_untrained_model_floor(data):
    model = ChartToCode(tiny_cfg().model_config(), seed=0)
    metrics, programs = evaluate_model(model, data[1])
    assert metrics["success_rate"] < 0.05
    assert len(programs) == len(data[1])


def test_oracle_programs_score_one(data):
    from chart2dsl.training import score_programs
    samples = data[0]
    rec = score_programs(samples, [s.tokens for s in samples])
    assert rec["success_rate"] == 1.0 and rec["mean_iou"] == 1.0 and rec["parse_rate"] == 1.0
    with pytest.raises(ValueError):
        score_programs([], [])


# -- ablation ----------------------------------------------------------------------------------------------------------
def test_grid_expansion_validation():
    cells = expand({"moe.experts": (4, 8), "moe.routing": ("topk", "prob")}, "moe")
    assert [dict(c.overrides) for c in cells][1] == {"moe.experts": 4, "moe.routing": "prob"}
    with pytest.raises(ValueError):
        expand({"moe.experts": (5,)}, "moe")
    with pytest.raises(ValueError):
        expand({"train.epochs": (1,)}, "x")


def test_singleton_grid_matches_direct_run(data, tmp_path):
    cfg = tiny_cfg()
    cell = Cell("moe", 0, (("moe.experts", 4),))
    rows = run_ablation(cfg, *data, cells=[cell], out_dir=tmp_path)
    direct_cfg = cfg.with_overrides({"moe.experts": 4})
    model, report = train(direct_cfg, *data)
    metrics, _ = evaluate_model(model, data[1])
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert rows[0]["accuracy"] == metrics["success_rate"] and rows[0]["mean_iou"] == metrics["mean_iou"]
    assert rows[0]["memory_proxy"] == report.memory_proxy
    assert rows[0]["overhead"] == routing_overhead(direct_cfg) > 0
    assert (tmp_path / "ablation.csv").read_text().splitlines()[0].startswith("grid,cell,experts")


def test_failed_cell_is_recorded(data):
    cfg = tiny_cfg()
    # capacity fine, but rank 16 >= d 16 fails validation inside the cell
    rows = run_ablation(cfg, *data, cells=[Cell("lora", 0, (("lora.rank", 16),)),
                                           Cell("lora", 1, (("lora.rank", 4),))])
    assert rows[0]["status"] == "failed" and "rank" in rows[0]["error"]
    assert rows[1]["status"] == "ok"


def test_param_counts_grow_with_experts():
    counts = []
    for e in (4, 8, 12):
        cfg = tiny_cfg(**{"moe.experts": e})
        m = ChartToCode(cfg.model_config(), seed=0)
        names = set_trainable(m, cfg.mode)
        counts.append((sum(m.parameters()[n].size for n in names), m.num_parameters()))
    assert counts[0][0] < counts[1][0] < counts[2][0]
    assert counts[0][1] < counts[1][1] < counts[2][1]


def test_adapter_count_doubles_with_rank():
    sizes = []
    for r in (4, 8, 16):
        m = ChartToCode(RunConfig().with_overrides({"lora.rank": r}).model_config(), seed=0)
        sizes.append(sum(ad.A.size + ad.B.size for ad in m.adapters))
        # closed form: r * (d_in + d_out) per target
        assert sizes[-1] == sum(r * (ad.A.shape[0] + ad.B.shape[1]) for ad in m.adapters)
    assert sizes[1] == 2 * sizes[0] and sizes[2] == 2 * sizes[1]
    assert isinstance(m.adapters[0], lora.LoRAAdapter) and math.isclose(m.adapters[0].scale, 1.0)
