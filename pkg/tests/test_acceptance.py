"""Acceptance gate: one test per criterion; a PASS/FAIL line per criterion is printed in the summary.

Criteria 4 and 5 generate 320 phantoms and train two desk-scale models; expect
roughly half an hour on a single CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from camscope.cam import activation_map, finalize, neuron_importance
from camscope.cli import main
from camscope.metrics import format_rate, identification_rate, roc_auc
from camscope.model import (
    ChannelAttention,
    CovidNet25D,
    Head,
    ModelConfig,
    SpatialAttention,
    apply_attention,
    feature_shapes,
    select_layer,
)
from camscope.phantom import PhantomSpec, dataset_digest, generate_dataset
from camscope.train import TrainConfig, evaluate, train
from camscope.volume_store import LesionAnnotation, read_manifest

from .conftest import SMALL_SPEC, TINY
from .gradcheck import check_layer

sigmoid = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
F64 = torch.float64


def _detail(record_property, text):
    record_property("detail", text)


def _t(values):
    return torch.tensor(values, dtype=F64)


@pytest.mark.criterion(1, "equation unit suite")
def test_equation_units(record_property):
    start = time.perf_counter()
    tol = 1e-9
    checks = 0

    # channel pooling and channel gate
    ca = ChannelAttention(4, 2).double()
    with torch.no_grad():
        ca.w0.zero_()
        ca.w1.zero_()
    m = ca(torch.randn(1, 4, 3, 3, 3, dtype=F64))
    assert torch.all((m - 0.5).abs() < tol)
    const = torch.full((1, 1, 2, 3, 4), 1.75, dtype=F64)
    assert const.flatten(2).mean(2).item() == const.flatten(2).amax(2).item() == 1.75
    ca = ChannelAttention(2, 1).double()
    with torch.no_grad():
        ca.w0.copy_(_t([[0.5, 0.2], [-1.0, 0.3]]))
        ca.w1.copy_(_t([[0.4, -0.3], [0.7, 0.9]]))
    m = ca(_t([1.0, -2.0]).reshape(1, 2, 1, 1, 1))[0]
    assert abs(m[0].item() - sigmoid(2.0)) < tol and abs(m[1].item() - sigmoid(-1.5)) < tol
    checks += 3

    # spatial pooling and spatial gate
    sa = SpatialAttention().double()
    with torch.no_grad():
        sa.conv.weight.zero_()
        sa.conv.bias.zero_()
    assert torch.all((sa(torch.randn(1, 3, 4, 4, 4, dtype=F64)) - 0.5).abs() < tol)
    single = torch.randn(1, 1, 3, 3, 3, dtype=F64)
    assert torch.equal(single.mean(1), single.amax(1))
    with torch.no_grad():
        sa.conv.weight[0, 0, 1, 1, 1] = 0.2
        sa.conv.weight[0, 1, 1, 1, 1] = -0.1
    assert abs(sa(_t([3.0, -1.0]).reshape(1, 2, 1, 1, 1)).item() - sigmoid(0.2 * 1.0 - 0.1 * 3.0)) < tol
    checks += 3

    # gating
    f = torch.randn(1, 3, 2, 2, 2, dtype=F64)
    assert torch.equal(apply_attention(f, torch.ones(1, 3, dtype=F64), torch.ones(1, 2, 2, 2, dtype=F64)), f)
    assert not apply_attention(f, torch.zeros(1, 3, dtype=F64), torch.rand(1, 2, 2, 2, dtype=F64)).any()
    gated = apply_attention(f, torch.rand(1, 3, dtype=F64), torch.rand(1, 2, 2, 2, dtype=F64))
    assert torch.all(gated.abs() <= f.abs())
    checks += 3

    # head and tie-break
    head = Head(4).double()
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    _, lik, cls = head(torch.zeros(1, 4, 2, 2, 2, dtype=F64))
    assert torch.all((lik - 0.5).abs() < tol) and cls.item() == 0
    checks += 1

    # neuron importance and activation map
    assert not neuron_importance(-np.ones((2, 2, 2, 2))).any()
    assert np.allclose(neuron_importance(np.full((1, 2, 2, 2), 0.3)), [0.3], atol=tol, rtol=0)
    g = np.array([[1.0, -1.0], [3.0, 1.0]]).reshape(2, 2, 1, 1)
    assert np.allclose(neuron_importance(g), [0.5, 2.0], atol=tol, rtol=0)
    v = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
    assert np.array_equal(activation_map([1.0], v), np.maximum(v[0], 0))
    assert not activation_map([0.0, 0.0], np.ones((2, 2, 2, 2))).any()
    assert activation_map([1.0, 2.0], np.array([3.0, -2.0]).reshape(2, 1, 1, 1))[0, 0, 0] == 0.0
    checks += 6

    # normalize and threshold
    raw = np.zeros((2, 2, 2))
    raw[0, 0, 0], raw[1, 1, 1] = 5.0, 0.4
    heat = finalize(raw)
    assert abs(heat.normalized[1, 1, 1] - 0.08) < tol and heat.thresholded[1, 1, 1] == 0.0
    assert np.all(finalize(np.full((2, 2, 2), 3.0), tau=0.9).thresholded == 1.0)
    assert not finalize(np.zeros((2, 2, 2))).volume_scale.any()
    checks += 3

    elapsed = time.perf_counter() - start
    _detail(record_property, f"{checks} closed-form checks, tol {tol:g}, {elapsed:.2f} s")
    assert elapsed < 10.0


@pytest.mark.criterion(2, "gradient exactness")
def test_gradient_exactness(record_property):
    start = time.perf_counter()
    cfg = ModelConfig.desk(attention_blocks=6)
    model = CovidNet25D(cfg).double().eval()
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 1, *cfg.input_shape)))
    layers = [select_layer(cfg), *cfg.gating_sites]
    worst, redrawn = 0.0, 0
    for layer in layers:
        err, exact, _, skipped = check_layer(model, x, layer, n_voxels=20, h=1e-3)
        assert len(exact) >= 20 and np.any(exact != 0)
        worst, redrawn = max(worst, err), redrawn + skipped
    elapsed = time.perf_counter() - start
    _detail(record_property, f"{len(layers)} layers x 20 voxels, max rel err {worst:.2e}, "
                             f"{redrawn} branch-switching stencils redrawn, {elapsed:.0f} s")
    assert worst < 1e-4
    assert elapsed < 120.0


@pytest.mark.criterion(3, "shape conformance")
def test_shape_conformance(record_property):
    cfg = ModelConfig.paper()
    model = CovidNet25D(cfg).to("meta")
    stack, _ = model(torch.empty(1, 1, *cfg.input_shape, device="meta"))
    shapes = stack.shapes()
    for name in ("F_ax", "F_cor", "F_sag"):
        assert shapes[name][1:] == (32, 48, 48, 16)
    assert shapes["F_con"][1:] == (96, 48, 48, 16)
    assert shapes["F"][1:] == (256, 12, 12, 4)
    assert shapes[select_layer(cfg)][2:] == (24, 24, 8)
    for name, shape in feature_shapes(cfg).items():
        assert shapes[name][1:] == shape
    _detail(record_property, "F_ax/F_cor/F_sag 32x48x48x16, F_con 96x48x48x16, F 256x12x12x4")


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """200/60/60 desk-size phantoms, fixed seed."""
    out = tmp_path_factory.mktemp("accept") / "data"
    spec = PhantomSpec(n_typical=160, n_nontypical=160, split_fractions=(0.625, 0.1875), seed=2024)
    generate_dataset(spec, out)
    return {s: read_manifest(out / s / "manifest.json") for s in ("train", "val", "test")}


@pytest.fixture(scope="session")
def trained_pair(synthetic, tmp_path_factory):
    runs = {}
    for blocks in (1, 0):
        run = tmp_path_factory.mktemp(f"blocks{blocks}")
        start = time.perf_counter()
        res = train(synthetic["train"], synthetic["val"], ModelConfig.desk(attention_blocks=blocks),
                    TrainConfig.desk(), run_dir=run)
        rep = evaluate(synthetic["test"], res.model, out_dir=run)
        runs[blocks] = (res, rep, time.perf_counter() - start)
    return runs


@pytest.mark.criterion(4, "synthetic end-to-end")
def test_synthetic_end_to_end(record_property, synthetic, trained_pair):
    assert [len(synthetic[s]) for s in ("train", "val", "test")] == [200, 60, 60]
    res, rep, elapsed = trained_pair[1]
    ir = rep.case_level_ir
    _detail(record_property, f"test AUC {rep.auc:.4f} (>= 0.95), case-level IR {format_rate(ir)} (>= 80%), "
                             f"best epoch {res.best_epoch}, {elapsed / 60:.1f} min")
    assert rep.auc >= 0.95
    assert ir >= 0.80


@pytest.mark.criterion(5, "ablation direction")
def test_ablation_direction(record_property, trained_pair):
    (res1, rep1, _), (res0, rep0, _) = trained_pair[1], trained_pair[0]
    assert len(res1.log) == len(res0.log) == TrainConfig.desk().epochs
    _detail(record_property, f"AUC attention_blocks=1 {rep1.auc:.4f} vs attention_blocks=0 {rep0.auc:.4f} (slack 0.02)")
    assert rep1.auc >= rep0.auc - 0.02


@pytest.mark.criterion(6, "CAM property suite")
def test_cam_properties(record_property):
    rng = np.random.default_rng(6)
    trials = 100
    for _ in range(trials):
        c = int(rng.integers(1, 6))
        shape = (c, *rng.integers(1, 6, 3))
        raw = activation_map(neuron_importance(rng.normal(size=shape)), rng.normal(size=shape))
        assert np.all(raw >= 0)
    for _ in range(trials):
        raw = rng.exponential(size=tuple(rng.integers(1, 6, 3)))
        heat = finalize(raw, target_shape=tuple(rng.integers(1, 9, 3)))
        for arr in (heat.thresholded, heat.volume_scale):
            assert np.all((arr == 0) | ((arr > 0.1) & (arr <= 1.0)))
    for _ in range(trials):
        raw = rng.exponential(size=tuple(rng.integers(1, 6, 3)))
        k = 10.0 ** rng.uniform(-3, 3)
        assert np.allclose(finalize(raw).normalized, finalize(k * raw).normalized, rtol=1e-12, atol=1e-15)
    for _ in range(trials):
        c = int(rng.integers(2, 6))
        g = rng.normal(size=(c, *rng.integers(1, 5, 3)))
        dead = int(rng.integers(0, c))
        g[dead] = -np.abs(g[dead]) - 1e-3
        assert neuron_importance(g)[dead] == 0.0
        assert not neuron_importance(-np.abs(g) - 1e-3).any()
    _detail(record_property, f"4 properties x {trials} randomized trials")


def _pair_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


@pytest.mark.criterion(7, "metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))
        worst = max(worst, abs(roc_auc(scores, labels)[1] - _pair_auc(scores, labels)))
    assert worst <= 1e-12

    heat = np.zeros((4, 4, 4))
    heat[1, 1, 1] = 1.0
    texts = []
    for hit, total, expected in ((39, 47, "83.0%"), (27, 29, "93.1%"), (2, 21, "9.52%")):
        ann = {f"c{i}": [LesionAnnotation("RLL", (1, 1, 1) if i < hit else (3, 3, 3), (0.5, 0.5, 0.5))]
               for i in range(total)}
        rate = identification_rate({k: heat for k in ann}, ann).case_level.rate
        texts.append(f"{hit}/{total} -> {format_rate(rate)}")
        assert format_rate(rate) == expected
    _detail(record_property, f"200 instances max |diff| {worst:.1e}; " + ", ".join(texts))


@pytest.mark.criterion(8, "determinism")
def test_determinism(record_property, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SMALL_SPEC, "n_typical": 6, "n_nontypical": 6, "seed": 8}))
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": {**TINY, "input_shape": list(TINY["input_shape"])},
                                             "train": {"epochs": 2, "batch_size": 4, "lr0": 1e-3}, "seed": 8}))
    digests, ckpts, reports = [], [], []
    for name in ("a", "b"):
        d, r, e = tmp_path / name / "data", tmp_path / name / "run", tmp_path / name / "eval"
        assert main(["-q", "gen", "--spec", str(spec), "--out", str(d)]) == 0
        assert main(["-q", "train", "--data", str(d), "--run", str(r), "--config", str(cfg)]) == 0
        assert main(["-q", "eval", "--data", str(d), "--checkpoint", str(r), "--out", str(e)]) == 0
        digests.append(dataset_digest(d))
        ckpts.append((r / "checkpoint.ckpt").read_bytes() + (r / "train_log.csv").read_bytes())
        reports.append((e / "report.json").read_bytes() + (e / "roc.csv").read_bytes())
    assert digests[0] == digests[1]
    assert ckpts[0] == ckpts[1]
    assert reports[0] == reports[1]
    _detail(record_property, "manifests, checkpoints and reports bit-identical across two runs")
