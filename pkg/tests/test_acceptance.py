"""End-to-end acceptance checks, one ``test_criterion_<n>_*`` group per criterion.

The conftest hook folds the outcomes into a single PASS/FAIL line per
criterion at the end of the run.
"""

import math
import time

import numpy as np
import pytest
import torch

from apgl4sr import seqenc
from apgl4sr.agcl import gce_loss, perturbed_propagate
from apgl4sr.bench import bench_svd
from apgl4sr.checks import gradcheck_instance, tiny_dataset
from apgl4sr.cli import main
from apgl4sr.dataio import build_dataset, five_core_filter
from apgl4sr.evaluation import evaluate
from apgl4sr.graphbuild import build_graph
from apgl4sr.numcore import gradcheck
from apgl4sr.synth import SynthConfig, generate
from apgl4sr.trainer import TrainConfig, fit, rec_loss

from test_agcl import dense_oracle, random_graph
from test_evaluation import _model, naive_evaluate
from test_graphbuild import TOY, exact_graph
from test_seqenc import make_params


# 1. gradient contract

def test_criterion_1_gradient_contract():
    start = time.perf_counter()
    model, _, loss_fn = gradcheck_instance(seed=0)
    cfg = model.cfg
    assert (cfg.d, cfg.max_len, cfg.rank, cfg.lambda1, cfg.lambda2, cfg.alpha) == (8, 6, 4, 0.1, 0.1, 0.05)
    assert (model.num_items, model.num_users) == (20, 8)
    report = gradcheck(loss_fn, model.registry, h=1e-5)
    assert set(report) == set(model.registry.params)
    worst = max(report, key=report.get)
    assert report[worst] < 1e-3, f"{worst}: {report[worst]:.3e}"
    assert time.perf_counter() - start < 60


# 2. factored propagation oracle and scaling

@pytest.mark.parametrize("seed", range(20))
def test_criterion_2_factored_equals_dense(seed):
    g = random_graph(40, seed)
    rng = np.random.default_rng(100 + seed)
    e0, w_us, w_v = rng.normal(size=(41, 8)), rng.normal(size=(41, 3)), rng.normal(size=(41, 3))
    w_us[0] = w_v[0] = 0
    out = perturbed_propagate(g, torch.as_tensor(w_us), torch.as_tensor(w_v), 0.05, torch.as_tensor(e0), 2)
    ref = dense_oracle(g.to_dense(), w_us, w_v, 0.05, e0, 2, "mean")
    assert np.max(np.abs(out.numpy() - ref)) < 1e-9


@pytest.mark.slow
def test_criterion_2_bench_slopes():
    start = time.perf_counter()
    report = bench_svd([1000, 2000, 4000, 8000])
    assert all(p.dense_seconds is not None for p in report.points), "dense path skipped"
    print(f"factored slope {report.factored_slope:.2f}, dense slope {report.dense_slope:.2f}")
    assert report.factored_slope < 1.3
    assert report.dense_slope > 1.7
    assert time.perf_counter() - start < 300


# 3. graph construction on a hand-written corpus

def test_criterion_3_graph_construction():
    g = build_graph([np.array(s) for s in TOY], 6)
    hand = np.zeros((7, 7))
    for (i, j), v in {(1, 2): 0.75, (1, 3): 1.0, (2, 3): 0.75, (5, 6): 2.0, (3, 4): 0.75, (1, 4): 0.75}.items():
        hand[i, j] = hand[j, i] = v
    hand[np.arange(1, 7), np.arange(1, 7)] = 1.0
    np.testing.assert_array_equal(g.to_dense(), hand)
    exact = np.array([[float(x) for x in row] for row in exact_graph(TOY, 6)])
    np.testing.assert_array_equal(g.to_dense(), exact)


# 4. closed-form losses

def test_criterion_4_closed_form_losses():
    for b in (2, 5, 17):
        e = torch.ones(b + 1, 4, dtype=torch.float64)
        assert abs(gce_loss(e, e.clone(), list(range(1, b + 1))).item() - b * math.log(b)) < 1e-9
    e = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert abs(gce_loss(e, e.clone(), [1, 2], tau=0.2).item() - 0.013430) < 1e-6
    emb = torch.randn(10, 4, dtype=torch.float64)
    for steps in (1, 3):
        hidden = torch.zeros(1, steps, 4, dtype=torch.float64)
        targets = np.arange(1, steps + 1)[None]
        negatives = targets + 5
        assert abs(rec_loss(hidden, targets, negatives, emb).item() - 2 * math.log(2)) < 1e-12


# 5. ablation direction on synthetic data

SEEDS = range(5)


def _ablation_row(seed):
    ilog, _, _ = generate(SynthConfig(num_items=200, num_clusters=4, num_users=2000, seed=seed))
    data = build_dataset(five_core_filter(ilog), 20)
    graph = build_graph(data.train_views(), data.num_items)
    row = {}
    for name, flags in (("full", {}), ("disable_agcl", {"disable_agcl": True}), ("disable_pge", {"disable_pge": True})):
        cfg = TrainConfig(d=32, rank=8, max_len=20, max_epochs=100, patience=10, seed=seed, **flags)
        res = fit(data, graph, cfg)
        row[name] = evaluate(res.model, data, "test").ndcg[20]
    return row


@pytest.mark.slow
def test_criterion_5_ablation_direction():
    start = time.perf_counter()
    rows = [_ablation_row(seed) for seed in SEEDS]
    elapsed = time.perf_counter() - start
    table = "\n".join(
        f"seed {s}: " + ", ".join(f"{k} {v:.4f}" for k, v in r.items()) for s, r in zip(SEEDS, rows)
    )
    print(table)
    failures = []
    for variant in ("disable_agcl", "disable_pge"):
        full_mean = np.mean([r["full"] for r in rows])
        other_mean = np.mean([r[variant] for r in rows])
        wins = sum(r["full"] >= r[variant] for r in rows)
        if full_mean < other_mean:
            failures.append(f"mean full {full_mean:.4f} < {variant} {other_mean:.4f}")
        if wins < 4:
            failures.append(f"full >= {variant} on only {wins}/5 seeds")
    if elapsed >= 1800:
        failures.append(f"runtime {elapsed:.0f}s")
    assert not failures, "; ".join(failures) + "\n" + table


# 6. masking and causality

@pytest.mark.parametrize("t", range(5))
def test_criterion_6_causality(t):
    p = make_params()
    seqs = np.array([[4, 7, 1, 9, 12, 3]] * 2)
    seqs[1, t + 1] = 17 if seqs[0, t + 1] != 17 else 18
    sub = torch.as_tensor(np.random.default_rng(t).normal(size=(1, 6, 6))).expand(2, 6, 6)
    h = seqenc.encode_sequence(seqs, p, 2, pe=seqenc.personalized_pe([1, 1], sub, p))
    assert torch.equal(h[0, : t + 1], h[1, : t + 1])


def test_criterion_6_padding_and_zero_bias():
    p = make_params()
    seqs = np.array([[0, 0, 0, 5, 6, 7], [0, 1, 2, 3, 4, 21]])
    pe = torch.full((2, 6, 6), 50.0, dtype=torch.float64)
    _, attn = seqenc.encode_sequence(seqs, p, 2, pe=pe, return_attention=True)
    for layer in attn:
        assert torch.all(layer[0, ..., :3] == 0)
        assert torch.all(layer[1, ..., :1] == 0)
    plain = seqenc.encode_sequence(seqs, p, 2)
    zero = seqenc.encode_sequence(seqs, p, 2, pe=torch.zeros(2, 6, 6, dtype=torch.float64))
    assert torch.equal(plain, zero)


# 7. evaluation correctness

def test_criterion_7_evaluate_matches_naive():
    for seed in range(200):
        data = tiny_dataset(num_users=6, num_items=30, max_len=5, seed=seed)
        model = _model(data, seed, std_boost=25.0)
        split = "valid" if seed % 2 else "test"
        report = evaluate(model, data, split)
        hr, nd = naive_evaluate(model, data, split, True)
        assert report.hr == hr and report.ndcg == nd, seed


def test_criterion_7_random_hit_rate():
    data = tiny_dataset(num_users=2000, num_items=100, max_len=8, seed=7)
    report = evaluate(_model(data, 3, d=16, std_boost=50.0), data, "test", exclude_seen=False)
    p = 5 / 100
    assert abs(report.hr[5] - p) < 3 * math.sqrt(p * (1 - p) / 2000)


# 8. determinism of full train runs

def test_criterion_8_train_determinism(tmp_path):
    log = tmp_path / "log.tsv"
    assert main(["gen-synth", "--num-users", "500", "--seed", "11", "--out", str(log)]) == 0
    assert main(["prepare", "--input", str(log), "--max-len", "20", "--out", str(tmp_path / "d.apgl")]) == 0
    assert main(["build-graph", "--dataset", str(tmp_path / "d.apgl"), "--out", str(tmp_path / "g.apgl")]) == 0
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["train", "--dataset", str(tmp_path / "d.apgl"), "--graph", str(tmp_path / "g.apgl"),
                "--set", "d=32", "--set", "rank=8", "--set", "max_len=20",
                "--max-epochs", "3", "--seed", "5", "--out", str(out)]
        assert main(args) == 0
        runs.append(out)
    for fname in ("train_log.jsonl", "checkpoint.apgl"):
        assert (runs[0] / fname).read_bytes() == (runs[1] / fname).read_bytes(), fname
