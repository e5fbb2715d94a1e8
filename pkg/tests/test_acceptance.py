"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The bench-dependent criteria share one default-config pre-training and
bench sweep (see ``shipped_run`` in conftest), so the whole module takes
roughly a quarter of an hour on one core.
"""

import json
import random
import time

import numpy as np
import pytest
from conftest import record_criterion
from oracles import f1, lcs_table, multiset_overlap

from unisumm import autodiff as ad
from unisumm.autodiff import Tensor, grad_check
from unisumm.cli import main
from unisumm.config import heldout_datasets, load_config
from unisumm.data import Dataset, Example
from unisumm.harness import BenchSettings, RunReport, transfer_losses
from unisumm.model import (
    UNIVERSAL,
    ModelConfig,
    ParameterStore,
    PrefixBank,
    PrefixParams,
    build_model,
    forward_with_targets,
)
from unisumm.rouge import rouge_l, rouge_n, score
from unisumm.training import (
    OptimizerConfig,
    TaskRegistry,
    TrainState,
    asymmetric_decay_step,
    balance_datasets,
    select_prefix,
)
from unisumm.tuning import TuneConfig, init_prefix, prefix_tune, verify_frozen
from unisumm.vocab import PAD_ID

pytestmark = pytest.mark.slow


def _op_cases(rng):
    other, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    weights = rng.normal(size=(3, 4))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    ids = np.array([[0, 2], [1, 1]])
    W = Tensor(weights)

    def dropped(x):
        return ad.tsum(ad.mul(ad.dropout(x, 0.3, np.random.default_rng(1)), W))

    return {
        "add": (lambda x: ad.tsum(ad.mul(ad.add(x, Tensor(other[0])), W)), (3, 4)),
        "neg": (lambda x: ad.tsum(ad.mul(ad.neg(x), W)), (3, 4)),
        "mul": (lambda x: ad.tsum(ad.mul(x, x)), (3, 4)),
        "exp": (lambda x: ad.tsum(ad.exp(x)), (3, 4)),
        "log": (lambda x: ad.tsum(ad.log(ad.add(ad.square(x), Tensor(1.0)))), (3, 4)),
        "square": (lambda x: ad.tsum(ad.mul(ad.square(x), W)), (3, 4)),
        "relu": (lambda x: ad.tsum(ad.mul(ad.relu(x), W)), (3, 4)),
        "gelu": (lambda x: ad.tsum(ad.mul(ad.gelu(x), W)), (3, 4)),
        "dropout": (dropped, (3, 4)),
        "tsum_axis": (lambda x: ad.tsum(ad.square(ad.tsum(x, axis=0))), (3, 4)),
        "mean": (lambda x: ad.tsum(ad.square(ad.mean(x, axis=1))), (3, 4)),
        "reshape": (lambda x: ad.tsum(ad.mul(ad.reshape(x, (3, 4)), W)), (2, 6)),
        "transpose": (lambda x: ad.tsum(ad.mul(ad.transpose(x, (1, 0)), W)), (4, 3)),
        "swapaxes": (lambda x: ad.tsum(ad.square(ad.swapaxes(x, 0, 2))), (2, 3, 4)),
        "broadcast_to": (lambda x: ad.tsum(ad.mul(ad.broadcast_to(x, (3, 4)), W)), (1, 4)),
        "concat": (lambda x: ad.tsum(ad.square(ad.concat([x, Tensor(other)], axis=0))), (2, 4)),
        "take": (lambda x: ad.tsum(ad.square(x[1:, ::2])), (3, 4)),
        "embedding": (lambda x: ad.tsum(ad.square(ad.embedding(x, ids))), (3, 4)),
        "matmul_a": (lambda x: ad.tsum(ad.square(ad.matmul(x, Tensor(w)))), (3, 4)),
        "matmul_b": (lambda x: ad.tsum(ad.square(ad.matmul(Tensor(other), x))), (4, 2)),
        "matmul_batched": (lambda x: ad.tsum(ad.square(ad.matmul(x, Tensor(w)))), (2, 3, 4)),
        "softmax_rows": (lambda x: ad.tsum(ad.mul(ad.softmax_rows(x), W)), (3, 4)),
        "layer_norm_x": (lambda x: ad.tsum(ad.mul(
            ad.layer_norm(x, Tensor(gamma), Tensor(beta)), W)), (3, 4)),
        "layer_norm_gamma": (lambda g: ad.tsum(ad.mul(
            ad.layer_norm(Tensor(other), g, Tensor(beta)), W)), (4,)),
        "layer_norm_beta": (lambda b: ad.tsum(ad.mul(
            ad.layer_norm(Tensor(other), Tensor(gamma), b), W)), (4,)),
        "cross_entropy": (lambda x: ad.cross_entropy(x, np.array([1, 0, 3])), (3, 4)),
    }


def test_criterion_1_gradients():
    rng = np.random.default_rng(0)
    worst = {}
    for name, (f, shape) in _op_cases(rng).items():
        worst[name] = grad_check(f, rng.normal(size=shape), eps=1e-4)

    cfg = ModelConfig(vocab_size=12, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                      d_ff=16, max_src_len=8, max_tgt_len=6, prefix_len=2)
    params = build_model(cfg, 0)
    prefix = PrefixParams.init_random(cfg, 1)
    src, tgt = [[5, 6, 7, 8], [9, 10, 5]], [[6, 7], [11, 5, 9]]

    def loss_with(store, pfx):
        logits, targets = forward_with_targets(store, pfx, src, tgt)
        return ad.cross_entropy(logits, targets, ignore_index=PAD_ID)

    for name in params:
        def f(x, name=name):
            store = ParameterStore({k: (x if k == name else Tensor(v.data))
                                    for k, v in params.items()}, cfg)
            return loss_with(store, prefix)
        worst[f"model:{name}"] = grad_check(f, params[name].data.copy(), eps=1e-4)
    for name in prefix:
        def g(x, name=name):
            pfx = PrefixParams({k: (x if k == name else Tensor(v.data))
                                for k, v in prefix.items()})
            return loss_with(params, pfx)
        worst[f"prefix:{name}"] = grad_check(g, prefix[name].data.copy(), eps=1e-4)

    top = max(worst, key=worst.get)
    ok = worst[top] <= 1e-4
    record_criterion(1, ok, f"{len(worst)} checks, max rel error {worst[top]:.2e} at {top}")
    assert ok


def test_criterion_2_plain_sgd_exact():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
        theta, theta_p = rng.normal(size=shape), rng.normal(size=shape)
        g, g_p = rng.normal(size=shape), rng.normal(size=shape)
        d_l, d_p = rng.uniform(0, 0.5), rng.uniform(0, 0.5)
        lr, lr_p = rng.uniform(1e-4, 1.0), rng.uniform(1e-4, 1.0)
        state = TrainState(0, ParameterStore({"w": Tensor(theta.copy())}, ModelConfig()),
                           PrefixBank({"t": PrefixParams({"blk": Tensor(theta_p.copy())})}))
        cfg = OptimizerConfig(kind="plain-sgd", learning_rate=lr, prefix_learning_rate=lr_p,
                              weight_decay=d_l, prefix_weight_decay=d_p, warmup_steps=0,
                              total_steps=10**12)
        asymmetric_decay_step(state, {"backbone/w": g, "prefix/t/blk": g_p}, cfg, "t")
        worst = max(worst,
                    np.abs(state.backbone["w"].data - ((1 - d_l) * theta - lr * g)).max(),
                    np.abs(state.bank["t"]["blk"].data - ((1 - d_p) * theta_p - lr_p * g_p)).max())
    ok = worst <= 1e-15
    record_criterion(2, ok, f"1000 pairs, max abs deviation {worst:.1e}")
    assert ok


def test_criterion_3_backbone_frozen(shipped_run):
    backbone, bank = shipped_run["backbone"], shipped_run["bank"]
    train, _ = heldout_datasets(load_config())[0]
    inits = ["random", "universal", f"from_task:{bank.task_ids[0]}"]
    results = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shots = [train[int(i)] for i in rng.choice(len(train), size=10, replace=False)]
        strategy = inits[seed % 3]
        cfg = TuneConfig(shots=10, steps=10, seed=seed)
        snapshot = backbone.copy()
        prefix_tune(backbone, init_prefix(strategy, bank, backbone.config, seed), shots, cfg)
        results.append(verify_frozen(snapshot, backbone))
    ok = all(results)
    record_criterion(3, ok, f"{sum(results)}/20 runs left the backbone bit-identical")
    assert ok


def test_criterion_4_universal_frequency():
    rng = np.random.default_rng(2024)
    hits = sum(select_prefix("task", rng, 0.15) == UNIVERSAL for _ in range(100_000))
    frac = hits / 100_000
    ok = 0.146 <= frac <= 0.154
    record_criterion(4, ok, f"UNIVERSAL fraction {frac:.5f}")
    assert ok


def test_criterion_5_rouge_oracles():
    rng = random.Random(5)
    bad = 0
    for _ in range(10_000):
        ref = [rng.choice("abcdef") for _ in range(rng.randint(0, 12))]
        hyp = [rng.choice("abcdef") for _ in range(rng.randint(0, 12))]
        for n in (1, 2):
            if abs(rouge_n(ref, hyp, n).f1 - f1(*multiset_overlap(ref, hyp, n))) > 1e-15:
                bad += 1
        if abs(rouge_l(ref, hyp).f1 - f1(lcs_table(ref, hyp), len(hyp), len(ref))) > 1e-15:
            bad += 1
    hand = score("the cat sat", "the cat")
    hand_ok = (abs(hand.rouge1.f1 - 0.8) < 1e-15 and abs(hand.rouge2.f1 - 2 / 3) < 1e-15
               and abs(hand.rougeL.f1 - 0.8) < 1e-15)
    ok = bad == 0 and hand_ok
    record_criterion(5, ok, f"{bad} oracle mismatches in 10000 pairs, hand case "
                            f"{hand.rouge1.f1:.4f}/{hand.rouge2.f1:.4f}/{hand.rougeL.f1:.4f}")
    assert ok


def test_criterion_6_bench_sweep(shipped_run, capsys):
    root = shipped_run["root"]
    report = RunReport.from_dict(shipped_run["report"])
    settings = BenchSettings()
    expected = 2 * len(settings.k_values) * settings.num_sets * len(settings.strategies)
    ok_cells = sum(c["status"] == "ok" for c in report.cells)
    deviation = report.verify_aggregates()

    test_ids = {i for _, test in heldout_datasets(load_config()) for i in test.ids}
    used = [json.loads(line) for line in (root / "bench/run_log.jsonl").read_text().splitlines()]
    leaked = sum(i in test_ids for rec in used for i in rec["example_ids"])
    leaked += sum(i in test_ids for c in report.cells for i in c.get("shot_ids", []))

    t0 = time.perf_counter()
    capsys.readouterr()
    code = main(["replay", str(root / "bench/manifest.json"), "--out", str(root / "replay")])
    replay = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    replay_seconds = time.perf_counter() - t0
    minutes = shipped_run["bench_seconds"] / 60

    ok = (ok_cells == expected == len(report.cells) and deviation <= 1e-12 and leaked == 0
          and code == 0 and replay["identical"] and minutes < 30)
    record_criterion(6, ok, f"{ok_cells}/{expected} cells ok, aggregate deviation "
                            f"{deviation:.1e}, {leaked} leaked ids, replay identical="
                            f"{replay['identical']}, sweep {minutes:.1f} min, "
                            f"replay {replay_seconds / 60:.1f} min")
    assert ok


def test_criterion_7_transfer(shipped_run):
    backbone, bank = shipped_run["backbone"], shipped_run["bank"]
    report = RunReport.from_dict(shipped_run["report"])
    settings = BenchSettings()
    rand = build_model(backbone.config, 987654321, vocab=backbone.vocab)
    gaps = {}
    for train, test in heldout_datasets(load_config()):
        pre = float(np.mean(transfer_losses(backbone, train, test, 10, settings)))
        scratch = float(np.mean(transfer_losses(rand, train, test, 10, settings)))
        gaps[train.task_id] = (pre, scratch, 1 - pre / scratch)
    part_a = all(rel >= 0.10 for _, _, rel in gaps.values())

    def suite_mean(init):
        vals = [a["rouge1"]["mean"] for a in report.aggregates if a["init"] == init]
        return float(np.mean(vals))

    uni, rnd = suite_mean("universal"), suite_mean("random")
    part_b = uni >= rnd - 0.01
    detail = ", ".join(f"{t} eval loss {p:.3f} vs random backbone {s:.3f} ({100 * r:.1f}% lower)"
                       for t, (p, s, r) in gaps.items())
    record_criterion("7a", part_a, detail)
    record_criterion("7b", part_b, f"universal R1 {uni:.4f} vs random-init R1 {rnd:.4f}")
    assert part_a and part_b


def test_criterion_8_balancing():
    ds = Dataset("big", "train_pool",
                 [Example(f"e{i}", "d", "s") for i in range(23_455)])
    corpus = balance_datasets(TaskRegistry([("big", ds, 113_694)]), seed=0)
    counts = np.bincount([int(ex.id[1:]) for _, ex in corpus], minlength=23_455)
    ok = len(corpus) == 113_694 and set(counts.tolist()) <= {4, 5}
    record_criterion(8, ok, f"{len(corpus)} items, multiplicities {sorted(set(counts.tolist()))}")
    assert ok


def test_tuning_reduces_train_loss(shipped_run):
    # k=10 cells at default settings end at <= 60% of their first-step loss
    cells = [c for c in shipped_run["report"]["cells"] if c["k"] == 10 and c["status"] == "ok"]
    ratios = [c["final_train_loss"] / c["initial_train_loss"] for c in cells]
    assert max(ratios) <= 0.6, max(ratios)
