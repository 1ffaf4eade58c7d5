"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` (the lines are also
printed without ``-s``). The end-to-end criterion trains the default model on
200 synthetic cases and takes most of half an hour on one CPU core.
"""

import json
import time

import numpy as np
import torch

from conftest import tiny_model_config
from dgsan.cli import run_command
from dgsan.data import synthesize_dataset
from dgsan.dualgraph import GAT, FeatureGraph, GATLayer, NodeBank, build_graphs
from dgsan.glfe import AFF, AGCA, GLFE, EncoderConfig, SwinBlock, hwd, shift_mask
from dgsan.gradcheck import OPS, gradient_check
from dgsan.hcmgfm import HCMGFM, CrossAttentionBlock, SelfAttentionBlock, fuse
from dgsan.metrics import compute_auc, evaluate_metrics
from dgsan.model import variant_config
from dgsan.training import TrainConfig, ablation_split, pretrain_glfe, run_ablation, train_dgsan

from test_metrics import brute_confusion, pairwise_auc


def report(capsys, number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# 1 ------------------------------------------------------------------------------------


def test_01_gradient_suite(capsys):
    start = time.perf_counter()
    reports = [gradient_check(op, seed) for op in OPS for seed in range(3)]
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = len(reports) == 24 and worst.max_rel_error <= 1e-4 and elapsed < 120
    report(capsys, 1, "gradient suite", ok,
           f"{len(reports)} checks, worst {worst.max_rel_error:.2e} ({worst.op}), {elapsed:.0f}s")


# 2 ------------------------------------------------------------------------------------


def test_02_attention_normalization(capsys):
    torch.manual_seed(0)
    errs = {}
    for shifted, name in ((False, "W-MSA"), (True, "SW-MSA")):
        blk = SwinBlock(8, 2, window_size=4, shifted=shifted)
        blk(torch.randn(2, 8, 8, 8, 8))
        errs[name] = (blk.attn.last_attention.sum(-1) - 1).abs().max().item()
        if shifted:
            mask = shift_mask((8, 8, 8), (4, 4, 4), (2, 2, 2))
            attn = blk.attn.last_attention.view(2, *mask.shape[:1], 2, 64, 64)
            wrapped = attn[(mask != 0)[None, :, None].expand_as(attn)].max().item()
    layer = GATLayer(8, 8, heads=2)
    X = torch.randn(5, 8)
    layer(X, FeatureGraph.fully_connected(X, [str(i) for i in range(5)]).adjacency())
    errs["GAT"] = (layer.last_attention.sum(dim=2) - 1).abs().max().item()
    # GAT on a graph with missing edges: absent neighbours must get ~0 weight
    g = FeatureGraph(X, [(0, 1), (1, 0), (2, 3), (3, 2)], [str(i) for i in range(5)])
    layer(X, g.adjacency())
    absent = ~g.adjacency().bool()
    gat_masked = layer.last_attention[0][absent].max().item()  # (n, n, heads) per graph
    sab = SelfAttentionBlock(8, 2)
    sab(torch.randn(4, 8))
    errs["SAB"] = (sab.attn.last_attention.sum(-1) - 1).abs().max().item()
    cab = CrossAttentionBlock(8, 2)
    cab(torch.randn(4, 8), torch.randn(3, 8))
    errs["CAB"] = max((d.attn.last_attention.sum(-1) - 1).abs().max().item() for d in (cab.a_from_b, cab.b_from_a))
    ok = max(errs.values()) <= 1e-6 and wrapped < 1e-8 and gat_masked < 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(capsys, 2, "attention normalization", ok,
           f"row-sum error {detail}; wrapped max {wrapped:.1e}; GAT masked max {gat_masked:.1e}")


# 3 ------------------------------------------------------------------------------------


def test_03_gat_permutation_equivariance(capsys):
    devs = {}
    for n in (2, 3, 5, 8):
        torch.manual_seed(n)
        gat = GAT(16, heads=2)
        X = torch.randn(n, 16)
        tags = [str(i) for i in range(n)]
        perm = torch.randperm(n)
        with torch.no_grad():
            out = gat(FeatureGraph.fully_connected(X, tags))
            out_p = gat(FeatureGraph.fully_connected(X[perm], tags))
        devs[n] = (out_p - out[perm]).abs().max().item()
    report(capsys, 3, "GAT permutation equivariance", max(devs.values()) <= 1e-5,
           ", ".join(f"n={n} {d:.1e}" for n, d in devs.items()))


# 4 ------------------------------------------------------------------------------------


def test_04_hand_oracles(capsys):
    agca = AGCA(2)
    with torch.no_grad():
        for conv in (agca.embed_in, agca.embed_out):
            conv.weight.copy_(torch.eye(2)[:, :, None, None, None])
            conv.bias.zero_()
    m = torch.empty(1, 2, 2, 2, 2)
    m[:, 0], m[:, 1] = 1.0, -1.0
    gate = agca.gate(m)[0].flatten()
    gate_err = (gate - torch.tensor([0.73106, 0.5])).abs().max().item()

    torch.manual_seed(0)
    aff = AFF(8, prev_channels=4)
    with torch.no_grad():
        aff.conv.weight.zero_()
        aff.conv.bias.zero_()
    f_prev = torch.randn(1, 4, 4, 8, 8)
    out = aff(torch.randn(1, 8, 2, 4, 4), torch.randn(1, 8, 2, 4, 4), f_prev)
    exact = torch.equal(out, aff.pool_prev(f_prev))
    report(capsys, 4, "AGCA/AFF hand oracles", gate_err <= 1e-5 and exact,
           f"gates {[round(g, 5) for g in gate.tolist()]} (err {gate_err:.1e}); zero-weight AFF residual exact={exact}")


# 5 ------------------------------------------------------------------------------------


def test_05_structural_counts(capsys):
    torch.manual_seed(0)
    glfe = GLFE(EncoderConfig())
    with torch.no_grad():
        feats = {t: glfe(torch.rand(1, 16, 64, 64)) for t in ("t0", "t1")}
        graphs = build_graphs(feats, torch.randn(1, 224), 5, NodeBank([16, 32, 64, 128], 224))
        rep = fuse(torch.randn(1, 16, 224), torch.randn(1, 3, 224), HCMGFM())
    nodes = [g.n for g in graphs.all]
    edges = [len(g.edges) for g in graphs.all]
    chain = [hwd(f.shape) for f in feats["t0"].F]
    tokens = rep.tokens.shape[1]
    ok = (nodes == [8, 8, 3] and edges == [56, 56, 6]
          and chain == [(16, 16, 8), (8, 8, 4), (4, 4, 2), (2, 2, 1)] and tokens == 19)
    report(capsys, 5, "structural counts", ok,
           f"nodes {nodes}, edges {edges}, chain {' -> '.join('x'.join(map(str, c)) for c in chain)}, tokens {tokens}")


# 6 ------------------------------------------------------------------------------------


def test_06_parameter_budget(capsys, tmp_path):
    cfg = tmp_path / "default.json"
    cfg.write_text("{}")
    code = run_command(["params", "--config", str(cfg)])
    line = capsys.readouterr().out.strip().splitlines()[-1]
    total = int(line.split()[1])
    report(capsys, 6, "parameter budget", code == 0 and 3.5e6 <= total <= 5.0e6,
           f"{line} (window 3.5M-5.0M, reference 4.21M)")


# 7 ------------------------------------------------------------------------------------


def test_07_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    confusion_ok, worst_auc = 0, 0.0
    for i in range(1000):
        n = int(rng.integers(2, 40))
        # mix continuous and coarse scores so ties occur
        scores = rng.random(n) if i % 2 else rng.integers(0, 5, n) / 4
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        threshold = float(rng.random())
        m = evaluate_metrics(scores, labels, threshold)
        confusion_ok += m.confusion == brute_confusion(scores, labels, threshold)
        worst_auc = max(worst_auc, abs(compute_auc(scores, labels)[0] - pairwise_auc(scores, labels)))
    report(capsys, 7, "metric oracles", confusion_ok == 1000 and worst_auc <= 1e-9,
           f"confusion exact on {confusion_ok}/1000, max AUC deviation {worst_auc:.1e}")


# 8 ------------------------------------------------------------------------------------


def test_08_synthetic_end_to_end(capsys, tmp_path):
    start = time.perf_counter()
    data = tmp_path / "syn"
    assert run_command(["synth", "--out", str(data), "--cases", "200", "--seed", "1"]) == 0
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"train": {"epochs": 30}}))
    code = run_command(["train", "--manifest", str(data / "manifest.json"), "--config", str(cfg),
                        "--out", str(tmp_path / "cv"), "--folds", "5"])
    elapsed = time.perf_counter() - start
    cv = json.loads((tmp_path / "cv" / "cv.json").read_text())
    aucs = [f["auc"] for f in cv["folds"]]
    mean_auc = cv["summary"]["auc"]["mean"]
    ok = code == 0 and mean_auc >= 0.85 and elapsed <= 30 * 60
    report(capsys, 8, "synthetic end-to-end", ok,
           f"mean held-out AUC {mean_auc:.4f} (folds {[round(a, 3) for a in aucs]}), {elapsed / 60:.1f} min")


# 9 ------------------------------------------------------------------------------------

ABLATION_CASES = 200
ABLATION_VARIANTS = ["full", "t0_only", "t1_only", "no_GFF", "no_HCC_GFF"]


def test_09_ablation_direction(capsys, tmp_path):
    # encoder pretraining on the training ids, then every variant fine-tunes from it
    manifest = synthesize_dataset(ABLATION_CASES, 1, tmp_path / "syn")
    small = tiny_model_config()
    wins, rows = 0, []
    for seed in range(5):
        cfg = TrainConfig(epochs=20, lr=1e-3, seed=seed)
        train_ids, _ = ablation_split(manifest, cfg)
        pre = tmp_path / f"glfe{seed}"
        pretrain_glfe(manifest, small.encoder, TrainConfig(epochs=10, lr=5e-3, seed=seed), pre, train_ids)
        table = run_ablation(manifest, ABLATION_VARIANTS, small, cfg, glfe_checkpoint=pre)
        auc = {v: table[v].auc for v in ABLATION_VARIANTS}
        won = all(auc["full"] >= auc[v] for v in ABLATION_VARIANTS[1:])
        wins += won
        rows.append(f"seed {seed} {'ok' if won else 'no'} " + " ".join(f"{v}={a:.3f}" for v, a in auc.items()))
    with capsys.disabled():
        print("\n" + "\n".join("      " + r for r in rows))
    report(capsys, 9, "ablation direction", wins >= 3, f"full >= every ablation on {wins}/5 seeds")


# 10 -----------------------------------------------------------------------------------

SEQUENCES = ["CAB,CAB", "SAB,SAB", "SAB,CAB", "CAB,SAB", "CAB,SAB,CAB", "SAB,CAB,SAB"]


def test_10_smoke_matrix(capsys, syn10):
    failures = []
    variants = [f"seq:{s}" for s in SEQUENCES] + [f"scheme{k}" for k in range(1, 6)]
    for name in variants:
        try:
            cfg = variant_config(tiny_model_config(), name)
            _, hist = train_dgsan(syn10, None, cfg, TrainConfig(epochs=1, batch_size=4))
            if not np.isfinite(hist[0]):
                failures.append(f"{name}: loss {hist[0]}")
        except Exception as exc:  # collect every failure, not just the first
            failures.append(f"{name}: {exc}")
    report(capsys, 10, "smoke matrix", not failures,
           f"{len(variants) - len(failures)}/{len(variants)} configurations trained one epoch"
           + (f"; failed: {failures}" if failures else ""))
