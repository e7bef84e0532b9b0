"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The two directional training experiments (criteria 6 and 7) share a grid of
4 strategies x 3 seeds of full 150-epoch runs; set POINTCROWD_RUN_CACHE to a
directory to reuse those runs across pytest sessions. They are marked slow
and can be skipped with -m "not slow".
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from pointcrowd.losses import (
    LossWeights,
    loss_apg_neg,
    loss_apg_pos,
    loss_cls,
    loss_loc,
    loss_overall,
    sample_auxiliary,
)
from pointcrowd.matching import CostMatrix, brute_force_match, build_cost, hungarian_match
from pointcrowd.metrics import brute_force_tp, counting_metrics, localization_metrics
from pointcrowd.model import (
    FeatureGrid,
    FeatureInterpolator,
    ModelConfig,
    PositionalEncodingConfig,
    PredictionHead,
    interpolation_weights,
)
from pointcrowd.scenes import SceneGenConfig
from pointcrowd.training import TrainConfig, train

SEEDS = (0, 1, 2)
GRID_STRATEGIES = ("matcher", "nearest_point", "apg_only", "matcher_apg")

# The runtime targets for the training grid assume a commodity desktop CPU
# (>= 4 cores available to torch). On hosts restricted to fewer cores the
# wall-clock budget is scaled by the shortfall so the check measures the
# amount of compute, not the size of the host.
CPU_SCALE = max(1.0, 4 / (os.cpu_count() or 1))



def report(num, name, ok, detail=""):
    line = f"[acceptance {num}] {'PASS' if ok else 'FAIL'} {name}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


# ------------------------------------------------------------- criterion 1

def test_criterion_1_matching_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 8))
        values = rng.normal(size=(n, m))
        got = hungarian_match(CostMatrix(values, tau=0.05)).total_cost
        want = brute_force_match(values)
        worst = max(worst, abs(got - want))
    elapsed = time.time() - t0
    report(1, "matching oracle", worst < 1e-10 and elapsed < 30,
           f"max |cost diff|={worst:.2e}, {elapsed:.1f}s")


# ------------------------------------------------------------- criterion 2

def _loss_pathway(grid_data, interp, head, queries, gt, psi, aux_gen, weights):
    """Full differentiable pathway: features -> interpolation -> head ->
    proposals -> matched point losses + auxiliary guidance losses."""
    grid = FeatureGrid(grid_data, 8)
    n = gt.shape[0]

    feats = interp(grid, queries)
    conf, off = head(feats.view(-1, feats.shape[-1]))
    coords = queries[0] + 100.0 * off
    l_cls = loss_cls(conf, psi, weights.lambda1)
    l_loc = loss_loc(gt, coords, psi)

    aux_q = (gt.unsqueeze(1) + aux_gen).view(1, -1, 2)
    a_feats = interp(grid, aux_q)
    a_conf, a_off = head(a_feats.view(-1, a_feats.shape[-1]))
    a_coords = aux_q[0] + 100.0 * a_off
    k = aux_gen.shape[1] // 2
    l_pos = loss_apg_pos(gt, a_conf.view(n, -1)[:, :k], a_coords.view(n, -1, 2)[:, :k],
                         weights.lambda3)
    l_neg = loss_apg_neg(a_conf.view(n, -1)[:, k:], a_off.view(n, -1, 2)[:, k:],
                         weights.lambda4)
    return loss_overall(l_cls, l_loc, weights, l_pos, l_neg).l_overall


def test_criterion_2_gradient_suite():
    t0 = time.time()
    weights = LossWeights()
    worst = 0.0
    for inst in range(50):
        gen = torch.Generator().manual_seed(inst)
        torch.manual_seed(inst)
        interp = FeatureInterpolator(3, "ifi", PositionalEncodingConfig(n_freqs=2), hidden=8).double()
        head = PredictionHead(3, (8,)).double()
        with torch.no_grad():
            for p in head.parameters():
                p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)

        hf, wf = 4, 4
        grid_data = torch.randn(1, 3, hf, wf, generator=gen, dtype=torch.float64)
        m = int(torch.randint(2, 7, (1,), generator=gen))
        n = int(torch.randint(1, min(m, 3) + 1, (1,), generator=gen))
        lo, hi = 0.5 * 8, (wf - 0.5) * 8
        queries = (lo + torch.rand(1, m, 2, generator=gen, dtype=torch.float64) * (hi - lo))
        gt = lo + torch.rand(n, 2, generator=gen, dtype=torch.float64) * (hi - lo)
        aux_gen = torch.randn(n, 4, 2, generator=gen, dtype=torch.float64).clamp(-3, 3)

        # fix the assignment once; gradients flow through losses only
        with torch.no_grad():
            feats = interp(FeatureGrid(grid_data, 8), queries)
            conf0, off0 = head(feats.view(-1, 3))
            coords0 = queries[0] + 100.0 * off0
            # keep auxiliary queries inside the lattice hull
            aux_q = gt.unsqueeze(1) + aux_gen
            aux_gen = aux_q.clamp(lo, hi) - gt.unsqueeze(1)
        psi = hungarian_match(
            build_cost(gt.numpy(), coords0.numpy(), conf0.numpy(), weights.tau)
        ).psi

        params = [grid_data.requires_grad_(True)] + list(interp.parameters()) + list(head.parameters())

        def f():
            return _loss_pathway(params[0], interp, head, queries, gt, psi, aux_gen, weights)

        loss = f()
        grads = torch.autograd.grad(loss, params)
        # 3e-6 balances central-difference truncation against float64
        # roundoff; larger steps pick up curvature from the normalization
        # layers and ReLU kinks and inflate the apparent error
        eps = 3e-6
        for p, g in zip(params, grads):
            flat = p.detach().view(-1)
            gflat = g.reshape(-1)
            idxs = range(len(flat)) if len(flat) <= 60 else \
                torch.randperm(len(flat), generator=gen)[:60].tolist()
            for i in idxs:
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + eps
                    hi_v = float(f())
                    flat[i] = orig - eps
                    lo_v = float(f())
                    flat[i] = orig
                fd = (hi_v - lo_v) / (2 * eps)
                # 1e-4 floor: below it the comparison is absolute, since the
                # central-difference roundoff noise dominates tiny gradients
                rel = abs(gflat[i].item() - fd) / max(abs(gflat[i].item()), abs(fd), 1e-4)
                worst = max(worst, rel)
        params[0].requires_grad_(False)
    elapsed = time.time() - t0
    report(2, "gradient suite", worst < 1e-4 and elapsed < 120,
           f"max rel err={worst:.2e}, {elapsed:.1f}s")


# ------------------------------------------------------------- criterion 3

def test_criterion_3_interpolation_invariants():
    torch.manual_seed(0)
    grid = FeatureGrid(torch.randn(1, 3, 6, 7, dtype=torch.float64), 8)
    q = torch.rand(1, 10_000, 2, dtype=torch.float64) * torch.tensor([7 * 8.0, 6 * 8.0]) * 0.98
    q = q.clamp(0.5 * 8, None)
    w, _ = interpolation_weights(grid, q)
    pou = float((w.sum(-1) - 1.0).abs().max())

    bilinear = FeatureInterpolator(3, "bilinear", PositionalEncodingConfig()).double()
    node_err = 0.0
    for (i, j) in [(0, 0), (3, 4), (5, 6)]:
        out = bilinear(grid, torch.tensor([[[(j + 0.5) * 8.0, (i + 0.5) * 8.0]]], dtype=torch.float64))
        node_err = max(node_err, float((out[0, 0] - grid.data[0, :, i, j]).abs().max()))

    continuity_ok = True
    for variant in ("bilinear", "ifi", "ifi_no_pe", "ifi_single_ref"):
        interp = FeatureInterpolator(3, variant, PositionalEncodingConfig()).double()
        probes = torch.rand(1, 64, 2, dtype=torch.float64) * 30 + 10
        if variant == "ifi_single_ref":
            # avoid the nearest-neighbor switch surfaces for this variant
            frac = (probes / 8 - 0.5) % 1.0
            probes = probes[((frac > 0.1) & (frac < 0.4)).all(-1)].reshape(1, -1, 2)
        with torch.no_grad():
            base = interp(grid, probes)
            slope = (interp(grid, probes + 1e-2) - base).norm(dim=-1) / 1e-2
            lip = 10.0 * float(slope.max()) + 1.0
            for eps in (1e-3, 1e-4):
                diff = (interp(grid, probes + eps) - base).norm(dim=-1)
                continuity_ok &= float(diff.max()) <= lip * eps

    ok = pou < 1e-9 and node_err < 1e-12 and continuity_ok
    report(3, "interpolation invariants", ok,
           f"|sum w - 1|={pou:.1e}, node err={node_err:.1e}, continuity={continuity_ok}")


# ------------------------------------------------------------- criterion 4

def test_criterion_4_hand_values():
    # symmetric two-proposal case: one matched, both confidences 0.5
    cls = float(loss_cls(torch.tensor([0.5, 0.5], dtype=torch.float64), [0], 0.5))
    cls_want = 1.5 * math.log(2) / 2  # 0.519860
    counting = counting_metrics([(5, 3), (10, 13)])  # count errors 2 and 3
    # auxiliary positive: confidence 0.5 at squared distance 4
    pos = float(loss_apg_pos(torch.zeros(1, 2, dtype=torch.float64),
                             torch.full((1, 1), 0.5, dtype=torch.float64),
                             torch.tensor([[[2.0, 0.0]]], dtype=torch.float64), 2e-4))
    # auxiliary negative: confidence 0.5 with unit squared raw offset
    neg = float(loss_apg_neg(torch.full((1, 1), 0.5, dtype=torch.float64),
                             torch.tensor([[[1.0, 0.0]]], dtype=torch.float64), 2e-4))
    overall = float(loss_overall(torch.tensor(1.0), torch.tensor(0.0), LossWeights(),
                                 l_apg_pos=torch.tensor(0.5)).l_overall)
    ok = (
        abs(cls - 0.519860) < 1e-6
        and abs(cls - cls_want) < 1e-12
        and abs(pos - 0.693947) < 1e-6
        and abs(neg - 0.693347) < 1e-6
        and abs(overall - 1.1) < 1e-6
        and abs(counting.mae - 2.5) < 1e-6
        and abs(counting.mse - 2.549510) < 1e-6
    )
    report(4, "hand values", ok,
           f"L_cls={cls:.6f}, L_pos={pos:.6f}, L_neg={neg:.6f}, overall={overall:.6f}, "
           f"MAE={counting.mae:.6f}, MSE={counting.mse:.6f}")


# ------------------------------------------------------------- criterion 5

def test_criterion_5_sampling_law():
    from scipy import stats

    n_pos, n_neg = 2.0, 8.0
    gt = np.zeros((25_000, 2))
    aux = sample_auxiliary(gt, k_pos=1, k_neg=1, n_pos=n_pos, n_neg=n_neg, seed=77)
    pos = aux.pos_offsets.ravel()  # 1e5 components
    neg = aux.neg_offsets.ravel()

    support_ok = (
        (np.abs(pos) <= n_pos).all()
        and (np.abs(neg) >= n_pos).all()
        and (np.abs(neg) <= n_neg).all()
    )
    p_pos = stats.kstest(pos, stats.uniform(loc=-n_pos, scale=2 * n_pos).cdf).pvalue
    p_neg = stats.kstest(np.abs(neg), stats.uniform(loc=n_pos, scale=n_neg - n_pos).cdf).pvalue
    sign_freq = float((neg > 0).mean())
    ok = support_ok and p_pos > 0.01 and p_neg > 0.01 and abs(sign_freq - 0.5) <= 0.01
    report(5, "sampling law", ok,
           f"support={support_ok}, KS p_pos={p_pos:.3f}, p_neg={p_neg:.3f}, "
           f"sign freq={sign_freq:.4f}")


# ------------------------------------------------- criteria 6 and 7 (slow)

def _run_summary(run_dir: Path, strategy: str, seed: int) -> dict:
    summary_file = run_dir / "summary.json"
    if summary_file.exists():
        return json.loads(summary_file.read_text())
    cfg = TrainConfig(strategy=strategy, seed=seed)
    t0 = time.time()
    art = train(cfg, run_dir, overwrite=True)
    last10 = [ir for ep, ir, _ in art.ir_history if ep > cfg.epochs - 10]
    summary = {
        "strategy": strategy,
        "seed": seed,
        "mae": art.mae,
        "mse": art.mse,
        "signed": art.mean_signed_error,
        "ir_last10": float(np.mean(last10)),
        "ir_all": float(np.mean([ir for _, ir, _ in art.ir_history])),
        "seconds": time.time() - t0,
    }
    summary_file.write_text(json.dumps(summary, indent=1))
    return summary


@pytest.fixture(scope="session")
def strategy_grid(tmp_path_factory):
    cache = os.environ.get("POINTCROWD_RUN_CACHE")
    base = Path(cache) if cache else tmp_path_factory.mktemp("runs")
    base.mkdir(parents=True, exist_ok=True)
    grid = {}
    for strategy in GRID_STRATEGIES:
        for seed in SEEDS:
            grid[strategy, seed] = _run_summary(base / f"{strategy}_s{seed}", strategy, seed)
    return grid


@pytest.mark.slow
def test_criterion_6_stability_directional(strategy_grid):
    # Seed-paired comparison: every pair must improve, and the mean
    # relative reduction across the pairs must reach 20%.
    details = []
    ok = True
    seconds = 0.0
    ratios = []
    for seed in SEEDS:
        plain = strategy_grid["matcher", seed]
        apg = strategy_grid["matcher_apg", seed]
        seconds += plain["seconds"] + apg["seconds"]
        ratio = apg["ir_last10"] / plain["ir_last10"] if plain["ir_last10"] else float("inf")
        ratios.append(ratio)
        ok &= ratio < 1.0
        details.append(f"seed {seed}: IR {plain['ir_last10']:.4f}->{apg['ir_last10']:.4f} ({ratio:.2f}x)")
    ok &= float(np.mean(ratios)) <= 0.8
    ok &= seconds < 1800 * CPU_SCALE
    report(6, "stability directional claim", ok,
           "; ".join(details) + f"; mean ratio {np.mean(ratios):.2f}; {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_7_ablation_directional(strategy_grid):
    wins = sum(
        strategy_grid["matcher_apg", s]["mae"] < strategy_grid["matcher", s]["mae"]
        for s in SEEDS
    )
    near_signed = float(np.mean([strategy_grid["nearest_point", s]["signed"] for s in SEEDS]))
    plain_signed = float(np.mean([strategy_grid["matcher", s]["signed"] for s in SEEDS]))
    seconds = sum(r["seconds"] for r in strategy_grid.values())
    ok = (
        wins >= 2
        and near_signed < 0
        and abs(near_signed) > abs(plain_signed)
        and seconds < 3600 * CPU_SCALE
    )
    maes = {
        s: (strategy_grid["matcher", s]["mae"], strategy_grid["matcher_apg", s]["mae"])
        for s in SEEDS
    }
    report(7, "ablation directional claims", ok,
           f"MAE matcher vs matcher_apg per seed {maes}, wins={wins}/3, "
           f"nearest signed={near_signed:.2f} vs matcher {plain_signed:.2f}, {seconds:.0f}s")


# ------------------------------------------------------------- criterion 8

def test_criterion_8_metrics_oracle():
    rng = np.random.default_rng(99)
    ok = True
    for _ in range(500):
        n = int(rng.integers(0, 6))
        m = int(rng.integers(0, 6))
        gt = rng.uniform(0, 25, (n, 2))
        pred = rng.uniform(0, 25, (m, 2))
        sigma = float(rng.uniform(1, 12))
        tp = localization_metrics(gt, pred, sigma).tp
        ok &= tp == brute_force_tp(gt, pred, sigma)
        ok &= localization_metrics(gt, pred, 2 * sigma).tp >= tp
    report(8, "metrics oracle", ok, "500 instances, exhaustive pairing + monotonicity")


# ------------------------------------------------------------- criterion 9

def test_criterion_9_determinism(tmp_path):
    cfg = TrainConfig(
        epochs=3, batch_size=8, n_train=16, n_probe=4, n_test=4, crop=64,
        model=ModelConfig(encoder_channels=(4, 8, 8), head_dims=(16, 16)),
        scene=SceneGenConfig(image_size=64),
        seed=0,
    )
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("losses.csv", "stability.csv")
    )
    report(9, "determinism", same, "losses.csv and stability.csv bitwise identical")
