"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed in the terminal summary (see conftest.py).
Criteria 6 to 8 train real models and take the better part of an hour each
on one CPU core; they carry the ``slow`` marker so ``-m "not slow"`` skips them.
"""

import hashlib
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, random_connected
from fdcheck import relative_error
from srcloc.cli import main as cli_main
from srcloc.cli import split_indices
from srcloc.denoiser import DenoiserConfig, TorchGraph, init_params
from srcloc.diffusion import forward_sample, forward_step, make_schedule, posterior_mean_var, training_loss
from srcloc.evaluation import calibrated_evaluation, evaluate_model, score, score_all
from srcloc.graph import closeness_centrality, derive_operators, generate_graph
from srcloc.prior import LpsiConfig, lpsi_closed, lpsi_iterate, lpsi_predict
from srcloc.propagation import PropagationConfig, generate_dataset
from srcloc.train import TrainConfig, few_shot_subset, prepare, train


def record(number: int, ok: bool, detail: str):
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def test_criterion_01_diffusion_identities():
    t0 = time.perf_counter()
    s = make_schedule()
    xe = np.random.default_rng(0).random(64)
    fixed = max(np.max(np.abs(posterior_mean_var(xe, xe, xe, t, s)[0] - xe)) for t in range(1, 501))
    rng = np.random.default_rng(1)
    xt, x0 = rng.standard_normal(64), rng.random(64)
    reduction = 0.0
    for t in range(1, 501):
        ab, abp, a, b = s.alpha_bar[t - 1], (s.alpha_bar[t - 2] if t > 1 else 1.0), s.alpha[t - 1], s.beta[t - 1]
        ref = np.sqrt(abp) * b / (1 - ab) * x0 + np.sqrt(a) * (1 - abp) / (1 - ab) * xt
        reduction = max(reduction, np.max(np.abs(posterior_mean_var(xt, x0, np.zeros(64), t, s)[0] - ref)))
    secs = time.perf_counter() - t0
    record(1, fixed <= 1e-12 and reduction <= 1e-12 and secs < 1.0,
           f"fixed-point err {fixed:.1e}, zero-prior err {reduction:.1e} (<= 1e-12), {secs:.2f}s")


def test_criterion_02_forward_consistency():
    t0 = time.perf_counter()
    s = make_schedule()
    m, v, rec = 1.0, 0.0, 0.0
    for t in range(1, 501):
        m *= np.sqrt(s.alpha[t - 1])
        v = s.alpha[t - 1] * v + s.beta[t - 1]
        rec = max(rec, abs(m - np.sqrt(s.alpha_bar[t - 1])), abs(v - (1 - s.alpha_bar[t - 1])))
    n, x0, xe = 100_000, 1.0, 0.3
    worst_z, worst_var = 0.0, 0.0
    for t in (1, 50, 500):
        rng = np.random.default_rng(t)
        x = np.full(n, x0)
        for k in range(1, t + 1):
            x = forward_step(x, xe, k, s, rng=rng)
        closed = forward_sample(np.full(n, x0), np.full(n, xe), t, s, rng=10 + t)
        ab = s.alpha_bar[t - 1]
        mean = np.sqrt(ab) * x0 + (1 - np.sqrt(ab)) * xe
        se = np.sqrt((1 - ab) / n)
        for draws in (x, closed):
            worst_z = max(worst_z, abs(draws.mean() - mean) / se)
            worst_var = max(worst_var, abs(draws.var() / (1 - ab) - 1))
    secs = time.perf_counter() - t0
    record(2, rec <= 1e-12 and worst_z <= 3 and worst_var <= 0.02 and secs < 60,
           f"recurrence err {rec:.1e}, worst mean {worst_z:.2f} SE (<= 3), worst var {100 * worst_var:.2f}% (<= 2%), "
           f"{secs:.1f}s")


def test_criterion_03_lpsi_solver_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 101))
        g = random_connected(n, seed)
        alpha = (0.1, 0.5, 0.9)[seed % 3]
        y = (rng.random(n) < 0.3).astype(int)
        ops = derive_operators(g)
        z_it = lpsi_iterate(y, ops, LpsiConfig(alpha=alpha, tol=1e-10, max_iter=100_000))
        worst = max(worst, np.max(np.abs(z_it - lpsi_closed(y, ops, alpha))))
    secs = time.perf_counter() - t0
    record(3, worst <= 1e-6 and secs < 10, f"max |iterative - direct| {worst:.1e} over 20 graphs (<= 1e-6), {secs:.2f}s")


def test_criterion_04_gradient_correctness():
    from test_denoiser import _primitive_cases

    t0 = time.perf_counter()
    errs = {name: relative_error(fn, inputs) for name, (fn, inputs) in _primitive_cases(12).items()}
    g = random_connected(10, 5)
    tg = TorchGraph(derive_operators(g))
    model = init_params(DenoiserConfig(hidden_dim=6, cond_dim=3), 0, torch.float64)
    sched = make_schedule()
    rng = torch.Generator().manual_seed(0)
    x0 = (torch.rand(2, 10, generator=rng) < 0.3).double()
    xe = torch.rand(2, 10, generator=rng, dtype=torch.float64)
    y = torch.maximum(x0, (torch.rand(2, 10, generator=rng) < 0.5).double())
    t = torch.tensor([40, 310])
    noise = torch.randn(2, 10, generator=rng, dtype=torch.float64)
    names = [k for k, _ in model.named_parameters()]

    def loss(*ps):
        state = dict(zip(names, ps))
        f = lambda a, b, c, d: torch.func.functional_call(model, state, (a, b, c, d, tg))
        return training_loss(f, x0, xe, y, sched, t=t, noise=noise)

    errs["denoiser"] = relative_error(loss, [p.detach() for p in model.parameters()])
    worst = max(errs, key=errs.get)
    secs = time.perf_counter() - t0
    record(4, errs[worst] <= 1e-4 and secs < 120,
           f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.1e} (<= 1e-4), {secs:.1f}s")


def test_criterion_05_oracle_end_to_end():
    from test_evaluation import Oracle

    g = generate_graph("watts-strogatz", seed=0, n=198, k=6, p=0.1)
    ops = derive_operators(g)
    ds = generate_dataset(g, [(PropagationConfig(model="IC"), 1.0), (PropagationConfig(model="LT"), 1.0)], 100, seed=5)
    data = prepare(ds, g, ops)
    # timed: the reverse chains and thresholding, not data generation
    t0 = time.perf_counter()
    report = evaluate_model(Oracle(data), data, make_schedule(), n_samples=8)
    perfect = sum(c.f1 == 1.0 for _, c in report.rows)
    secs = time.perf_counter() - t0
    record(5, perfect == len(report.rows) and secs < 10,
           f"F1 = 1.0 on {perfect}/{len(report.rows)} samples, {secs:.1f}s")


# training criteria -----------------------------------------------------------
#
# Models are trained for a fixed number of epochs with the learning rate
# decaying linearly to zero and the last epoch kept (no in-loop validation).
# The decision threshold is then calibrated on the validation split and the
# test split is scored once with it; the fixed 0.5 cut is reported alongside.


def splits(g, mixture, seed, count=800, prior="lpsi", alpha=0.5):
    ops = derive_operators(g)
    ds = generate_dataset(g, mixture, count, seed=seed)
    idx = split_indices(count, seed)
    return {k: prepare(ds.subset(v), g, ops, prior, alpha) for k, v in idx.items()}, ops


def fit(data, tg, sched, epochs, dcfg, seed, lr=0.01, model=None):
    cfg = TrainConfig(lr=lr, max_epochs=epochs, seed=seed)
    return train(data, None, tg, sched, cfg, model=model, denoiser_config=dcfg, init_seed=seed)[0]


def scored(model, tg, sched, val, test, seed, n_samples=2):
    return calibrated_evaluation(model.bind(tg), val, test, sched, n_samples, seed)


def lpsi_f1(g, ops, data, alpha):
    return score_all([lpsi_predict(y, g, ops, alpha) for y in data.y], data.x0).f1


def infected_f1(data):
    """Context only: F1 of naming every infected node a source."""
    return score_all(data.y, data.x0).f1


@pytest.mark.slow
def test_criterion_06_beats_lpsi_large_graph():
    # 1,600-node small-world stand-in for the coauthorship network, IC with
    # inverse-degree edge probabilities, 0.5% of nodes as sources
    t0 = time.perf_counter()
    g = generate_graph("watts-strogatz", seed=6, n=1600, k=4, p=0.1)
    ops = derive_operators(g)
    ic = [(PropagationConfig(model="IC", source_fraction=0.005), 1.0)]
    lpsi_sets, _ = splits(g, ic, seed=6, prior="lpsi")
    # the baseline's alpha is tuned on validation, and the prior uses the same alpha
    alphas = [round(0.1 * i, 1) for i in range(1, 10)]
    alpha = max(alphas, key=lambda a: lpsi_f1(g, ops, lpsi_sets["val"], a))
    data, _ = splits(g, ic, seed=6, alpha=alpha)
    baseline = lpsi_f1(g, ops, data["test"], alpha)
    tg, sched = TorchGraph(ops), make_schedule()
    dcfg = DenoiserConfig(hidden_dim=32, encoder_layers=2, decoder_layers=2)
    model = fit(data["train"], tg, sched, 400, dcfg, seed=0)
    tau, calibrated, fixed = scored(model, tg, sched, data["val"], data["test"], seed=0, n_samples=1)
    secs = time.perf_counter() - t0
    record(6, calibrated.f1 >= baseline and secs <= 3600,
           f"F1 {calibrated.f1:.4f} at validation tau {tau:.2f} (tau 0.5: {fixed.f1:.4f}) vs LPSI {baseline:.4f} "
           f"(alpha {alpha}), {secs / 60:.1f} min (<= 60); context: all-infected F1 {infected_f1(data['test']):.3f}")


SMALL = dict(hidden_dim=64, encoder_layers=2, decoder_layers=2)
SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_criterion_07_pretrain_finetune_beats_scratch():
    g = generate_graph("watts-strogatz", seed=7, n=200, k=6, p=0.1)
    synthetic, ops = splits(g, [(PropagationConfig(model="IC"), 1.0), (PropagationConfig(model="LT"), 1.0)], seed=70)
    target, _ = splits(g, [(PropagationConfig(model="IC"), 0.2), (PropagationConfig(model="LT"), 0.8)], seed=71)
    tg, sched = TorchGraph(ops), make_schedule()
    dcfg = DenoiserConfig(**SMALL)
    wins, parts = 0, []
    for seed in SEEDS:
        few = target["train"].subset(few_shot_subset(len(target["train"]), 0.1, seed))
        pre = fit(synthetic["train"], tg, sched, 200, dcfg, seed)
        tuned = fit(few, tg, sched, 200, dcfg, seed, model=pre)
        scratch = fit(few, tg, sched, 200, dcfg, seed)
        _, a, a_fixed = scored(tuned, tg, sched, target["val"], target["test"], seed)
        _, b, b_fixed = scored(scratch, tg, sched, target["val"], target["test"], seed)
        wins += a.f1 > b.f1
        parts.append(f"seed {seed}: {a.f1:.3f} vs {b.f1:.3f} (tau 0.5: {a_fixed.f1:.3f} vs {b_fixed.f1:.3f})")
    record(7, wins >= 2, f"finetuned beats scratch on {wins}/3 seeds; " + "; ".join(parts)
           + f"; context: all-infected F1 {infected_f1(target['test']):.3f}")


@pytest.mark.slow
def test_criterion_08_ablations():
    g = generate_graph("watts-strogatz", seed=8, n=200, k=6, p=0.1)
    mixture = [(PropagationConfig(model="IC"), 1.0), (PropagationConfig(model="LT"), 1.0)]
    by_prior = {kind: splits(g, mixture, seed=80, prior=kind) for kind in ("lpsi", "centrality")}
    ops = by_prior["lpsi"][1]
    tg, sched = TorchGraph(ops), make_schedule()
    sbd_wins = lp_wins = 0
    parts = []
    for seed in SEEDS:
        results = {}
        for name, kind, ablate in (("full", "lpsi", False), ("sbd", "centrality", False), ("gnnlp", "lpsi", True)):
            data = by_prior[kind][0]
            few = data["train"].subset(few_shot_subset(len(data["train"]), 0.1, seed))
            model = fit(few, tg, sched, 300, DenoiserConfig(**SMALL, ablate_gnnlp=ablate), seed)
            results[name] = scored(model, tg, sched, data["val"], data["test"], seed)[1]
        full, sbd, gnnlp = results["full"], results["sbd"], results["gnnlp"]
        sbd_wins += full.recall > sbd.recall
        lp_wins += full.f1 > gnnlp.f1
        parts.append(f"seed {seed}: recall {full.recall:.3f} vs w/o SBD {sbd.recall:.3f}, "
                     f"F1 {full.f1:.3f} vs w/o GNN-LP {gnnlp.f1:.3f}")
    record(8, sbd_wins >= 2 and lp_wins >= 2,
           f"recall wins {sbd_wins}/3, F1 wins {lp_wins}/3; " + "; ".join(parts)
           + f"; context: all-infected F1 {infected_f1(by_prior['lpsi'][0]['test']):.3f}")


def test_criterion_09_metric_and_centrality_oracles():
    from test_evaluation import brute_force
    from test_graph import closeness_oracle

    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 60))
        pred, truth = rng.random(n) < 0.3, rng.random(n) < 0.2
        c = score(pred, truth)
        counts, p, r, f = brute_force(pred, truth)
        mismatches += (c.tp, c.fp, c.fn, c.tn) != counts or c.precision != p or c.recall != r or c.f1 != f
    worst = 0.0
    for seed in range(10):
        n = int(rng.integers(5, 51))
        g = random_connected(n, seed, p=1.5 / n)
        worst = max(worst, np.max(np.abs(closeness_centrality(g) - closeness_oracle(g))))
        sub = np.sort(rng.choice(n, max(2, n // 2), replace=False))
        worst = max(worst, np.max(np.abs(closeness_centrality(g, sub) - closeness_oracle(g.subgraph(sub)[0]))))
    record(9, mismatches == 0 and worst <= 1e-12,
           f"score mismatches {mismatches}/100, closeness max err {worst:.1e} (<= 1e-12)")


REPRO = """
[graph]
model = barabasi-albert
n = 80
m = 2

[propagation ic]
model = IC

[propagation sir]
model = SIR
beta = 0.3

[data]
count = 64

[diffusion]
T = 50

[denoiser]
hidden_dim = 16
cond_dim = 4

[train]
max_epochs = 3
val_samples = 1

[finetune]
max_epochs = 2
val_samples = 1

[eval]
n_samples = 2

[seeds]
data = 11
init = 12
train = 13
eval = 14
subset = 15
"""


def test_criterion_10_reproducibility(tmp_path):
    def run(out, config):
        ck = str(out / "model.ckpt")
        steps = [["gen-data"], ["train"], ["eval", "--checkpoint", ck], ["finetune", "--checkpoint", ck],
                 ["ablate", "--fraction", "0.5"], ["analyze-cc", "--checkpoint", ck]]
        for step in steps:
            assert cli_main(step + ["--config", str(config), "--out", str(out)]) == 0, step
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.glob("*.csv"))}

    (tmp_path / "exp.ini").write_text(REPRO)
    first = run(tmp_path / "a", tmp_path / "exp.ini")
    frozen = tmp_path / "a" / "config.ini"
    second = run(tmp_path / "b", frozen)
    same = [k for k in first if second.get(k) == first[k]]
    record(10, len(first) >= 8 and len(same) == len(first),
           f"{len(same)}/{len(first)} CSVs byte-identical after rerun from frozen config")
