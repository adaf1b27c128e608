"""Acceptance criteria 1-10.

Each test records one pass/fail line (printed in the terminal summary) and
then asserts. Criteria 6-9 train real models and dominate the runtime; they
share one :class:`Lab` so common prefixes are trained once.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from visplan import checkpoint as ck
from visplan import cli
from visplan import dynreward as dr
from visplan import evalbench as eb
from visplan import genmodel as gm
from visplan import gridworld as gw
from visplan import objectives as obj
from visplan import trainer as tr
from visplan.experiments import ABLATIONS, Budget, Lab, ablations, pretrain_competence, rl_only_collapse, rsft_vs_sft

SEEDS = (0, 1, 2)
BUDGET = Budget()


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="session")
def lab():
    return Lab(BUDGET, log=None)


# --- 1 ---------------------------------------------------------------------------


def test_criterion_1_reward_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    while checked < 1000:
        a, b = gw.random_state(rng), gw.random_state(rng)
        x_t, x_real = gw.render(a), gw.render(b)
        if not dr.detect_regions(x_t, x_real):
            continue
        worst = max(worst, abs(dr.dynamic_reward(x_t, x_real, x_real) - 1.0))
        checked += 1
    same = gw.render(gw.random_state(rng))
    zero = dr.dynamic_reward(same, same, same)
    gamma = dr.composite_reward([1.0], [0.0], 1, 2, dr.RewardParams(penalty=0.5))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and zero == 0.0 and abs(gamma - 0.5) <= 1e-12 and elapsed < 60
    record(1, ok, f"max |r-1| over {checked} = {worst:.1e}; no-change r = {zero}; penalty example r = {gamma}; {elapsed:.1f}s")


# --- 2 ---------------------------------------------------------------------------


def test_criterion_2_hungarian_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(10_000):
        n, m = (int(x) for x in rng.integers(1, 7, 2))
        c = rng.integers(-50, 50, (n, m)).astype(float) if i % 2 else rng.normal(size=(n, m))
        pairs, _ = dr.hungarian(c)
        # re-sum the returned assignment in the brute force's order so equality is exact
        cc, pp = (c, pairs) if n <= m else (c.T, [(j, i_) for i_, j in pairs])
        cost = sum(cc[i_, j] for i_, j in sorted(pp))
        mismatches += cost != dr.brute_force_assignment(c)
    elapsed = time.perf_counter() - t0
    record(2, mismatches == 0 and elapsed < 60, f"{mismatches} mismatches in 10000 matrices; {elapsed:.1f}s")


# --- 3 ---------------------------------------------------------------------------


def test_criterion_3_gradient_fidelity(tiny_cfg, tiny_dataset):
    t0 = time.perf_counter()
    model = gm.init_params(tiny_cfg, 3).double()
    n_params = model.n_params()
    batch = tiny_dataset.train[:3]
    rng = np.random.default_rng(11)
    with torch.no_grad():
        logits = model(obj.plan_batch(model, batch)).image_logits
    samples = np.stack([gm.sample_images(logits[i], 4, rng)[0] for i in range(len(batch))])
    rewards = rng.normal(size=(3, 4))

    def reward(t, x, _table={}):
        return float(np.sum(x == t.x_t1.ravel())) + 0.01 * float(x[0])

    adv = obj.normalize_advantages(rewards).advantages
    losses = {
        "inverse": lambda: obj.inverse_dynamics_loss(model, batch),
        "forward": lambda: obj.forward_dynamics_loss(model, batch),
        "sft": lambda: obj.sft_loss(model, batch),
        "rl": lambda: obj.rl_loss(model, batch, samples, adv),
        "rsft": lambda: obj.rsft_loss(model, batch, 4, 0.5, reward, samples=samples),
    }
    errs = {k: obj.finite_diff_check(fn, list(model.parameters()), n_probes=200, seed=5) for k, fn in losses.items()}
    elapsed = time.perf_counter() - t0
    ok = n_params <= 5000 and all(e < 1e-4 for e in errs.values()) and elapsed < 600
    detail = ", ".join(f"{k} {e:.1e}" for k, e in errs.items())
    record(3, ok, f"max rel err ({n_params} params, 200 probes): {detail}; {elapsed:.0f}s")


# --- 4 ---------------------------------------------------------------------------


def test_criterion_4_degenerate_identities(tiny_cfg, tiny_dataset):
    model = gm.init_params(tiny_cfg, 1).double()
    batch = tiny_dataset.train[:4]
    rng = np.random.default_rng(0)
    with torch.no_grad():
        logits = model(obj.plan_batch(model, batch)).image_logits
    samples = np.stack([gm.sample_images(logits[i], 4, rng)[0] for i in range(len(batch))])

    def varied(t, x):
        return float(np.sum(x == t.x_t1.ravel()))

    sft = obj.with_grad(model, lambda: obj.sft_loss(model, batch))
    lam0 = obj.with_grad(model, lambda: obj.rsft_loss(model, batch, 4, 0.0, varied, samples=samples))
    lam0_ok = sft.total.item() == lam0.total.item() and np.array_equal(sft.grad, lam0.grad)

    zero_rl = obj.with_grad(model, lambda: obj.rl_loss(
        model, batch, samples, obj.normalize_advantages(np.full((4, 4), 0.3)).advantages))
    equal_ok = not np.any(zero_rl.grad)

    cfg = tr.TrainConfig(batch_size=4, k_samples=4, pretrain_steps=4, sft_steps=4, rsft_steps=6,
                         eval_every=3, eval_size=4, eval_k=2, seed=9)
    pre = tr.pretrain(cfg, tiny_dataset, model_cfg=tiny_cfg)
    warm = tr.sft_phase(cfg, pre.checkpoint, tiny_dataset)
    a = tr.sft_phase(cfg, warm.checkpoint, tiny_dataset, steps=6)
    b = tr.rsft_phase(cfg, warm.checkpoint, tiny_dataset, reward_fn=lambda t, x: 0.42)
    pa = {k: v for k, v in a.checkpoint.arrays.items() if k.startswith("param/")}
    pb = {k: v for k, v in b.checkpoint.arrays.items() if k.startswith("param/")}
    traj_ok = all(np.array_equal(pa[k], pb[k]) for k in pa) and \
        [r["loss_total"] for r in a.metrics] == [r["loss_total"] for r in b.metrics]
    record(4, lam0_ok and equal_ok and traj_ok,
           f"lambda=0 bitwise {lam0_ok}; equal-reward RL grad zero {equal_ok}; constant-reward trajectory == SFT {traj_ok}")


# --- 5 ---------------------------------------------------------------------------


def test_criterion_5_one_forward_sampling():
    one = gm.init_params(gm.ModelConfig(), 0)
    ar = gm.init_params(gm.ModelConfig(variant=gm.Variant.AR.value), 0)
    contexts = gw.sample_dataset(0, 12).all
    r1, r2, report = eb.bench_sampling(one, ar, contexts, k=8, trials=2, seed=0)
    per1, per2 = r1.forward_calls // r1.trials, r2.forward_calls // r2.trials
    ratio = r2.wall_seconds / r1.wall_seconds
    ok = per1 == 1 and per2 == 512 and "| Method |" in report and ratio > 10
    record(5, ok, f"forwards per K=8 draw: one-step {per1}, autoregressive {per2}; wall-clock ratio {ratio:.0f}x")


# --- 6 ---------------------------------------------------------------------------


def test_criterion_6_pretraining_competence(lab):
    t0 = time.perf_counter()
    res = pretrain_competence(lab, 0)
    elapsed = time.perf_counter() - t0
    ok = res["inverse_action_acc"] >= 0.95 and res["forward_image_acc"] >= 0.90 and elapsed < 1800
    record(6, ok, f"held-out inverse action-token acc {res['inverse_action_acc']:.4f} (>= 0.95), "
                  f"forward image-token acc {res['forward_image_acc']:.4f} (>= 0.90); {elapsed / 60:.1f} min")


# --- 7 ---------------------------------------------------------------------------


def test_criterion_7_rsft_beats_sft(lab):
    rows = rsft_vs_sft(lab, SEEDS)
    wins = sum(r["rsft_test_reward"] > r["sft_test_reward"] for r in rows)
    detail = "; ".join(f"seed {r['seed']}: rsft {r['rsft_test_reward']:.4f} vs sft {r['sft_test_reward']:.4f}" for r in rows)
    record(7, wins == len(SEEDS), f"{wins}/{len(SEEDS)} seeds ordered; {detail}")


# --- 8 ---------------------------------------------------------------------------


def test_criterion_8_rl_only_collapse(lab):
    rows = rl_only_collapse(lab, SEEDS)
    ok_seeds = 0
    parts = []
    for r in rows:
        rl, others = r["rl_only"], (r["sft"], r["rsft"])
        ok = all(rl["plan_action_acc"] < o["plan_action_acc"] and rl["SR"] < o["SR"] for o in others)
        ok_seeds += ok
        parts.append(f"seed {r['seed']}: acc/SR rl_only {rl['plan_action_acc']:.3f}/{rl['SR']:.2f}, "
                     f"sft {r['sft']['plan_action_acc']:.3f}/{r['sft']['SR']:.2f}, "
                     f"rsft {r['rsft']['plan_action_acc']:.3f}/{r['rsft']['SR']:.2f}")
    record(8, ok_seeds == len(SEEDS), f"{ok_seeds}/{len(SEEDS)} seeds; " + "; ".join(parts))


# --- 9 ---------------------------------------------------------------------------


def test_criterion_9_ablation_directions(lab):
    out = ablations(lab, 0)
    drops = out["sr_drop"]
    largest = max(ABLATIONS, key=lambda a: (drops[a], a == "no_fdm"))
    fdm_ok = drops["no_fdm"] > max(drops[a] for a in ABLATIONS if a != "no_fdm")
    gen_ok = out["no_gen"]["LA"] < out["full"]["LA"]
    detail = ", ".join(f"{a} {drops[a]:+.2f}" for a in ABLATIONS)
    record(9, fdm_ok and gen_ok,
           f"SR drops vs full (SR {out['full']['SR']:.2f}): {detail} (largest: {largest}); "
           f"LA full {out['full']['LA']:.3f} vs no_gen {out['no_gen']['LA']:.3f}")


# --- 10 --------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    small = ["--model.d_model", "16", "--model.n_heads", "2", "--model.n_layers", "1",
             "--train.batch_size", "8", "--train.k_samples", "4", "--train.eval_every", "5",
             "--train.eval_size", "8", "--train.eval_k", "2", "--train.pretrain_steps", "10",
             "--train.sft_steps", "10", "--train.rsft_steps", "10", "--seed", "3"]

    def pipeline(root):
        data = root / "data"
        assert cli.main(["gen-data", "--seed", "3", "--count", "200", "--out", str(data)]) == 0
        common = ["--data", str(data), *small]
        assert cli.main(["pretrain", "--run-dir", str(root / "pre"), *common]) == 0
        assert cli.main(["sft", "--run-dir", str(root / "sft"), "--init", str(root / "pre" / "final.ckpt"), *common]) == 0
        assert cli.main(["rsft", "--run-dir", str(root / "rsft"), "--init", str(root / "sft" / "final.ckpt"), *common]) == 0
        return common

    common = pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    files = [f"{p}/{f}" for p in ("pre", "sft", "rsft") for f in ("metrics.csv", "final.ckpt")]
    files += ["data/train.jsonl", "data/test.jsonl"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    # interrupt RSFT after 4 steps, resume through the CLI
    src = ck.load(tmp_path / "a" / "sft" / "final.ckpt")
    cfg = tr.TrainConfig.from_dict(ck.load(tmp_path / "a" / "rsft" / "final.ckpt").header["train_config"])
    ds = cli._dataset(tmp_path / "a" / "data")
    tr.rsft_phase(cfg, src, ds, run_dir=tmp_path / "cut", stop_after=4)
    assert cli.main(["rsft", "--run-dir", str(tmp_path / "cut"), "--resume", str(tmp_path / "cut" / "last.ckpt"), *common]) == 0
    resumed = all((tmp_path / "cut" / f).read_bytes() == (tmp_path / "a" / "rsft" / f).read_bytes()
                  for f in ("metrics.csv", "final.ckpt"))
    record(10, same and resumed, f"repeat run byte-identical over {len(files)} files: {same}; resume == uninterrupted: {resumed}")
