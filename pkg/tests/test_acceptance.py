"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import functools
import json
import math
import time

import numpy as np
import pytest
import torch
from conftest import fd_relative_errors, toy_kernel, toy_model

from motifrl.cli import apply_override, load_config, run_stage
from motifrl.diffusion import (
    MaskPrior,
    NoiseSchedule,
    factor_masks,
    forward_sample,
    masked_ce_loss,
    posterior_factor,
    reverse_posterior,
    sample_from_posterior,
)
from motifrl.kernel import Batch, masked_ce, run_model
from motifrl.molgraph import isomorphic, parse_smiles
from motifrl.npe import MotifGraph, detokenize, learn_vocab, pad, tokenize
from motifrl.oracle import TaskSpec
from motifrl.rl import Condition, PPOConfig, RolloutBatch, frozen_copy, generate, ppo_loss, terminal_reward
from motifrl.synth import smiles_corpus
from motifrl.theory import compression_bound, decision_counts, run_battery


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        return ok

    return emit


def _tiny_config(**overrides):
    cfg = load_config(None)
    base = {
        "corpus.synthetic": {"kind": "assembly", "n": 300, "seed": 0, "max_rings": 2},
        "vocab.V": 30,
        "model.n_max": 6,
        "model.T": 10,
        "model.e_x": 8,
        "model.e_e": 4,
        "model.e_p": 4,
        "model.depth": 1,
        "model.heads": 2,
        "pretrain.epochs": 1,
        "sft.epochs": 1,
        "sft.eval_every": 1,
        "sft.eval_samples": 8,
        "rl.epochs": 2,
        "rl.batch_size": 4,
        "rl.suffix_steps": 3,
        "sample.n": 30,
    }
    for key, value in {**base, **overrides}.items():
        cfg = apply_override(cfg, key, value)
    return cfg


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_1_theory_battery(report):
    start = time.perf_counter()
    rows = run_battery(seed=0, n_mdp=60, n_pairs=120, n_amplification=1000)
    elapsed = time.perf_counter() - start
    by_name = {r.name: r for r in rows}
    enough = (
        by_name["soft bellman = enumerated objective"].instances >= 50
        and by_name["factorized kl = joint kl"].instances >= 100
        and by_name["amplification lower bound"].instances >= 1000
    )
    ok = all(r.passed for r in rows) and enough and elapsed < 60
    worst = max(r.max_error for r in rows if r.tolerance > 0)
    report(1, ok, f"{len(rows)} rows, worst error {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_2_decision_counts(report):
    dc = decision_counts(4, 2)
    bound = compression_bound(5.5)
    ok = dc.L_atom == 10 and dc.L_motif == 5 and round(bound, 3) == 0.099
    report(2, ok, f"L_atom={dc.L_atom} L_motif={dc.L_motif} bound(5.5)={bound:.4f}")
    assert ok


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_3_tokenizer(report):
    start = time.perf_counter()
    corpus = smiles_corpus(600, seed=21, max_atoms=14)
    vocab = learn_vocab(corpus, 80, 8)
    again = learn_vocab(smiles_corpus(600, seed=21, max_atoms=14), 80, 8)
    roundtrip = sum(isomorphic(detokenize(tokenize(g, vocab), vocab), g) for g in corpus)
    elapsed = time.perf_counter() - start
    ok = roundtrip == len(corpus) and vocab.dumps() == again.dumps() and elapsed < 60
    report(3, ok, f"{roundtrip}/{len(corpus)} lossless, identical vocab {vocab.dumps() == again.dumps()}, {elapsed:.1f}s")
    assert ok


# -- 4 ----------------------------------------------------------------------------------


def _two_slot(X, E, P):
    return Batch(*(torch.tensor(a, dtype=torch.long) for a in ([X], [E], [P], [[1, 1]])))


def test_criterion_4_gradients(report):
    start = time.perf_counter()
    model = toy_model()
    zt = _two_slot([1, 2], [[0, 1], [1, 0]], [[0, 1], [2, 0]])
    z0 = _two_slot([2, 0], [[0, 2], [2, 0]], [[0, 2], [1, 0]])
    cond = model.encode_conditions([(0, 1.5)])
    ce = fd_relative_errors(model, lambda: masked_ce(run_model(model, zt, torch.tensor([3]), cond), z0)[0])

    model, kernel = toy_model(T=6), toy_kernel(T=6)
    ref = toy_model(T=6, seed=3)
    conds = [Condition(0, 1.0), Condition(0, 2.0)]
    _, records, _ = generate(model, kernel, MaskPrior(np.array([0.0, 1.0])), conds, np.random.default_rng(0), record_from=2)

    def cat(xs):
        return Batch(*(torch.cat([getattr(b, f) for b in xs]) for f in ("X", "E", "P", "m")))

    batch = RolloutBatch(
        conditions=conds,
        zt=cat([r[1] for r in records]),
        z_prev=cat([r[2] for r in records]),
        t=torch.cat([torch.full((2,), r[0], dtype=torch.long) for r in records]),
        old_logprob=torch.cat([r[3] for r in records]) + 0.05,
        values=torch.cat([r[4] for r in records]),
        rewards=torch.tensor([1.0, -0.1], dtype=torch.float64),
        valid=np.array([True, False]),
    )
    ppo = fd_relative_errors(model, lambda: ppo_loss(model, ref, kernel, batch, PPOConfig())[0])
    elapsed = time.perf_counter() - start
    worst_ce, worst_ppo = max(ce.values()), max(ppo.values())
    ok = worst_ce < 1e-4 and worst_ppo < 1e-4 and elapsed < 60
    report(4, ok, f"max rel err masked CE {worst_ce:.2e}, PPO {worst_ppo:.2e}, {elapsed:.1f}s")
    assert ok


# -- 5 ----------------------------------------------------------------------------------


def _brute_force_posterior(x0, j, t, schedule, m):
    d = len(m)
    ab = schedule.alpha_bar
    steps = [(ab[s] / ab[s - 1]) * np.eye(d) + (1 - ab[s] / ab[s - 1]) * np.outer(np.ones(d), m) for s in range(1, t + 1)]
    Qbar_prev = functools.reduce(np.matmul, steps[:-1], np.eye(d))
    out, total = np.zeros(d), 0.0
    for i in range(d):
        joint = Qbar_prev[i] * steps[-1][:, j]
        if x0[i] > 0 and joint.sum() > 0:
            out += x0[i] * joint / joint.sum()
            total += x0[i]
    return out / total


def test_criterion_5_diffusion(report, assembly_setup):
    rng = np.random.default_rng(0)
    post_err = 0.0
    for _ in range(300):
        T = int(rng.integers(2, 40))
        t = int(rng.integers(1, T + 1))
        schedule = NoiseSchedule(T)
        m, x0, j = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3)), int(rng.integers(3))
        ab = schedule.alpha_bar
        got = posterior_factor(x0[None], np.array([j]), schedule.alpha(t), ab[t - 1], ab[t], m)[0]
        post_err = max(post_err, float(np.abs(got - _brute_force_posterior(x0, j, t, schedule, m)).max()))

    z0 = pad(tokenize(parse_smiles("C1CC1CC"), assembly_setup["vocab"]), 4)
    ce_err = 0.0
    for d in (2, 3, 7):
        n = 4
        pred = {"X": np.full((n, d), 1 / d), "E": np.full((n, n, 4), 0.25), "P": np.full((n, n, d), 1 / d)}
        zc = type(z0)(np.minimum(z0.X, d - 1), z0.E, np.minimum(z0.P, d - 1), z0.m)
        _, parts = masked_ce_loss(pred, zc, zc.m)
        ce_err = max(ce_err, abs(parts["X"] - math.log(d)), abs(parts["P"] - math.log(d)), abs(parts["E"] - math.log(4)))

    # driving the reverse chain with the true endpoint recovers it exactly from t = 1
    tr, schedule = assembly_setup["transitions"], NoiseSchedule(50)
    recovered = True
    for z in assembly_setup["states"][:50]:
        truth = {"X": np.eye(len(tr.mX))[z.X], "E": np.eye(4)[z.E], "P": np.eye(len(tr.mP))[z.P]}
        z1 = forward_sample(z, 1, schedule, tr, rng)
        back = sample_from_posterior(z1, reverse_posterior(z1, truth, 1, schedule, tr), rng)
        for ch, mask in zip("XEP", factor_masks(z.m)):
            recovered &= bool(np.array_equal(getattr(back, ch)[mask], getattr(z, ch)[mask]))

    ok = post_err < 1e-9 and ce_err < 1e-12 and recovered
    report(5, ok, f"posterior err {post_err:.2e}, uniform CE err {ce_err:.2e}, oracle reconstruction {recovered}")
    assert ok


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_6_reward(report, assembly_setup):
    vocab = assembly_setup["vocab"]
    task = TaskSpec(0, "rings", mean=0.0, std=1.0, sigma=0.5)
    ring = pad(tokenize(parse_smiles("C1CC1"), vocab), 6)
    c = vocab.element_id("C")
    broken = pad(MotifGraph((c, c), ()), 6)
    got = (
        terminal_reward(ring, Condition(0, 1.0), task, 0.1, vocab),
        terminal_reward(broken, Condition(0, 1.0), task, 0.1, vocab),
        terminal_reward(ring, Condition(0, 1.5), task, 0.1, vocab),
    )
    want = (1.0, -0.1, 0.1 + 0.9 * math.exp(-1))
    err = max(abs(a - b) for a, b in zip(got, want))
    ok = err < 1e-12
    report(6, ok, f"rewards {tuple(round(v, 6) for v in got)}, max error {err:.1e}")
    assert ok


# -- 7 ----------------------------------------------------------------------------------


RL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trained_sft(tmp_path_factory):
    """Shared pretrain + SFT checkpoints on the default synthetic ring-assembly corpus."""
    out = tmp_path_factory.mktemp("rl_acceptance")
    cfg = load_config(None)
    for key, value in {
        "model.T": 50,
        "pretrain.epochs": 80,
        "sft.epochs": 80,
        "rl.suffix_steps": 10,
        "rl.epochs": 200,
        "rl.conditions": [{"task": 0, "target": 2}],
        "sample.conditions": [{"task": 0, "target": 2}],
        "sample.n": 500,
    }.items():
        cfg = apply_override(cfg, key, value)
    start = time.perf_counter()
    for stage in ("learn-vocab", "pretrain", "sft"):
        run_stage(stage, cfg, out)
    return cfg, out, time.perf_counter() - start


@pytest.mark.parametrize("seed", RL_SEEDS)
def test_criterion_7_rl_improves(report, trained_sft, seed):
    cfg, out, shared = trained_sft
    cfg = apply_override(cfg, "rl.seed", seed)
    cfg = apply_override(cfg, "paths.rl", f"rl_{seed}.ckpt")
    cfg = apply_override(cfg, "paths.rl_log", f"rl_{seed}.jsonl")
    cfg = apply_override(cfg, "paths.samples", f"samples_{seed}.jsonl")
    cfg = apply_override(cfg, "sample.checkpoint", f"rl_{seed}.ckpt")
    start = time.perf_counter()
    run_stage("rl", cfg, out)
    sampled = run_stage("sample", cfg, out)
    elapsed = time.perf_counter() - start + shared
    rows = [json.loads(line) for line in (out / f"rl_{seed}.jsonl").read_text().splitlines()]
    rewards = [r["mean_reward"] for r in rows]
    first, last = float(np.mean(rewards[:20])), float(np.mean(rewards[-20:]))
    ok = last > first and sampled["validity"] >= 0.90 and elapsed < 1800
    report(
        7,
        ok,
        f"seed {seed}: reward first20 {first:.3f} -> last20 {last:.3f}, "
        f"validity {sampled['validity']:.3f} on {sampled['n']}, {elapsed:.0f}s incl. shared PT+SFT",
    )
    assert ok


# -- 8 ----------------------------------------------------------------------------------


def test_criterion_8_first_pass_identities(report):
    model, kernel = toy_model(T=6), toy_kernel(T=6)
    conds = [Condition(0, 1.0), Condition(0, 2.0), Condition(0, 0.5)]
    worst_ratio, worst_kl = 0.0, 0.0
    for seed in range(5):
        _, records, _ = generate(model, kernel, MaskPrior(np.array([0.3, 0.7])), conds, np.random.default_rng(seed), record_from=4)

        def cat(xs):
            return Batch(*(torch.cat([getattr(b, f) for b in xs]) for f in ("X", "E", "P", "m")))

        batch = RolloutBatch(
            conditions=conds,
            zt=cat([r[1] for r in records]),
            z_prev=cat([r[2] for r in records]),
            t=torch.cat([torch.full((3,), r[0], dtype=torch.long) for r in records]),
            old_logprob=torch.cat([r[3] for r in records]),
            values=torch.cat([r[4] for r in records]),
            rewards=torch.tensor([1.0, -0.1, 0.4], dtype=torch.float64),
            valid=np.array([True, False, True]),
        )
        _, diag = ppo_loss(model, frozen_copy(model), kernel, batch, PPOConfig())
        worst_ratio = max(worst_ratio, diag["max_ratio_dev"])
        worst_kl = max(worst_kl, abs(diag["kl"]))
    ok = worst_ratio < 1e-9 and worst_kl < 1e-12
    report(8, ok, f"max |rho - 1| {worst_ratio:.1e}, KL to identical reference {worst_kl:.1e}")
    assert ok


# -- 9 ----------------------------------------------------------------------------------


def test_criterion_9_pipeline_determinism(report, tmp_path):
    cfg = _tiny_config()
    stages = ("learn-vocab", "pretrain", "sft", "rl", "sample")
    for name in ("a", "b"):
        for stage in stages:
            run_stage(stage, cfg, tmp_path / name)
    a = (tmp_path / "a" / "samples.jsonl").read_bytes()
    b = (tmp_path / "b" / "samples.jsonl").read_bytes()
    ok = a == b and len(a) > 0
    report(9, ok, f"sample files identical: {a == b} ({len(a)} bytes)")
    assert ok
