"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""
import itertools
import json
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from slaterl import synth
from slaterl.catalog import Catalog
from slaterl.cpe import (dr_estimate, is_estimate, is_values, seq_dr_estimate, seq_dr_values,
                         swis_estimate, swis_weights, trajectories_from_samples)
from slaterl.env import EpisodeConfig, SlateEnv, SlateState, page_reward
from slaterl.logged_data import sessionize_and_pad, to_mdp_samples
from slaterl.policies import LearnerConfig, LinearSoftmaxPolicy, evaluate_online, reinforce_gradient, reinforce_online
from slaterl.policies_base import UniformPolicy
from slaterl.rng import make_rng
from slaterl.server import EnvClient
from slaterl.understanding import diagnose_world
from slaterl.unlock import validate_feedback
from slaterl.user_model import FeatureSpec, ValueModel, auc, evaluate_user_model

sys.path.insert(0, os.path.dirname(__file__))
from helpers import ArbitraryValueModel, ConstModel, StatePreferencePolicy, TableModel  # noqa: E402
from pipeline import REPORTS, run_pipeline  # noqa: E402

RESULTS = {}


def record(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s / {budget:.0f}s]"
    RESULTS[n] = line
    print(line)
    return ok


def test_criterion_01_unlock_classes():
    t = time.perf_counter()
    n = sum(bool(validate_feedback(b)) for b in itertools.product((0, 1), repeat=9))
    assert record(1, n == 22, f"valid unlock classes = {n} (expect 22)", time.perf_counter() - t, 1)


def test_criterion_02_page_reward():
    t = time.perf_counter()
    v = page_reward([0.5] * 9, [10] * 9, 0.95)
    closed = 5 * (1 - 0.95 ** 9) / 0.05
    full = page_reward([1] * 9, [10] * 9, 1.0)
    ok = abs(v - closed) <= 1e-9 and full == 90
    assert record(2, ok, f"page_reward = {v:.12f} vs {closed:.12f}; all-purchase = {full}",
                  time.perf_counter() - t, 1)


def _logged_trajectories():
    world = synth.generate_world(seed=11, n_items=12, n_chains=1, chain_length=3, page_size=3)
    cfg = EpisodeConfig(gamma=0.9, page_size=3, max_pages=2, row_size=1)
    rows = synth.simulate_logs(world, synth.GenConfig(n_sessions=80, max_pages=2, page_size=3,
                                                      row_size=1, seed=5))
    # no padding: every step is a true behavior decision
    sessions = sessionize_and_pad(rows, 2, world.catalog.n_items)
    samples = [x for s in sessions if not s.padded_page_count for x in to_mdp_samples(s, cfg, world.catalog)]
    return world, cfg, trajectories_from_samples(samples, cfg, world.context_dim)


def _toy():
    """2 items, one item per page, two pages: a 2-item, 2-step world."""
    catalog = Catalog(np.array([10.0, 4.0]), np.eye(2))
    return catalog, TableModel([0.3, 0.8], c=0.6), EpisodeConfig(gamma=0.9, page_size=1, max_pages=2, row_size=1)


def _enum(model, policy, catalog, cfg):
    pairs = synth.enumerate_trajectories(model, policy, catalog, cfg, (0.0,))
    return np.array([p for p, _ in pairs]), [t for _, t in pairs]


def test_criterion_03_cpe_identity():
    t = time.perf_counter()
    world, cfg, trajs = _logged_trajectories()
    beh = synth.WorldSoftmaxPolicy(world)
    rel = {"is": is_estimate(trajs, beh, cfg.gamma).relative,
           "swis": swis_estimate(trajs, beh, cfg.gamma).relative}
    catalog, model, tcfg = _toy()
    tbeh = StatePreferencePolicy([0.2, -0.4])
    w, etrajs = _enum(model, tbeh, catalog, tcfg)
    for vm_name, vm in (("arbitrary", ArbitraryValueModel()), ("model", ValueModel(model, catalog, tcfg))):
        rel[f"dr[{vm_name}]"] = dr_estimate(etrajs, tbeh, tcfg.gamma, vm, weights=w).relative
        rel[f"seq_dr[{vm_name}]"] = seq_dr_estimate(etrajs, tbeh, tcfg.gamma, vm, weights=w).relative
    worst = max(abs(v - 1.0) for v in rel.values())
    detail = "relative " + ", ".join(f"{k}={v:.12f}" for k, v in rel.items())
    assert record(3, worst <= 1e-9, detail, time.perf_counter() - t, 10)


def test_criterion_04_cpe_unbiasedness():
    t = time.perf_counter()
    worlds = [_toy(), (Catalog(np.array([6.0, 9.0, 3.0]), np.eye(3)), TableModel([0.5, 0.25, 0.9], c=0.7),
                       EpisodeConfig(gamma=0.95, page_size=2, max_pages=2, row_size=1))]
    errs = []
    for catalog, model, cfg in worlds:
        k = catalog.n_items
        beh = StatePreferencePolicy([0.0, 0.5, -0.5][:k])
        target = StatePreferencePolicy([1.0, -1.0, 0.3][:k], tilt=-0.4)
        truth = sum(p * tr.discounted_return(cfg.gamma) for p, tr in
                    synth.enumerate_trajectories(model, target, catalog, cfg, (0.0,)))
        w, trajs = _enum(model, beh, catalog, cfg)
        errs.append(abs(float(w @ is_values(trajs, target, cfg.gamma)) - truth))
        for vm in (ArbitraryValueModel(0.0), ArbitraryValueModel(50.0), ValueModel(model, catalog, cfg, n_samples=2)):
            errs.append(abs(float(w @ seq_dr_values(trajs, target, cfg.gamma, vm)) - truth))
    assert record(4, max(errs) <= 1e-9, f"max |E_b[estimate] - V(pi_e)| = {max(errs):.2e} over {len(errs)} cases",
                  time.perf_counter() - t, 30)


def test_criterion_05_swis_clipping():
    from slaterl.cpe import TrajStep, Trajectory
    from slaterl.policies_base import Policy

    class Both(Policy):
        def action_probabilities(self, state, mask):
            return np.full(len(mask), 1.0)

    t = time.perf_counter()
    s0 = SlateState((0.0,))
    trajs = [Trajectory((TrajStep(s0, 0, 0.02, 1.0, (0, 1)),)), Trajectory((TrajStep(s0, 1, 0.5, 3.0, (0, 1)),))]
    ws = swis_weights(trajs, Both())
    clipped_ok = abs(ws[0, 0] - 10 / 12) <= 1e-12
    world, cfg, ltrajs = _logged_trajectories()
    lw = swis_weights(ltrajs, StatePreferencePolicy(np.linspace(-2, 2, world.catalog.n_items)))
    sums = max(np.max(np.abs(ws.sum(axis=0) - 1)), np.max(np.abs(lw.sum(axis=0) - 1)))
    assert record(5, clipped_ok and sums <= 1e-12,
                  f"ratio 50 weighted as 10 (w={ws[0, 0]:.12f}); max |sum_t w - 1| = {sums:.1e}",
                  time.perf_counter() - t, 1)


def test_criterion_06_data_understanding():
    t = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        my = diagnose_world(synth.myopic_world(seed), seed)
        lt = diagnose_world(synth.long_term_world(seed), seed)
        g_my, g_lt = my.scores["greedy"], lt.scores["greedy"]
        s_my, s_lt = my.spearman[0], lt.spearman[0]
        ok &= g_my >= 0.95 and g_lt <= 0.80 and s_lt < s_my
        rows.append(f"seed{seed}: greedy {g_my:.2f}/{g_lt:.2f} 1-Spearman {s_my:.2f}/{s_lt:.2f}")
    assert record(6, ok, "myopic/long-term " + "; ".join(rows), time.perf_counter() - t, 600)


def _bandit_env():
    cat = Catalog(np.array([10.0, 0.0]), np.array([[1.0], [0.0]]))
    cfg = EpisodeConfig(gamma=1.0, page_size=1, max_pages=1, row_size=1)
    return SlateEnv(ConstModel(1.0), cat, cfg, lambda rng: np.zeros(1))


def test_criterion_07_policy_learning():
    t = time.perf_counter()
    pol = reinforce_online(_bandit_env, LearnerConfig(learning_rate=0.1, batch_episodes=16, n_batches=60))
    p_best = pol.action_probabilities(SlateState((0.0,)), np.array([0, 1]))[0]
    # two decision states (page 1, page 2) with a history-dependent purchase model
    cat = Catalog(np.array([3.0, 8.0]), np.array([[1.0, 0.0], [0.3, 1.0]]))
    cfg = EpisodeConfig(gamma=0.9, page_size=1, max_pages=2, row_size=1)
    model = TableModel([0.6, 0.3], c=1.0)
    w0 = np.random.default_rng(0).normal(scale=0.5, size=FeatureSpec(1, 2, 1).dim)
    base = LinearSoftmaxPolicy(w0, cat, cfg)

    def value(w):
        return sum(p * tr.discounted_return(cfg.gamma) for p, tr in
                   synth.enumerate_trajectories(model, base.with_weights(w), cat, cfg, (0.0,)))

    pairs = synth.enumerate_trajectories(model, base, cat, cfg, (0.0,))
    g = reinforce_gradient([tr for _, tr in pairs], base, cfg.gamma, weights=[p for p, _ in pairs])
    eps = 1e-6
    fd = np.array([(value(w0 + eps * e) - value(w0 - eps * e)) / (2 * eps) for e in np.eye(len(w0))])
    live = np.abs(fd) > 1e-8
    rel = float(np.max(np.abs(g - fd)[live] / np.abs(fd[live])))
    dead = float(np.max(np.abs(g - fd)[~live], initial=0.0))
    ok = p_best >= 0.95 and rel < 1e-3 and dead < 1e-8
    assert record(7, ok, f"P(best item) = {p_best:.4f}; PG vs finite-difference max rel err = {rel:.1e}",
                  time.perf_counter() - t, 300)


def test_criterion_08_online_oracle():
    t = time.perf_counter()
    details, ok = [], True
    worlds = [(synth.generate_world(seed=3, n_items=3, n_chains=1, chain_length=2, page_size=2, decoy_coef=0.7,
                                    long_term_coef=2.0, chain_bias=-1.0, teaser_bias=0.0, continue_bias=0.0),
               EpisodeConfig(gamma=0.9, page_size=2, max_pages=2, row_size=1)),
              (synth.generate_world(seed=8, n_items=4, n_chains=1, chain_length=2, page_size=2, base_bias=0.0),
               EpisodeConfig(gamma=0.95, page_size=2, max_pages=2, row_size=2))]
    for world, cfg in worlds:
        ctx = world.sample_user(make_rng(1))
        truth = synth.oracle_value(world, UniformPolicy(), cfg, ctx)
        res = evaluate_online(UniformPolicy(), lambda: SlateEnv(world, world.catalog, cfg, lambda r: ctx),
                              10_000, seed=2)
        z = (res.mean - truth) / res.stderr
        ok &= abs(z) < 3
        details.append(f"{res.mean:.4f} vs oracle {truth:.4f} (z={z:+.2f})")
    assert record(8, ok, "; ".join(details), time.perf_counter() - t, 120)


def test_criterion_09_pipeline_determinism(tmp_path):
    t = time.perf_counter()
    a, b = str(tmp_path / "run1"), str(tmp_path / "run2")
    codes = run_pipeline(a) + run_pipeline(b)
    files = sorted(f for f in os.listdir(a) if not f.endswith(".config.json") and f != "run_config.json")
    differ = [f for f in files if open(os.path.join(a, f), "rb").read() != open(os.path.join(b, f), "rb").read()]
    # resolved configs embed the output dir, so compare them with it masked
    configs = [f for f in os.listdir(a) if f.endswith(".config.json")]
    differ += [f for f in configs if open(os.path.join(a, f)).read().replace(a, "OUT")
               != open(os.path.join(b, f)).read().replace(b, "OUT")]
    missing = [r for r in REPORTS if r not in files]
    ok = all(c == 0 for c in codes) and len(codes) == 24 and not differ and not missing
    assert record(9, ok, f"{len(files) + len(configs)} output files compared, {len(differ)} differ {differ}, "
                         f"{len(missing)} reports missing", time.perf_counter() - t, 900)


def test_criterion_10_transport(tmp_path):
    t = time.perf_counter()
    world = synth.generate_world(seed=6, n_items=20, n_chains=2, chain_length=3)
    synth.save_world(world, tmp_path / "world.json")
    cfg = EpisodeConfig(max_pages=4)
    proc = subprocess.Popen([sys.executable, "-m", "slaterl", "serve-env", "--world", str(tmp_path / "world.json"),
                             "--set", "max_pages=4", "--out", str(tmp_path)], stdout=subprocess.PIPE)
    mismatches, steps = 0, 0
    try:
        addr = json.loads(proc.stdout.readline())
        with EnvClient(addr["host"], addr["port"]) as client:
            for seed in range(3):
                env = SlateEnv(world, world.catalog, cfg, world.sample_user)
                s = env.reset(seed=seed)
                tok, rs = client.reset(seed=seed)
                mismatches += rs != s
                rng = make_rng(seed, "actions")
                while not s.terminal:
                    a, _ = UniformPolicy().sample(s, env.action_mask(), rng)
                    local, remote = env.step(a), client.step(tok, a)
                    mismatches += local != remote
                    steps += 1
                    s = local.next_state
        proc.send_signal(signal.SIGTERM)
        clean = proc.wait(timeout=20) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
    assert record(10, mismatches == 0 and clean,
                  f"{steps} remote steps over 3 seeded episodes, {mismatches} field mismatches",
                  time.perf_counter() - t, 60)


def test_criterion_11_user_model_metrics():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for trial in range(300):
        n = int(rng.integers(2, 101))
        scores = rng.integers(0, 8, n) / 7 if trial % 2 else rng.random(n)
        labels = rng.random(n) < 0.4
        labels[0], labels[-1] = True, False
        pos, neg = scores[labels], scores[~labels]
        oracle = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
        bad += auc(scores, labels) != oracle
    world = synth.generate_world(seed=2, n_items=20, n_chains=2, chain_length=3)
    rows = synth.simulate_logs(world, synth.GenConfig(n_sessions=100, max_pages=3, seed=1))
    sessions = sessionize_and_pad(rows, 3, world.catalog.n_items)

    class Oracle:
        context_dim = world.context_dim
        table = {(tuple(s.user_context), p.exposed_items): np.array(p.user_feedback, float)
                 for s in sessions for p in s.real_pages}

        def conditional_probs(self, ctx, slate, history=()):
            return self.table[(tuple(ctx), tuple(slate))]

        def continue_probability(self, *a):
            return 1.0

    m = evaluate_user_model(Oracle(), sessions, world.catalog, EpisodeConfig(max_pages=3))
    errs = (m["reward_error_mean"], m["reward_error_abs"], m["reward_error_std"])
    ok = bad == 0 and errs == (0.0, 0.0, 0.0)
    assert record(11, ok, f"AUC mismatches vs pairwise oracle: {bad}/300; oracle reward error = {errs}",
                  time.perf_counter() - t, 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
