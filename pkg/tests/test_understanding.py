import numpy as np
import pytest

from slaterl.errors import ContractError, EmptyDataError
from slaterl.logged_data import LoggedPage, SessionRecord
from slaterl.understanding import (SeqHyperparams, SeqModel, _spearman, decode, fit_seq_model,
                                   hot_items, purchase_sequence, quantile_count,
                                   understanding_report)


def session(sid, ctx, bought):
    pages = tuple(LoggedPage((i,), (1,), (0.5,)) for i in bought)
    return SessionRecord(sid, tuple(ctx), (), pages, 0, "sl", 0)


def random_model(n=12, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return SeqModel(rng.normal(size=n), rng.normal(size=(d, n)), rng.normal(size=(n, n)),
                    np.zeros(d), np.ones(d))


def test_purchase_sequence_dedups():
    pages = (LoggedPage((3, 1), (1, 1), (1, 1)), LoggedPage((3, 2), (1, 0), (1, 1)),
             LoggedPage((0, 5), (0, 0), (1, 1)))
    s = SessionRecord("x", (0.0,), (), pages, 1, "sl", 0)
    assert purchase_sequence(s) == [3, 1]


def test_b_follows_a():
    rng = np.random.default_rng(0)
    sessions = [session(f"s{k}", rng.normal(size=2), [0, 1] if k % 2 else [2, 0, 1]) for k in range(60)]
    model = fit_seq_model(sessions, 6, K=3, hyperparams=SeqHyperparams(epochs=200, learning_rate=0.1))
    for ctx in rng.normal(size=(5, 2)):
        assert int(np.argmax(model.next_log_probs(ctx, [0]))) == 1
    h = model.info["loss_history"]
    assert h[-1] < h[0]


def test_zero_epochs_is_uniform():
    sessions = [session("a", (0.0, 1.0), [1, 2]), session("b", (1.0, 0.0), [])]
    model = fit_seq_model(sessions, 5, hyperparams=SeqHyperparams(epochs=0))
    assert np.allclose(np.exp(model.next_log_probs((0.3, 0.3), [])), 0.2)
    assert np.allclose(np.exp(model.next_log_probs((0.3, 0.3), [4]))[:4], 0.25)
    assert model.info["skipped"] == 1


def test_no_purchases_is_empty_data():
    with pytest.raises(EmptyDataError):
        fit_seq_model([session("a", (0.0,), [])], 3)
    with pytest.raises(ContractError):
        fit_seq_model([session("a", (0.0,), [1])], 3, K=0)


def test_next_distribution_sums_to_one_over_unused():
    m = random_model()
    p = np.exp(m.next_log_probs(np.zeros(3), [2, 5]))
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and p[2] == 0 and p[5] == 0


def brute_force_sequences(model, ctx, K):
    out = []

    def rec(prefix, steps):
        if len(prefix) == K:
            out.append((sum(steps), tuple(prefix)))
            return
        lp = model.next_log_probs(ctx, prefix)
        for j in range(model.n_items):
            if j not in prefix:
                rec(prefix + [j], steps + [lp[j]])
    rec([], [])
    return sorted(out, reverse=True)


def test_beam_scores_and_exhaustive_width():
    m = random_model(n=5)
    ctx = np.array([0.2, -0.1, 0.4])
    res = decode(m, ctx, K=3, method="beam", width=1000).sequences
    truth = brute_force_sequences(m, ctx, 3)
    assert len(res) == len(truth) == 60
    assert [s.items for s in res] == [t[1] for t in truth]
    for s in res:
        assert s.total == pytest.approx(sum(s.step_scores), abs=1e-12)
        assert len(set(s.items)) == 3


def test_beam_width_one_is_greedy_and_order():
    m = random_model()
    ctx = np.array([1.0, 0.0, -1.0])
    greedy = decode(m, ctx, 5, "greedy").sequences
    assert len(greedy) == 1
    assert decode(m, ctx, 5, "beam", width=1).sequences[0] == greedy[0]
    beam = decode(m, ctx, 5, "beam", width=100).sequences
    assert len(beam) <= 100
    tot = [s.total for s in beam]
    assert all(a >= b for a, b in zip(tot, tot[1:]))
    assert beam[0].total >= greedy[0].total


def test_hot_set_rule():
    m = random_model(n=20)
    ctx = np.zeros(3)
    hot = hot_items(m, ctx, 4)
    lp = m.next_log_probs(ctx, [])
    assert set(hot.tolist()) == set(np.argsort(-lp)[:4].tolist())
    res = decode(m, ctx, 3, "hot-beam", width=50, hot_size=4).sequences
    assert len(res) == 24 and all(set(s.items) <= set(hot.tolist()) for s in res)
    with pytest.raises(ContractError):
        decode(m, ctx, 3, "hot-beam", hot_set=[])
    with pytest.raises(ContractError):
        decode(m, ctx, 3, "beam", width=0)


def test_report_invariants():
    m = random_model(n=15)
    users = np.random.default_rng(1).normal(size=(4, 3))
    rep = understanding_report(m, users, K=4, width=40, hot_size=8)
    assert rep.scores["top5pct"] == 1.0
    assert rep.pearson[-1] == 1.0 and rep.spearman[-1] == 1.0
    assert rep.scores["greedy"] <= 1.0 + 1e-12
    assert not rep.degenerate
    assert "4-Spearman\t1.00" in rep.correlation_table()
    assert rep.score_table("toy").startswith("Score of\t5%")


def test_degenerate_flag_warns():
    m = random_model(n=4)
    with pytest.warns(UserWarning):
        rep = understanding_report(m, np.zeros((1, 3)), K=2, width=100)
    assert rep.degenerate


def test_quantile_convention():
    assert quantile_count(100, 0.05) == 5 and quantile_count(100, 0.2) == 20
    assert quantile_count(10, 0.05) == 1


def test_spearman_translation_invariance():
    rng = np.random.default_rng(3)
    steps = rng.normal(size=(30, 4))
    prefix = np.cumsum(steps, axis=1)
    total = prefix[:, -1]
    shifted = np.cumsum(steps + 0.7, axis=1)
    for k in range(4):
        assert _spearman(prefix[:, k], total) == pytest.approx(_spearman(shifted[:, k], shifted[:, -1]),
                                                               abs=1e-12)
