"""Data understanding: is a dataset greedy-friendly or does it need RL?

An autoregressive next-item model is fitted on purchased-item sequences.
Decoding it greedily stands for a supervised recommender; beam search
stands for the best long-horizon policy. Two diagnostics follow:

* normalised sequence scores (top 5%, top 20%, greedy, hot-item top 5% and
  20%) relative to the top-5% beam average;
* k-Pearson / k-Spearman correlation between the score of the first k
  items and the total score across the beam.

Scores are sums of per-step log-probabilities. Because they are negative,
"normalised by the top-5% average" means ``top5_mean / score``: 1.0 for the
top 5%, smaller for worse sequences.
"""
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DivergenceError, EmptyDataError


def purchase_sequence(session):
    """Distinct items bought in a session, in page then slot order (first purchase kept)."""
    seen = []
    for page in session.real_pages:
        for i, f in zip(page.exposed_items, page.user_feedback):
            if f and i not in seen:
                seen.append(i)
    return seen


@dataclass(eq=False)
class SeqModel:
    """``logit(j) = b_j + <x, W_j> + sum_{p in prefix} M[p, j]`` over unused items."""

    bias: np.ndarray
    context_weights: np.ndarray
    transition: np.ndarray
    ctx_mean: np.ndarray
    ctx_scale: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def n_items(self):
        return len(self.bias)

    def base_logits(self, user_context):
        x = (np.asarray(user_context, dtype=float) - self.ctx_mean) / self.ctx_scale
        return self.bias + x @ self.context_weights

    def next_log_probs(self, user_context, prefix):
        """Log-probabilities of the next item; used items get ``-inf``."""
        z = self.base_logits(user_context)
        if len(prefix):
            z = z + self.transition[list(prefix)].sum(axis=0)
            z[list(prefix)] = -np.inf
        return z - _logsumexp(z)


def _logsumexp(z, axis=None):
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return out.squeeze() if axis is None else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class SeqHyperparams:
    epochs: int = 300
    learning_rate: float = 0.05
    l2: float = 1e-4
    seed: int = 0


def fit_seq_model(sessions, n_items, K=5, hyperparams=SeqHyperparams()):
    """Fit the next-item model by cross-entropy on the first ``K`` purchases of each session.

    Sessions without purchases are skipped (count in ``model.info["skipped"]``).
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    ctxs, prefixes, targets = [], [], []
    skipped = 0
    all_ctx = []
    for sess in sessions:
        seq = purchase_sequence(sess)[:K]
        if not seq:
            skipped += 1
            continue
        all_ctx.append(sess.user_context)
        for k, item in enumerate(seq):
            ctxs.append(len(all_ctx) - 1)
            prefixes.append(seq[:k])
            targets.append(item)
    if not targets:
        raise EmptyDataError(f"no session has purchases ({skipped} skipped)")
    C = np.asarray(all_ctx, dtype=float)
    mean = C.mean(axis=0)
    scale = C.std(axis=0)
    scale[scale < 1e-12] = 1.0
    X = (C[ctxs] - mean) / scale
    P = np.zeros((len(targets), n_items))
    for r, pre in enumerate(prefixes):
        P[r, pre] = 1.0
    y = np.asarray(targets)
    n = len(y)
    d = X.shape[1]
    params = [np.zeros(n_items), np.zeros((d, n_items)), np.zeros((n_items, n_items))]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    lr, l2 = hyperparams.learning_rate, hyperparams.l2
    losses = []
    rows = np.arange(n)
    for epoch in range(hyperparams.epochs):
        b, W, M = params
        z = b + X @ W + P @ M
        z = np.where(P > 0, -np.inf, z)
        logp = z - _logsumexp(z, axis=1)[:, None]
        loss = -logp[rows, y].mean() + 0.5 * l2 * (np.sum(W ** 2) + np.sum(M ** 2))
        if not math.isfinite(loss):
            raise DivergenceError(f"sequence model diverged at epoch {epoch}", epoch)
        losses.append(float(loss))
        g = np.exp(logp)
        g[rows, y] -= 1.0
        g /= n
        grads = [g.sum(axis=0), X.T @ g + l2 * W, P.T @ g + l2 * M]
        for k, (p, gr) in enumerate(zip(params, grads)):
            m[k] = 0.9 * m[k] + 0.1 * gr
            v[k] = 0.999 * v[k] + 0.001 * gr ** 2
            mh = m[k] / (1 - 0.9 ** (epoch + 1))
            vh = v[k] / (1 - 0.999 ** (epoch + 1))
            params[k] = p - lr * mh / (np.sqrt(vh) + 1e-8)
    return SeqModel(*params, mean, scale,
                    info={"skipped": skipped, "examples": n, "loss_history": losses})


class DecodedSequence(NamedTuple):
    items: tuple
    step_scores: tuple
    total: float


@dataclass
class DecodeResult:
    sequences: list
    method: str


def hot_items(model, user_context, size=100):
    """The ``size`` items with the highest first-step probability."""
    lp = model.next_log_probs(user_context, [])
    order = np.lexsort((np.arange(len(lp)), -lp))
    return order[:min(size, len(lp))]


def _beam(model, user_context, K, width, allowed=None):
    n = model.n_items
    allow = np.ones(n, dtype=bool) if allowed is None else np.isin(np.arange(n), allowed)
    if K > allow.sum():
        raise ContractError(f"cannot decode {K} distinct items from {int(allow.sum())} candidates")
    base = model.base_logits(user_context)
    beams = [((), (), 0.0)]
    used = np.zeros((1, n))
    for _ in range(K):
        z = base + used @ model.transition
        z = np.where(used > 0, -np.inf, z)
        logp = z - _logsumexp(z, axis=1)[:, None]
        cand = np.where(allow & (used == 0), logp, -np.inf)
        tot = np.array([b[2] for b in beams])[:, None] + cand
        flat = tot.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        # highest total first; ties broken by beam index then item id
        order = finite[np.lexsort((finite, -flat[finite]))][:width]
        new_beams, new_used = [], []
        for f in order:
            bi, item = divmod(int(f), n)
            items, steps, total = beams[bi]
            new_beams.append((items + (item,), steps + (float(logp[bi, item]),), float(flat[f])))
            u = used[bi].copy()
            u[item] = 1.0
            new_used.append(u)
        beams, used = new_beams, np.array(new_used)
    return [DecodedSequence(i, s, t) for i, s, t in beams]


def decode(model, user_context, K=5, method="greedy", width=100, hot_set=None, hot_size=100):
    """Decode ``K`` items by ``"greedy"``, ``"beam"`` or ``"hot-beam"``.

    Beam results are sorted by total score, best first; a width larger than
    the number of feasible sequences returns all of them.
    """
    if method == "greedy":
        seqs = _beam(model, user_context, K, 1)
        return DecodeResult(seqs, "greedy")
    if width < 1:
        raise ContractError("beam width must be >= 1")
    if method == "beam":
        return DecodeResult(_beam(model, user_context, K, width), f"beam({width})")
    if method == "hot-beam":
        hot = hot_items(model, user_context, hot_size) if hot_set is None else np.asarray(hot_set)
        if not len(hot):
            raise ContractError("hot set is empty")
        return DecodeResult(_beam(model, user_context, K, width, hot), f"hot-beam({width})")
    raise ContractError(f"unknown decode method {method!r}")


def _pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.array_equal(x, y):
        return 1.0
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc / den) if den > 0 else float("nan")


def _spearman(x, y):
    return _pearson(rankdata(x), rankdata(y))


@dataclass
class UnderstandReport:
    scores: dict
    pearson: list
    spearman: list
    users: int
    width: int
    K: int
    degenerate: bool = False
    raw: dict = field(default_factory=dict)

    def to_dict(self):
        return {"scores": self.scores, "pearson": self.pearson, "spearman": self.spearman,
                "users": self.users, "width": self.width, "K": self.K,
                "degenerate": self.degenerate, "raw": self.raw}

    def score_table(self, name="dataset"):
        cols = ["top5pct", "top20pct", "greedy", "hot5pct", "hot20pct"]
        head = "Score of\t5%\t20%\tgreedy\thot 5%\thot 20%"
        return head + "\n" + name + "\t" + "\t".join(f"{self.scores[c]:.2f}" for c in cols) + "\n"

    def correlation_table(self, name="dataset"):
        lines = [f"Score of\t{name}"]
        for k in range(self.K):
            lines.append(f"{k + 1}-Pearson\t{self.pearson[k]:.2f}")
            lines.append(f"{k + 1}-Spearman\t{self.spearman[k]:.2f}")
        return "\n".join(lines) + "\n"


def quantile_count(width, frac):
    return max(1, int(round(frac * width)))


def understanding_report(model, test_users, K=5, width=100, hot_size=100):
    """Run greedy, beam and hot-beam decoding per user and aggregate both diagnostics."""
    users = np.atleast_2d(np.asarray(test_users, dtype=float))
    if not len(users):
        raise ContractError("no test users")
    n5, n20 = quantile_count(width, 0.05), quantile_count(width, 0.20)
    acc = {k: [] for k in ("top5pct", "top20pct", "greedy", "hot5pct", "hot20pct")}
    pear = [[] for _ in range(K)]
    spear = [[] for _ in range(K)]
    degenerate = False
    for ctx in users:
        beam = decode(model, ctx, K, "beam", width).sequences
        hot = decode(model, ctx, K, "hot-beam", width, hot_size=hot_size).sequences
        greedy = decode(model, ctx, K, "greedy").sequences[0]
        if len(beam) < 20:
            degenerate = True
        tot = np.array([s.total for s in beam])
        htot = np.array([s.total for s in hot])
        acc["top5pct"].append(tot[:n5].mean())
        acc["top20pct"].append(tot[:n20].mean())
        acc["greedy"].append(greedy.total)
        acc["hot5pct"].append(htot[:n5].mean())
        acc["hot20pct"].append(htot[:n20].mean())
        steps = np.array([s.step_scores for s in beam])
        prefix = np.cumsum(steps, axis=1)
        for k in range(K):
            p, s = _pearson(prefix[:, k], tot), _spearman(prefix[:, k], tot)
            if math.isfinite(p):
                pear[k].append(p)
            if math.isfinite(s):
                spear[k].append(s)
    if degenerate:
        warnings.warn("fewer than 20 beam sequences for some users; quantiles are degenerate")
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    top5 = means["top5pct"]
    scores = {k: (top5 / v if v != 0 else float("nan")) for k, v in means.items()}
    scores["top5pct"] = 1.0
    return UnderstandReport(scores, [float(np.mean(p)) if p else float("nan") for p in pear],
                            [float(np.mean(s)) if s else float("nan") for s in spear],
                            len(users), width, K, degenerate, raw=means)


def diagnose_world(world, seed=0, n_sessions=3000, max_pages=10, n_test=100, K=5, width=100,
                   hot_size=10, hyperparams=SeqHyperparams()):
    """Simulate one-item pages from ``world``, fit a sequence model and report.

    The last 200 simulated sessions are held out; the first ``n_test`` of
    them supply the test users.
    """
    from .logged_data import sessionize_and_pad
    from .synth import GenConfig, simulate_logs

    gen = GenConfig(n_sessions=n_sessions, max_pages=max_pages, page_size=1, row_size=1, seed=seed)
    sessions = sessionize_and_pad(simulate_logs(world, gen), max_pages, world.catalog.n_items)
    n_hold = min(200, n_sessions // 5)
    train, test = sessions[:-n_hold], sessions[-n_hold:]
    model = fit_seq_model(train, world.catalog.n_items, K, hyperparams)
    users = np.array([s.user_context for s in test[:n_test]])
    return understanding_report(model, users, K, width, hot_size)
