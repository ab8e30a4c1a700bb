"""Policies and desk-scale learners.

* :func:`bc_fit` - behavior cloning (softmax regression on logged actions)
* :func:`batch_q_learn` - fitted Q iteration with a BCQ-style action filter
* :func:`reinforce_online` - episodic REINFORCE against an environment
* :func:`evaluate_online` - Monte Carlo policy value in an environment

All learners share the user model's featurization.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import Catalog
from .cpe import Trajectory, TrajStep
from .env import EpisodeConfig, state_from_vector
from .errors import ContractError, DivergenceError, EmptyDataError, EpisodeError, SlateRLError
from .fileio import append_jsonl, atomic_write_bytes, npz_bytes
from .policies_base import FixedPolicy, Policy, UniformPolicy, check_distribution, softmax
from .rng import make_rng
from .user_model import featurize_candidates

__all__ = ["Policy", "UniformPolicy", "FixedPolicy", "LinearSoftmaxPolicy", "BcqPolicy",
           "LearnerConfig", "EvalResult", "bc_fit", "batch_q_learn", "reinforce_online",
           "reinforce_gradient", "evaluate_online", "save_policy", "load_policy", "append_run_log"]


@dataclass(frozen=True)
class LearnerConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    gamma: float = 1.0
    seed: int = 0
    bcq_threshold: float = 0.3
    l2: float = 1e-4
    fqi_iterations: int = 30
    batch_episodes: int = 32
    n_batches: int = 100

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must be in (0, 1]")
        if not 0 <= self.bcq_threshold <= 1:
            raise ContractError("bcq_threshold must be in [0, 1]")


class LinearSoftmaxPolicy(Policy):
    """``pi(a|s) ∝ exp(w · phi(s, a) / temperature)`` over the mask.

    With ``greedy=True`` all mass goes to the highest-scoring item.
    """

    def __init__(self, weights, catalog, config, feat_mean=None, feat_scale=None,
                 temperature=1.0, greedy=False):
        self.weights = np.asarray(weights, dtype=float)
        self.catalog = catalog
        self.config = config
        self.feat_mean = np.zeros_like(self.weights) if feat_mean is None else np.asarray(feat_mean)
        self.feat_scale = np.ones_like(self.weights) if feat_scale is None else np.asarray(feat_scale)
        self.temperature = temperature
        self.greedy = greedy
        self.info = {}

    def features(self, state, mask):
        X = featurize_candidates(state.user_context, state.chosen_items, mask,
                                 len(state.chosen_items), self.catalog, state.history,
                                 self.config.page_size)
        return (X - self.feat_mean) / self.feat_scale

    def scores(self, state, mask):
        return self.features(state, mask) @ self.weights

    def action_probabilities(self, state, mask):
        s = self.scores(state, mask)
        if self.greedy:
            p = np.zeros(len(mask))
            p[int(np.argmax(s))] = 1.0
            return p
        return check_distribution(softmax(s / self.temperature), mask)

    def grad_log_prob(self, state, mask, action):
        """Gradient of ``log pi(action|state)`` with respect to the weights."""
        X = self.features(state, mask)
        p = softmax(X @ self.weights / self.temperature)
        k = int(np.flatnonzero(np.asarray(mask) == action)[0])
        return (X[k] - p @ X) / self.temperature

    def with_weights(self, weights):
        return LinearSoftmaxPolicy(weights, self.catalog, self.config, self.feat_mean,
                                   self.feat_scale, self.temperature, self.greedy)


class BcqPolicy(Policy):
    """Greedy over a linear Q restricted to actions the cloned policy finds plausible."""

    def __init__(self, q_weights, bc_policy, threshold):
        self.q_weights = np.asarray(q_weights, dtype=float)
        self.bc = bc_policy
        self.threshold = threshold
        self.fallbacks = 0
        self.info = {}

    def allowed(self, state, mask, bc_probs=None):
        p = self.bc.action_probabilities(state, mask) if bc_probs is None else bc_probs
        return p >= self.threshold * p.max()

    def q(self, state, mask):
        return self.bc.features(state, mask) @ self.q_weights

    def action_probabilities(self, state, mask):
        bc_p = self.bc.action_probabilities(state, mask)
        ok = self.allowed(state, mask, bc_p)
        out = np.zeros(len(mask))
        if not ok.any():
            self.fallbacks += 1
            out[int(np.argmax(bc_p))] = 1.0
            return out
        q = np.where(ok, self.q(state, mask), -np.inf)
        out[int(np.argmax(q))] = 1.0
        return out


def _standardizer(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


class _Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def _decode(samples, config, context_dim, next_=False):
    key = "next_state" if next_ else "state"
    return [state_from_vector(getattr(s, key), config, context_dim) for s in samples]


def _grouped_features(states, masks, catalog, config):
    rows, starts = [], []
    n = 0
    for st, m in zip(states, masks):
        X = featurize_candidates(st.user_context, st.chosen_items, np.asarray(m, dtype=int),
                                 len(st.chosen_items), catalog, st.history, config.page_size)
        starts.append(n)
        n += len(X)
        rows.append(X)
    return np.vstack(rows), np.asarray(starts)


def _group_softmax(scores, starts):
    mx = np.maximum.reduceat(scores, starts)
    sizes = np.diff(np.append(starts, len(scores)))
    e = np.exp(scores - np.repeat(mx, sizes))
    return e / np.repeat(np.add.reduceat(e, starts), sizes), sizes


def bc_fit(samples, catalog, config, context_dim, lc=LearnerConfig()):
    """Behavior cloning: maximise the log-likelihood of logged actions over their masks."""
    samples = list(samples)
    if not samples:
        raise EmptyDataError("no samples to clone")
    states = _decode(samples, config, context_dim)
    masks = [s.action_mask for s in samples]
    X, starts = _grouped_features(states, masks, catalog, config)
    mean, scale = _standardizer(X)
    X = (X - mean) / scale
    target = np.array([starts[k] + list(m).index(s.action) for k, (s, m) in enumerate(zip(samples, masks))])
    n = len(samples)
    w = np.zeros(X.shape[1])
    opt = _Adam(len(w), lc.learning_rate)
    losses = []
    for epoch in range(lc.epochs):
        p, sizes = _group_softmax(X @ w, starts)
        loss = -np.mean(np.log(p[target] + 1e-300)) + 0.5 * lc.l2 * w @ w
        if not np.isfinite(loss):
            raise DivergenceError(f"behavior cloning diverged at epoch {epoch}", epoch)
        losses.append(float(loss))
        expect = np.add.reduceat(p[:, None] * X, starts)
        grad = (expect.sum(axis=0) - X[target].sum(axis=0)) / n + lc.l2 * w
        w = w - opt.step(grad)
    pol = LinearSoftmaxPolicy(w, catalog, config, mean, scale)
    pol.info["loss_history"] = losses
    return pol


def batch_q_learn(samples, catalog, config, context_dim, lc=LearnerConfig(), bc_policy=None,
                  ridge=1e-3):
    """Fitted Q iteration over logged transitions with a BCQ-style filter.

    The bootstrap target only maximises over next actions whose cloned
    probability is at least ``bcq_threshold`` times the largest one.
    """
    samples = list(samples)
    if not samples:
        raise EmptyDataError("no samples")
    bc = bc_policy or bc_fit(samples, catalog, config, context_dim, lc)
    states = _decode(samples, config, context_dim)
    X = np.vstack([bc.features(st, np.array([s.action])) for st, s in zip(states, samples)])
    r = np.array([s.reward for s in samples])
    live = [k for k, s in enumerate(samples) if not s.terminal]
    nstates = _decode([samples[k] for k in live], config, context_dim, next_=True)
    nmasks = [samples[k].next_action_mask for k in live]
    fallbacks = 0
    if live:
        NX, starts = _grouped_features(nstates, nmasks, catalog, config)
        NX = (NX - bc.feat_mean) / bc.feat_scale
        bp, sizes = _group_softmax(NX @ bc.weights, starts)
        gmax = np.repeat(np.maximum.reduceat(bp, starts), sizes)
        allowed = bp >= lc.bcq_threshold * gmax
        empty = np.add.reduceat(allowed.astype(int), starts) == 0
        fallbacks = int(empty.sum())
        allowed |= np.repeat(empty, sizes) & (bp == gmax)
    A = X.T @ X + ridge * np.eye(X.shape[1])
    w = np.zeros(X.shape[1])
    for _ in range(lc.fqi_iterations):
        y = r.copy()
        if live:
            q = np.where(allowed, NX @ w, -np.inf)
            y[live] += lc.gamma * np.maximum.reduceat(q, starts)
        w_new = np.linalg.solve(A, X.T @ y)
        if not np.all(np.isfinite(w_new)):
            raise DivergenceError("fitted Q iteration diverged")
        w = w_new
    pol = BcqPolicy(w, bc, lc.bcq_threshold)
    pol.info["filter_fallbacks"] = fallbacks
    return pol


def rollout(env, policy, seed):
    """Play one episode; returns a :class:`Trajectory` with per-step propensities."""
    state = env.reset(seed=seed)
    rng = make_rng(seed, "actions")
    steps = []
    while not state.terminal:
        mask = env.action_mask(state)
        a, p = policy.sample(state, mask, rng)
        res = env.step(a, state)
        steps.append(TrajStep(state, a, p, res.reward, tuple(mask.tolist())))
        state = res.next_state
    return Trajectory(tuple(steps))


def reinforce_gradient(episodes, policy, gamma, weights=None, baseline=True):
    """Score-function estimate of the gradient of expected discounted return.

    ``sum_t grad log pi(a_t|s_t) * (sum_{t'>=t} gamma^t' r_t' - b_t)``
    averaged over episodes (or weighted by ``weights``). The baseline ``b_t``
    is the mean discounted return-to-go at step ``t`` across the batch.
    """
    n = len(episodes)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    togo = []
    for ep in episodes:
        r = ep.rewards * gamma ** np.arange(len(ep))
        togo.append(np.cumsum(r[::-1])[::-1])
    base = np.zeros(max((len(e) for e in episodes), default=0))
    if baseline:
        cnt = np.zeros_like(base)
        for g in togo:
            base[:len(g)] += g
            cnt[:len(g)] += 1
        base = np.divide(base, cnt, out=np.zeros_like(base), where=cnt > 0)
    grad = np.zeros_like(policy.weights)
    for wk, ep, g in zip(w, episodes, togo):
        for t, s in enumerate(ep.steps):
            grad += wk * (g[t] - base[t]) * policy.grad_log_prob(s.state, np.asarray(s.action_mask), s.action)
    return grad


def reinforce_online(env_factory, lc=LearnerConfig(), temperature=1.0):
    """Episodic REINFORCE with a mean-return baseline and Adam ascent.

    ``env_factory()`` must return an environment whose ``reset(seed=...)``
    draws its own user. The training curve (mean discounted return per
    batch) is stored in ``policy.info["training_curve"]``.
    """
    env = env_factory()
    probe = UniformPolicy()
    Xs = []
    for k in range(8):
        ep = rollout(env, probe, ("pg-probe", lc.seed, k))
        for s in ep.steps:
            Xs.append(featurize_candidates(s.state.user_context, s.state.chosen_items,
                                           np.asarray(s.action_mask), len(s.state.chosen_items),
                                           env.catalog, s.state.history, env.config.page_size))
    mean, scale = _standardizer(np.vstack(Xs))
    policy = LinearSoftmaxPolicy(np.zeros(len(mean)), env.catalog, env.config, mean, scale, temperature)
    opt = _Adam(len(mean), lc.learning_rate)
    curve = []
    for b in range(lc.n_batches):
        eps = [rollout(env, policy, ("pg", lc.seed, b, e)) for e in range(lc.batch_episodes)]
        curve.append(float(np.mean([e.discounted_return(lc.gamma) for e in eps])))
        grad = reinforce_gradient(eps, policy, lc.gamma)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"policy gradient became non-finite at batch {b}", b)
        policy.weights = policy.weights + opt.step(grad)
    policy.info["training_curve"] = curve
    return policy


@dataclass
class EvalResult:
    mean: float
    std: float
    episodes: int
    returns: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractError("episode count must be >= 1")

    @property
    def stderr(self):
        return self.std / np.sqrt(self.episodes)

    def __str__(self):
        return f"{self.mean:.1f}(±{self.std:.1f})"

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "episodes": self.episodes}


def evaluate_online(policy, env_factory, episodes, seed=0, gamma=None):
    """Mean and standard deviation of discounted episode returns."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    env = env_factory()
    gamma = env.config.gamma if gamma is None else gamma
    returns = []
    for i in range(episodes):
        try:
            ep = rollout(env, policy, ("eval", seed, i))
        except SlateRLError as exc:
            raise EpisodeError(str(exc), i) from exc
        returns.append(ep.discounted_return(gamma))
    r = np.asarray(returns)
    return EvalResult(float(r.mean()), float(r.std()), episodes, returns)


POLICY_FORMAT = "slaterl-policy/1"


def save_policy(policy, path):
    """Self-describing ``.npz`` checkpoint, same conventions as the user model."""
    if isinstance(policy, BcqPolicy):
        kind, bc = "bcq", policy.bc
        extra = {"q_weights": policy.q_weights}
    elif isinstance(policy, LinearSoftmaxPolicy):
        kind, bc, extra = "linear-softmax", policy, {}
    else:
        raise ContractError(f"cannot checkpoint {type(policy).__name__}")
    meta = {"format": POLICY_FORMAT, "kind": kind, "temperature": bc.temperature,
            "greedy": bc.greedy, "config": bc.config.to_dict(),
            "threshold": getattr(policy, "threshold", None)}
    data = npz_bytes(meta=np.array(json.dumps(meta, sort_keys=True)), weights=bc.weights,
                     feat_mean=bc.feat_mean, feat_scale=bc.feat_scale, utilities=bc.catalog.utilities,
                     features=bc.catalog.features, **extra)
    atomic_write_bytes(path, data)


def load_policy(path):
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != POLICY_FORMAT:
            raise ContractError(f"unsupported policy format {meta.get('format')!r}")
        bc = LinearSoftmaxPolicy(z["weights"], Catalog(z["utilities"], z["features"]),
                                 EpisodeConfig(**meta["config"]), z["feat_mean"], z["feat_scale"],
                                 meta["temperature"], meta["greedy"])
        if meta["kind"] == "bcq":
            return BcqPolicy(z["q_weights"], bc, meta["threshold"])
        return bc


def append_run_log(path, record):
    """Append one JSON record to a run log, rewriting the file atomically."""
    append_jsonl(path, record)
