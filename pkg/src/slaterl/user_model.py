"""Purchase-probability user model, its evaluation tasks, and value estimates.

The model scores each slot of a page with a logistic output over
:func:`featurize` vectors (optionally through one tanh hidden layer). Its
outputs are row-conditional purchase probabilities; the full 22-class
page distribution and the per-item marginals follow from the unlock rule.
"""
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .env import (EpisodeConfig, Page, SlateState, action_mask, expected_page_reward,
                  feedback_distribution, state_from_vector)
from .errors import ContractError, DivergenceError, EmptyDataError
from .fileio import atomic_write_bytes, npz_bytes
from .policies_base import UniformPolicy
from .rng import make_rng
from .unlock import pattern_distribution, valid_patterns

N_AGGREGATES = 4


class FeatureSpec(NamedTuple):
    context_dim: int
    item_dim: int
    page_size: int

    @property
    def slices(self):
        c, i, p = self.context_dim, self.item_dim, self.page_size
        sizes = [("context", c), ("item", i), ("cross", c * i), ("position", p),
                 ("slate", N_AGGREGATES), ("history", i + 2)]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def dim(self):
        return self.slices["history"].stop

    @property
    def item_slots(self):
        """Boolean mask of slots that depend on the candidate item."""
        s = self.slices
        m = np.zeros(self.dim, dtype=bool)
        for name in ("item", "cross", "history"):
            m[s[name]] = True
        m[s["history"].stop - 2:s["history"].stop] = False
        m[s["slate"].start + 2:s["slate"].stop] = True
        return m


def featurize_candidates(user_context, slate, candidates, positions, catalog, history=(), page_size=9):
    """Feature rows for several candidates sharing one context.

    ``slate`` holds the items displayed alongside the candidate (the full
    page for the user model, the items chosen so far for a policy). A
    candidate that is itself in ``slate`` is excluded from its own
    co-display aggregates.
    """
    ctx = np.asarray(user_context, dtype=float)
    cands = np.asarray(candidates, dtype=int)
    catalog.check(cands.tolist())
    catalog.check(list(slate))
    pos = np.broadcast_to(np.asarray(positions, dtype=int), cands.shape)
    if np.any(pos < 0) or np.any(pos >= page_size):
        raise ContractError(f"position must be in [0, {page_size})")
    feats = catalog.features[cands]
    m = len(cands)
    cross = (ctx[None, :, None] * feats[:, None, :]).reshape(m, -1)
    onehot = np.zeros((m, page_size))
    onehot[np.arange(m), pos] = 1.0

    scale = float(np.abs(catalog.utilities).max()) or 1.0
    u = catalog.utilities / scale
    slate = np.asarray(slate, dtype=int)
    su = u[slate]
    in_slate = np.isin(cands, slate).astype(float)
    n_co = len(slate) - in_slate
    mean_co = np.divide(su.sum() - in_slate * u[cands], n_co, out=np.zeros(m), where=n_co > 0)
    if len(slate):
        max_co = np.array([su[slate != c].max() if np.any(slate != c) else 0.0 for c in cands])
    else:
        max_co = np.zeros(m)
    agg = np.column_stack([mean_co, max_co, u[cands], mean_co - u[cands]])

    bought = [i for page in history for i, f in zip(page.items, page.feedback) if f]
    hmean = catalog.features[bought].mean(axis=0) if bought else np.zeros(catalog.feature_dim)
    hist = np.column_stack([feats * hmean, np.full(m, len(bought) / page_size),
                            np.full(m, float(len(history)))])
    return np.hstack([np.broadcast_to(ctx, (m, len(ctx))), feats, cross, onehot, agg, hist])


def featurize(user_context, slate_so_far, candidate, position, catalog, history=(), page_size=9):
    """Feature vector for one candidate item at one slot."""
    return featurize_candidates(user_context, slate_so_far, [candidate], [position],
                                catalog, history, page_size)[0]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


class Glm:
    """Logistic regression with an optional tanh hidden layer, parameters in one flat vector."""

    def __init__(self, n_in, hidden=0):
        self.n_in = n_in
        self.hidden = hidden

    @property
    def n_params(self):
        h = self.hidden
        return (self.n_in * h + h + h + 1) if h else self.n_in + 1

    def unpack(self, theta):
        n, h = self.n_in, self.hidden
        if not h:
            return None, None, theta[:n], theta[n]
        w1 = theta[:n * h].reshape(n, h)
        b1 = theta[n * h:n * h + h]
        w2 = theta[n * h + h:n * h + 2 * h]
        return w1, b1, w2, theta[-1]

    def init(self, rng):
        theta = np.zeros(self.n_params)
        if self.hidden:
            n, h = self.n_in, self.hidden
            theta[:n * h] = rng.standard_normal(n * h) / np.sqrt(n)
            theta[n * h + h:n * h + 2 * h] = rng.standard_normal(h) / np.sqrt(h)
        return theta

    def hidden_activations(self, theta, X):
        w1, b1, _, _ = self.unpack(theta)
        return np.tanh(X @ w1 + b1)

    def logits(self, theta, X):
        w1, b1, w2, b2 = self.unpack(theta)
        if w1 is None:
            return X @ w2 + b2
        return np.tanh(X @ w1 + b1) @ w2 + b2

    def loss_and_grad(self, theta, X, y, l2=0.0):
        """Mean binary cross-entropy plus ``l2/2 * |weights|^2`` and its gradient."""
        w1, b1, w2, b2 = self.unpack(theta)
        n = len(y)
        if w1 is None:
            z = X @ w2 + b2
        else:
            hid = np.tanh(X @ w1 + b1)
            z = hid @ w2 + b2
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        dz = (_sigmoid(z) - y) / n
        grad = np.zeros_like(theta)
        if w1 is None:
            grad[:-1] = X.T @ dz + l2 * w2
            grad[-1] = dz.sum()
            loss += 0.5 * l2 * np.dot(w2, w2)
        else:
            nn, h = self.n_in, self.hidden
            dh = np.outer(dz, w2) * (1 - hid ** 2)
            grad[:nn * h] = (X.T @ dh + l2 * w1).ravel()
            grad[nn * h:nn * h + h] = dh.sum(axis=0)
            grad[nn * h + h:nn * h + 2 * h] = hid.T @ dz + l2 * w2
            grad[-1] = dz.sum()
            loss += 0.5 * l2 * (np.sum(w1 ** 2) + np.dot(w2, w2))
        return float(loss), grad


@dataclass(frozen=True)
class UserModelHyperparams:
    hidden: int = 0
    epochs: int = 300
    learning_rate: float = 0.5
    l2: float = 1e-4
    seed: int = 0


@dataclass(eq=False)
class UserModel:
    """Fitted user model; implements the environment's response-model interface."""

    spec: FeatureSpec
    catalog: object
    theta: np.ndarray
    hidden: int
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    continue_theta: np.ndarray
    row_size: int = 3
    trained_on: str = ""

    @property
    def context_dim(self):
        return self.spec.context_dim

    @property
    def glm(self):
        return Glm(self.spec.dim, self.hidden)

    def _X(self, user_context, slate, history):
        slate = tuple(int(i) for i in slate)
        if len(slate) != self.spec.page_size:
            raise ContractError(f"slate must have {self.spec.page_size} items")
        X = featurize_candidates(user_context, slate, slate, np.arange(len(slate)), self.catalog,
                                 history, self.spec.page_size)
        return (X - self.feat_mean) / self.feat_scale

    def conditional_probs(self, user_context, slate, history=()):
        return _sigmoid(self.glm.logits(self.theta, self._X(user_context, slate, history)))

    def continue_probability(self, user_context, slate, feedback, history=()):
        x = _continue_features(user_context, slate, feedback, self.catalog, self.row_size)
        return float(_sigmoid(x @ self.continue_theta[:-1] + self.continue_theta[-1]))

    def observation_encoder(self, config):
        """State-vector -> hidden-layer embedding (requires a hidden layer)."""
        if not self.hidden:
            raise ContractError("observation embedding needs a model with a hidden layer")

        def encode(vec):
            s = state_from_vector(vec, config, self.context_dim)
            pos = min(len(s.chosen_items), self.spec.page_size - 1)
            x = featurize_candidates(s.user_context, s.chosen_items, [0], [pos], self.catalog,
                                     s.history, self.spec.page_size)
            x[:, self.spec.item_slots] = 0.0
            return self.glm.hidden_activations(self.theta, (x - self.feat_mean) / self.feat_scale)[0]
        return encode


def _continue_features(user_context, slate, feedback, catalog, row_size):
    fb = np.asarray(feedback, dtype=float)
    u = catalog.utilities[np.asarray(slate, dtype=int)]
    scale = float(np.abs(catalog.utilities).max()) or 1.0
    n_rows = len(fb) // row_size
    rows_done = sum(1 for k in range(n_rows) if fb[k * row_size:(k + 1) * row_size].all())
    return np.concatenate([np.asarray(user_context, dtype=float),
                           [fb.mean(), rows_done / n_rows, float(fb @ u) / (scale * len(fb))]])


@dataclass
class FitReport:
    epochs_run: int
    final_loss: float
    loss_history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def _page_rows(sessions, catalog, config):
    """Training rows: every slot whose row was open when the user saw the page."""
    X, y, ctx_rows, cont_y = [], [], [], []
    ps, rs = config.page_size, config.row_size
    for sess in sessions:
        ctx = sess.user_context
        history = ()
        real = sess.real_pages
        for k, page in enumerate(real):
            items, fb = tuple(page.exposed_items), tuple(page.user_feedback)
            open_n = 0
            for r in range(ps // rs):
                open_n = (r + 1) * rs
                if not all(fb[r * rs:(r + 1) * rs]):
                    break
            Xp = featurize_candidates(ctx, items, items[:open_n], np.arange(open_n), catalog, history, ps)
            X.append(Xp)
            y.extend(fb[:open_n])
            if config.max_pages > 1 and k < config.max_pages - 1:
                ctx_rows.append(_continue_features(ctx, items, fb, catalog, rs))
                cont_y.append(1.0 if k + 1 < len(real) else 0.0)
            history = history + (Page(items, fb),)
    if not X:
        raise EmptyDataError("no training pages")
    return np.vstack(X), np.asarray(y, dtype=float), ctx_rows, cont_y


def _gradient_descent(glm, theta, X, y, epochs, lr, l2, label):
    history = []
    for epoch in range(epochs):
        loss, grad = glm.loss_and_grad(theta, X, y, l2)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"{label}: loss became non-finite at epoch {epoch}", epoch)
        history.append(loss)
        theta = theta - lr * grad
    return theta, history


def fit_user_model(sessions, catalog, config=EpisodeConfig(), hyperparams=UserModelHyperparams(),
                   trained_on=""):
    """Fit item-wise purchase probabilities by full-batch gradient descent."""
    if hyperparams.learning_rate <= 0:
        raise ContractError("learning rate must be positive")
    sessions = list(sessions)
    if not sessions:
        raise EmptyDataError("no training sessions")
    X, y, cX, cy = _page_rows(sessions, catalog, config)
    spec = FeatureSpec(len(sessions[0].user_context), catalog.feature_dim, config.page_size)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    glm = Glm(spec.dim, hyperparams.hidden)
    rng = make_rng(hyperparams.seed, "user-model")
    theta, hist = _gradient_descent(glm, glm.init(rng), Xs, y, hyperparams.epochs,
                                    hyperparams.learning_rate, hyperparams.l2, "user model")
    cglm = Glm(spec.context_dim + 3)
    ctheta = np.zeros(cglm.n_params)
    if cy:
        ctheta, _ = _gradient_descent(cglm, ctheta, np.array(cX), np.array(cy),
                                      hyperparams.epochs, hyperparams.learning_rate,
                                      hyperparams.l2, "continue head")
    model = UserModel(spec, catalog, theta, hyperparams.hidden, mean, scale, ctheta,
                      config.row_size, trained_on)
    final = glm.loss_and_grad(theta, Xs, y, hyperparams.l2)[0]
    return model, FitReport(hyperparams.epochs, final, hist)


def predict_slate(model, user_context, slate, history=(), row_size=3):
    """Marginal purchase probabilities, the distribution over valid patterns, and P(continue).

    The continue probability is averaged over the feedback distribution.
    """
    slate = tuple(int(i) for i in slate)
    q = np.asarray(model.conditional_probs(user_context, slate, history))
    if len(q) != len(slate):
        raise ContractError("model returned the wrong number of probabilities")
    dist = pattern_distribution(q, row_size)
    pats = valid_patterns(len(slate), row_size)
    marg = dist @ pats
    cont = sum(p * model.continue_probability(user_context, slate, tuple(pat), history)
               for p, pat in zip(dist, pats) if p > 0)
    return marg, dist, float(cont)


def auc(scores, labels):
    """Area under the ROC curve (ties count one half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_user_model(model, sessions, catalog, config=EpisodeConfig(), threshold=0.5):
    """Slate-wise, item-wise and rank metrics plus page reward error statistics.

    ``model`` is anything with the response-model interface.
    """
    pats = valid_patterns(config.page_size, config.row_size)
    marg_all, fb_all, slate_hits, page_aucs, errors = [], [], [], [], []
    n_pages = 0
    for sess in sessions:
        history = ()
        for page in sess.real_pages:
            items, fb = tuple(page.exposed_items), np.asarray(page.user_feedback)
            marg, dist, _ = predict_slate(model, sess.user_context, items, history, config.row_size)
            slate_hits.append(bool(np.array_equal(pats[int(np.argmax(dist))], fb)))
            marg_all.append(marg)
            fb_all.append(fb)
            if 0 < fb.sum() < len(fb):
                page_aucs.append(auc(marg, fb))
            u = catalog.utilities[list(items)]
            disc = config.gamma ** np.arange(len(items))
            errors.append(float(np.sum(disc * marg * u) - np.sum(disc * fb * u)))
            history = history + (Page(items, tuple(int(x) for x in fb)),)
            n_pages += 1
    if not n_pages:
        raise EmptyDataError("no test pages")
    m = np.concatenate(marg_all)
    y = np.concatenate(fb_all).astype(bool)
    pred = m >= threshold
    tp = float(np.sum(pred & y))
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / y.sum() if y.sum() else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    err = np.asarray(errors)
    return {
        "pages": n_pages,
        "slate_accuracy": float(np.mean(slate_hits)),
        "item_auc": auc(m, y),
        "item_accuracy": float(np.mean(pred == y)),
        "rank_auc": float(np.mean(page_aucs)) if page_aucs else float("nan"),
        "rank_precision": float(precision),
        "rank_recall": float(recall),
        "rank_f1": float(f1),
        "reward_error_mean": float(err.mean()),
        "reward_error_abs": float(np.abs(err).mean()),
        "reward_error_std": float(err.std()),
    }


def format_metric_tables(rows):
    """Supervised-task table and reward-error table; ``rows`` maps model name -> metrics."""
    cols = [("Slate acc", "slate_accuracy"), ("Item AUC", "item_auc"), ("Item acc", "item_accuracy"),
            ("Rank AUC", "rank_auc"), ("Rank prec", "rank_precision"), ("Rank recall", "rank_recall"),
            ("Rank F1", "rank_f1")]
    lines = ["Model\t" + "\t".join(c for c, _ in cols)]
    for name, m in rows.items():
        lines.append(name + "\t" + "\t".join(f"{m[k]:.3f}" for _, k in cols))
    lines.append("")
    lines.append("Model\tReward error (mean / abs / std)")
    for name, m in rows.items():
        lines.append(f"{name}\t{m['reward_error_mean']:.1f} / {m['reward_error_abs']:.1f} / "
                     f"{m['reward_error_std']:.1f}")
    return "\n".join(lines) + "\n"


CHECKPOINT_FORMAT = "slaterl-user-model/1"


def save_user_model(model, path):
    """Write a self-describing ``.npz`` checkpoint (arrays stored verbatim)."""
    meta = {"format": CHECKPOINT_FORMAT, "feature_spec": model.spec._asdict(),
            "hidden": model.hidden, "row_size": model.row_size, "trained_on": model.trained_on}
    data = npz_bytes(meta=np.array(json.dumps(meta, sort_keys=True)), theta=model.theta,
                     feat_mean=model.feat_mean, feat_scale=model.feat_scale,
                     continue_theta=model.continue_theta, utilities=model.catalog.utilities,
                     features=model.catalog.features)
    atomic_write_bytes(path, data)


def load_user_model(path):
    from .catalog import Catalog

    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format {meta.get('format')!r}")
        return UserModel(FeatureSpec(**meta["feature_spec"]), Catalog(z["utilities"], z["features"]),
                         z["theta"], meta["hidden"], z["feat_mean"], z["feat_scale"],
                         z["continue_theta"], meta["row_size"], meta["trained_on"])


class ValueModel:
    """Model-based reward and action-value estimates for doubly robust CPE.

    ``reward_estimates`` gives the expected immediate reward of an action
    (non-zero only when it completes a page). ``q_values`` averages
    ``n_samples`` rollouts of ``policy`` in the model environment after
    taking the action; page rewards inside rollouts are replaced by their
    model expectation and only transitions are sampled.
    """

    def __init__(self, model, catalog, config, policy=None, n_samples=8, horizon=None, seed=0):
        self.model = model
        self.catalog = catalog
        self.config = config
        self.policy = policy or UniformPolicy()
        self.n_samples = n_samples
        self.horizon = config.horizon if horizon is None else horizon
        self.seed = seed

    def _check(self, state, actions):
        valid = set(action_mask(state, self.catalog, self.config).tolist())
        bad = [a for a in np.asarray(actions).tolist() if a not in valid]
        if bad:
            raise ContractError(f"actions {bad} are masked out at this state")

    def reward_estimates(self, state, actions):
        self._check(state, actions)
        out = np.zeros(len(actions))
        if len(state.chosen_items) + 1 == self.config.page_size:
            for k, a in enumerate(np.asarray(actions).tolist()):
                out[k] = expected_page_reward(self.model, state, state.chosen_items + (a,),
                                              self.catalog, self.config)
        return out

    def _advance(self, state, a, rng):
        """One transition with expected page reward; returns ``(next_state, reward)``."""
        cfg = self.config
        chosen = state.chosen_items + (int(a),)
        if len(chosen) < cfg.page_size:
            return SlateState(state.user_context, chosen, state.page_index, state.step_index + 1,
                              state.history), 0.0
        dist = feedback_distribution(self.model, state, chosen, state.history, cfg)
        pats = valid_patterns(cfg.page_size, cfg.row_size)
        reward = float(dist @ pats @ (cfg.gamma ** np.arange(cfg.page_size)
                                      * self.catalog.utilities[list(chosen)]))
        page = state.page_index + 1
        if page >= cfg.max_pages:
            return SlateState(state.user_context, (), page, page * cfg.page_size,
                              state.history + (Page(chosen, (0,) * cfg.page_size),), True), reward
        fb = tuple(int(x) for x in pats[rng.choice(len(pats), p=dist)])
        cont = self.model.continue_probability(state.user_context, chosen, fb, state.history)
        stop = not rng.random() < cont
        return SlateState(state.user_context, (), page, page * cfg.page_size,
                          state.history + (Page(chosen, fb),), stop), reward

    def q_values(self, state, actions, policy=None):
        self._check(state, actions)
        policy = policy or self.policy
        gamma = self.config.gamma
        key = (state.user_context, state.chosen_items, state.page_index, state.history)
        out = np.zeros(len(actions))
        for k, a in enumerate(np.asarray(actions).tolist()):
            total = 0.0
            for n in range(self.n_samples):
                rng = make_rng(self.seed, "q", repr(key), a, n)
                s, ret = self._advance(state, a, rng)
                disc, steps = gamma, 1
                while not s.terminal and steps < self.horizon:
                    mask = action_mask(s, self.catalog, self.config)
                    b, _ = policy.sample(s, mask, rng)
                    s, r = self._advance(s, b, rng)
                    ret += disc * r
                    disc *= gamma
                    steps += 1
                total += ret
                if s.terminal and steps == 1 and state.page_index + 1 >= self.config.max_pages:
                    # deterministic: no sampled transition influenced the return
                    total = ret * self.n_samples
                    break
            out[k] = total / self.n_samples
        return out


def value_estimates(value_model, state, policy):
    """``(V(s), {action: Q(s, a)})`` for every valid action under ``policy``."""
    if state.terminal:
        return 0.0, {}
    mask = action_mask(state, value_model.catalog, value_model.config)
    q = value_model.q_values(state, mask, policy)
    pi = policy.action_probabilities(state, mask)
    return float(pi @ q), dict(zip(mask.tolist(), q.tolist()))
