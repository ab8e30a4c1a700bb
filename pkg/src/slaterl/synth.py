"""Ground-truth synthetic worlds, log simulation and exact policy values.

A world assigns each (user, item) pair a purchase logit

    bias_i + <z_u, v_i> + decoy * (mean utility of co-displayed items - u_i) / u_scale
           + long_term * [predecessor of i was bought on an earlier page]

where ``z_u`` is the user's portrait. Items are grouped into chains; buying
one chain member makes its successor attractive on later pages, which is the
long-term effect a greedy recommender cannot see.
"""
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .catalog import Catalog
from .env import (EpisodeConfig, Page, SlateState, action_mask, initial_state,
                  page_reward)
from .errors import ConfigurationError, EnumerationSizeError
from .fileio import atomic_write_text
from .logged_data import LoggedRow
from .policies_base import Policy, softmax
from .rng import make_rng
from .unlock import pattern_distribution, valid_patterns


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(eq=False)
class WorldSpec:
    catalog: Catalog
    item_bias: np.ndarray
    item_latent: np.ndarray
    click_projection: np.ndarray
    successor: np.ndarray
    decoy_coef: float = 0.0
    long_term_coef: float = 0.0
    continue_bias: float = 1.0
    continue_coef: float = 1.0
    click_noise: float = 0.1
    user_scale: float = 1.0
    seed: int = 0
    name: str = "world"
    _predecessor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.item_bias = np.asarray(self.item_bias, dtype=float)
        self.item_latent = np.asarray(self.item_latent, dtype=float).reshape(self.catalog.n_items, -1)
        self.click_projection = np.asarray(self.click_projection, dtype=float).reshape(self.portrait_dim, -1)
        self.successor = np.asarray(self.successor, dtype=int)
        pred = np.full(self.catalog.n_items, -1)
        for i, s in enumerate(self.successor):
            if s >= 0:
                pred[s] = i
        self._predecessor = pred

    @property
    def portrait_dim(self):
        return self.item_latent.shape[1]

    @property
    def click_dim(self):
        return self.click_projection.shape[1]

    @property
    def context_dim(self):
        return self.portrait_dim + self.click_dim

    @property
    def utility_scale(self):
        return float(np.abs(self.catalog.utilities).max()) or 1.0

    def sample_user(self, rng):
        z = self.user_scale * rng.standard_normal(self.portrait_dim)
        clicks = np.tanh(z @ self.click_projection) + self.click_noise * rng.standard_normal(self.click_dim)
        return np.concatenate([z, clicks])

    def sample_users(self, n, rng):
        return np.array([self.sample_user(rng) for _ in range(n)])

    def long_term_boost(self, items, history):
        bought = {i for page in history for i, f in zip(page.items, page.feedback) if f}
        pred = self._predecessor[np.asarray(items, dtype=int)]
        return np.array([self.long_term_coef if p >= 0 and p in bought else 0.0 for p in pred])

    def attraction(self, user_context, items, history=()):
        """Purchase logit ignoring co-displayed items."""
        items = np.asarray(items, dtype=int)
        z = np.asarray(user_context, dtype=float)[:self.portrait_dim]
        return self.item_bias[items] + self.item_latent[items] @ z + self.long_term_boost(items, history)

    def conditional_probs(self, user_context, slate, history=()):
        slate = np.asarray(slate, dtype=int)
        logit = self.attraction(user_context, slate, history)
        if self.decoy_coef and len(slate) > 1:
            u = self.catalog.utilities[slate]
            others = (u.sum() - u) / (len(slate) - 1)
            logit = logit + self.decoy_coef * (others - u) / self.utility_scale
        return _sigmoid(logit)

    def continue_probability(self, user_context, slate, feedback, history=()):
        frac = float(np.mean(feedback))
        return float(_sigmoid(self.continue_bias + self.continue_coef * frac))

    def to_dict(self):
        return {
            "format": "slaterl-world/1", "name": self.name, "seed": self.seed,
            "catalog": self.catalog.to_dict(), "item_bias": self.item_bias.tolist(),
            "item_latent": self.item_latent.tolist(), "click_projection": self.click_projection.tolist(),
            "successor": self.successor.tolist(), "decoy_coef": self.decoy_coef,
            "long_term_coef": self.long_term_coef, "continue_bias": self.continue_bias,
            "continue_coef": self.continue_coef, "click_noise": self.click_noise,
            "user_scale": self.user_scale,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "slaterl-world/1":
            raise ConfigurationError(f"unsupported world format {d.get('format')!r}")
        kw = {k: d[k] for k in ("name", "seed", "item_bias", "item_latent", "click_projection",
                                "successor", "decoy_coef", "long_term_coef", "continue_bias",
                                "continue_coef", "click_noise", "user_scale")}
        return cls(catalog=Catalog.from_dict(d["catalog"]), **kw)


def save_world(world, path):
    atomic_write_text(path, json.dumps(world.to_dict(), indent=1) + "\n")


def load_world(path):
    with open(path) as fh:
        return WorldSpec.from_dict(json.load(fh))


def generate_world(seed=0, n_items=40, portrait_dim=4, click_dim=4, n_chains=4, chain_length=5,
                   decoy_coef=0.5, long_term_coef=0.0, page_size=9, chain_bias=-6.0, teaser_bias=-1.5,
                   base_bias=-1.0, affinity=0.4, continue_bias=2.5, continue_coef=1.0,
                   name="world"):
    """Build a world deterministically from ``seed``.

    The first ``n_chains * chain_length`` items form chains. A chain's head
    (the teaser) has an ordinary attraction ``teaser_bias``; later members
    are rarely bought on their own (``chain_bias``). Chain items carry high
    utility.
    """
    if page_size > n_items:
        raise ConfigurationError(f"page_size {page_size} exceeds catalog size {n_items}")
    if n_chains * chain_length > n_items:
        raise ConfigurationError("chains do not fit in the catalog")
    if not all(np.isfinite([decoy_coef, long_term_coef, chain_bias, teaser_bias, base_bias, affinity])):
        raise ConfigurationError("effect parameters must be finite")
    rng = make_rng(seed, "world")
    latent = affinity * rng.standard_normal((n_items, portrait_dim)) / np.sqrt(portrait_dim)
    bias = base_bias + 0.5 * rng.standard_normal(n_items)
    utilities = np.round(rng.uniform(2.0, 12.0, n_items), 2)
    successor = np.full(n_items, -1)
    n_chain_items = n_chains * chain_length
    bias[:n_chain_items] = chain_bias
    utilities[:n_chain_items] = np.round(rng.uniform(15.0, 25.0, n_chain_items), 2)
    for c in range(n_chains):
        members = range(c * chain_length, (c + 1) * chain_length)
        bias[members[0]] = teaser_bias
        for a, b in zip(members, list(members)[1:]):
            successor[a] = b
    chain_code = np.zeros((n_items, 1))
    chain_code[:n_chain_items] = 1.0
    features = np.hstack([latent, utilities[:, None] / utilities.max(), chain_code])
    proj = rng.standard_normal((portrait_dim, click_dim)) / np.sqrt(portrait_dim)
    return WorldSpec(Catalog(utilities, features), bias, latent, proj, successor,
                     decoy_coef=decoy_coef, long_term_coef=long_term_coef,
                     continue_bias=continue_bias, continue_coef=continue_coef, seed=seed, name=name)


def myopic_world(seed=0, **kw):
    """Preset without cross-page effects."""
    kw["long_term_coef"] = 0.0
    return generate_world(seed, name="myopic", **kw)


def long_term_world(seed=0, **kw):
    """Preset where buying a chain item strongly raises its successor's purchase odds."""
    kw.setdefault("long_term_coef", 10.0)
    return generate_world(seed, name="long-term", **kw)


class WorldSoftmaxPolicy(Policy):
    """Myopic softmax over the world's current purchase logits."""

    def __init__(self, world, temperature=1.0):
        self.world = world
        self.temperature = temperature

    def action_probabilities(self, state, mask):
        logit = self.world.attraction(state.user_context, mask, state.history)
        return softmax(logit / self.temperature)


class GreedyWorldPolicy(Policy):
    """Deterministically shows the item with the largest immediate expected utility."""

    def __init__(self, world):
        self.world = world

    def action_probabilities(self, state, mask):
        value = _sigmoid(self.world.attraction(state.user_context, mask, state.history))
        value = value * self.world.catalog.utilities[np.asarray(mask, dtype=int)]
        p = np.zeros(len(mask))
        p[int(np.argmax(value))] = 1.0
        return p


@dataclass
class GenConfig:
    n_sessions: int = 1000
    behavior: Policy = None
    max_pages: int = 1
    page_size: int = 9
    row_size: int = 3
    seed: int = 0
    policy_id: str = "sl-softmax"
    session_prefix: str = "s"
    start_time: int = 1_600_000_000

    def __post_init__(self):
        if self.n_sessions < 1:
            raise ConfigurationError("n_sessions must be >= 1")


def simulate_session(world, policy, config, rng):
    """Play one episode; returns ``(user_context, pages)`` with per-slot behavior probabilities."""
    ctx = world.sample_user(rng)
    state = initial_state(ctx, config, world)
    pats = valid_patterns(config.page_size, config.row_size)
    pages = []
    while True:
        probs = []
        chosen = ()
        for _ in range(config.page_size):
            s = SlateState(state.user_context, chosen, state.page_index, 0, state.history)
            mask = action_mask(s, world.catalog, config)
            item, p = policy.sample(s, mask, rng)
            chosen += (item,)
            probs.append(p)
        q = world.conditional_probs(state.user_context, chosen, state.history)
        fb = tuple(int(x) for x in pats[rng.choice(len(pats), p=pattern_distribution(q, config.row_size))])
        pages.append((chosen, fb, tuple(probs)))
        history = state.history + (Page(chosen, fb),)
        if len(pages) >= config.max_pages:
            break
        if not rng.random() < world.continue_probability(state.user_context, chosen, fb, state.history):
            break
        state = SlateState(state.user_context, (), len(pages), 0, history)
    return ctx, pages


def simulate_logs(world, gen):
    """Sample ``gen.n_sessions`` sessions from ``world`` as log rows."""
    policy = gen.behavior or WorldSoftmaxPolicy(world)
    config = EpisodeConfig(gamma=1.0, page_size=gen.page_size, max_pages=gen.max_pages,
                           row_size=gen.row_size)
    rows = []
    feats = world.catalog.features
    for n in range(gen.n_sessions):
        rng = make_rng(gen.seed, "session", n)
        ctx, pages = simulate_session(world, policy, config, rng)
        portrait = tuple(float(x) for x in ctx[:world.portrait_dim])
        clicks = tuple(float(x) for x in ctx[world.portrait_dim:])
        sid = f"{gen.session_prefix}{n:06d}"
        t0 = gen.start_time + 600 * n
        for k, (items, fb, probs) in enumerate(pages):
            rows.append(LoggedRow(
                timestamp=t0 + 10 * k, session_id=sid, sequence_id=k + 1, exposed_items=items,
                user_feedback=fb, user_portrait=portrait, click_history=clicks,
                item_features=tuple(float(x) for x in feats[list(items)].ravel()),
                behavior_policy_id=gen.policy_id, behavior_action_probs=probs))
    return rows


def log_summary(rows, catalog):
    """Per-session statistics in the layout of a dataset summary table."""
    sessions = {}
    for r in rows:
        s = sessions.setdefault(r.session_id, [0, 0, 0.0])
        s[0] += len(r.exposed_items)
        s[1] += sum(r.user_feedback)
        s[2] += float(np.dot(r.user_feedback, catalog.utilities[list(r.exposed_items)]))
    arr = np.array(list(sessions.values())) if sessions else np.zeros((0, 3))
    n = max(len(arr), 1)
    return {
        "Sessions": len(sessions),
        "Pages": len(rows),
        "Items": catalog.n_items,
        "Items per session": float(arr[:, 0].sum() / n),
        "Purchases per session": float(arr[:, 1].sum() / n),
        "Rewards per session": float(arr[:, 2].sum() / n),
    }


def format_summary(summary):
    lines = []
    for k, v in summary.items():
        lines.append(f"{k}\t{v:.2f}" if isinstance(v, float) else f"{k}\t{v}")
    return "\n".join(lines) + "\n"


ENUM_LIMITS = {"n_items": 4, "page_size": 2, "max_pages": 2}


def _check_enumerable(catalog, config):
    sizes = {"n_items": catalog.n_items, "page_size": config.page_size, "max_pages": config.max_pages}
    for k, v in sizes.items():
        if v > ENUM_LIMITS[k]:
            raise EnumerationSizeError(f"{k}={v} exceeds enumeration bound {ENUM_LIMITS[k]}")


def enumerate_trajectories(model, policy, catalog, config, user_context, check_size=True):
    """Every possible episode with its probability under ``policy``.

    Returns a list of ``(probability, Trajectory)``; rewards follow the
    environment convention (page reward on the page's final slot).
    """
    from .cpe import Trajectory, TrajStep

    if check_size:
        _check_enumerable(catalog, config)
    pats = valid_patterns(config.page_size, config.row_size)
    out = []

    def rec(state, prob, steps):
        if state.terminal:
            out.append((prob, Trajectory(tuple(steps))))
            return
        mask = action_mask(state, catalog, config)
        probs = policy.action_probabilities(state, mask)
        for a, pa in zip(mask.tolist(), probs):
            if pa == 0:
                continue
            chosen = state.chosen_items + (a,)
            if len(chosen) < config.page_size:
                nxt = replace(state, chosen_items=chosen, step_index=state.step_index + 1)
                rec(nxt, prob * pa, steps + [TrajStep(state, a, float(pa), 0.0, tuple(mask.tolist()))])
                continue
            q = model.conditional_probs(state.user_context, chosen, state.history)
            dist = pattern_distribution(q, config.row_size)
            utils = catalog.utilities[list(chosen)]
            for pat, pf in zip(pats, dist):
                if pf == 0:
                    continue
                fb = tuple(int(x) for x in pat)
                r = page_reward(fb, utils, config.gamma)
                step = TrajStep(state, a, float(pa), r, tuple(mask.tolist()))
                history = state.history + (Page(chosen, fb),)
                page = state.page_index + 1
                branches = [(True, 1.0)]
                if page < config.max_pages:
                    c = model.continue_probability(state.user_context, chosen, fb, state.history)
                    branches = [(False, c), (True, 1.0 - c)]
                for stop, pc in branches:
                    if pc == 0:
                        continue
                    nxt = SlateState(state.user_context, (), page, page * config.page_size, history, stop)
                    rec(nxt, prob * pa * pf * pc, steps + [step])

    rec(initial_state(user_context, config, model), 1.0, [])
    return out


def oracle_value(world, policy, config, user_context, catalog=None):
    """Exact expected discounted return of ``policy`` by full enumeration.

    ``user_context`` may be a single context or a 2-d array of contexts, in
    which case the population average is returned.
    """
    catalog = catalog or world.catalog
    _check_enumerable(catalog, config)
    ctxs = np.atleast_2d(np.asarray(user_context, dtype=float))
    total = 0.0
    for ctx in ctxs:
        trajs = enumerate_trajectories(world, policy, catalog, config, ctx)
        total += sum(p * t.discounted_return(config.gamma) for p, t in trajs)
    return total / len(ctxs)
