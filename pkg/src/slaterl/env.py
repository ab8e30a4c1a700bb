"""Slate-MDP environment.

One decision per slot: an episode picks ``page_size`` items per page, one at
a time, and the user answers only when a page is full. Transitions are
deterministic (the chosen item is appended to the page); the only
randomness is the feedback pattern drawn at page completion and, for
multi-page episodes, whether the user asks for another page.
"""
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Protocol

import numpy as np

from .errors import ContractError, InvalidActionError, SlateRLError
from .rng import make_rng
from .unlock import pattern_distribution, valid_patterns


@dataclass(frozen=True)
class EpisodeConfig:
    gamma: float = 0.95
    page_size: int = 9
    max_pages: int = 1
    distinct_within_page: bool = True
    row_size: int = 3

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ContractError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.page_size < 1 or self.max_pages < 1:
            raise ContractError("page_size and max_pages must be >= 1")
        if self.page_size % self.row_size:
            raise ContractError("page_size must be a multiple of row_size")

    @property
    def horizon(self):
        return self.page_size * self.max_pages

    def to_dict(self):
        return {"gamma": self.gamma, "page_size": self.page_size, "max_pages": self.max_pages,
                "distinct_within_page": self.distinct_within_page, "row_size": self.row_size}


SLATE = EpisodeConfig(max_pages=1)
SEQSLATE = EpisodeConfig(max_pages=4)


class Page(NamedTuple):
    items: tuple
    feedback: tuple


@dataclass(frozen=True)
class SlateState:
    user_context: tuple
    chosen_items: tuple = ()
    page_index: int = 0
    step_index: int = 0
    history: tuple = ()
    terminal: bool = False

    @property
    def context(self):
        return np.asarray(self.user_context, dtype=float)

    def purchased(self):
        """Items bought on completed pages, in purchase order."""
        return [i for page in self.history for i, f in zip(page.items, page.feedback) if f]


@dataclass(frozen=True)
class StepResult:
    next_state: SlateState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class ResponseModel(Protocol):
    """What the environment needs from a user model (fitted or ground truth)."""

    context_dim: int

    def conditional_probs(self, user_context, slate, history=()) -> np.ndarray:
        """Purchase probability of each slate item given that its row is open."""

    def continue_probability(self, user_context, slate, feedback, history=()) -> float:
        """Probability the user requests another page after this one."""


def page_reward(probabilities, utilities, gamma):
    """Discounted utility of one page: ``sum_i gamma**i * p_i * r_i``."""
    p = np.asarray(probabilities, dtype=float)
    r = np.asarray(utilities, dtype=float)
    if p.shape != r.shape or p.ndim != 1:
        raise ContractError(f"length mismatch: {p.shape} vs {r.shape}")
    return float(np.sum(gamma ** np.arange(len(p)) * p * r))


def initial_state(user_context, config, model=None):
    ctx = tuple(float(x) for x in np.asarray(user_context, dtype=float).ravel())
    if model is not None and len(ctx) != model.context_dim:
        raise ContractError(f"user context has dim {len(ctx)}, model expects {model.context_dim}")
    return SlateState(ctx)


def action_mask(state, catalog, config):
    """Valid item ids at ``state`` (sorted)."""
    if state.terminal:
        return np.empty(0, dtype=int)
    ids = catalog.ids
    if config.distinct_within_page and state.chosen_items:
        ids = np.setdiff1d(ids, np.asarray(state.chosen_items, dtype=int), assume_unique=True)
    return ids


def feedback_distribution(model, state_or_ctx, slate, history, config):
    ctx = state_or_ctx.user_context if isinstance(state_or_ctx, SlateState) else state_or_ctx
    q = model.conditional_probs(ctx, tuple(slate), tuple(history))
    return pattern_distribution(q, config.row_size)


def step(state, action, model, catalog, config, rng):
    """Advance ``state`` by choosing ``action``."""
    if state.terminal:
        raise InvalidActionError("episode already finished")
    if action not in set(action_mask(state, catalog, config).tolist()):
        raise InvalidActionError(f"item {action!r} is not in the action mask")
    chosen = state.chosen_items + (int(action),)
    if len(chosen) < config.page_size:
        nxt = replace(state, chosen_items=chosen, step_index=state.step_index + 1)
        return StepResult(nxt, 0.0, False, {})

    dist = feedback_distribution(model, state, chosen, state.history, config)
    pats = valid_patterns(config.page_size, config.row_size)
    fb = tuple(int(x) for x in pats[rng.choice(len(pats), p=dist)])
    reward = page_reward(fb, catalog.utility(chosen), config.gamma)
    history = state.history + (Page(chosen, fb),)
    page = state.page_index + 1
    done = page >= config.max_pages
    if not done:
        cont = model.continue_probability(state.user_context, chosen, fb, state.history)
        done = not (rng.random() < cont)
    nxt = SlateState(state.user_context, (), page, page * config.page_size, history, done)
    return StepResult(nxt, reward, done, {"feedback": fb})


def batch_step(states, actions, model, catalog, config, rngs):
    """Step each (state, action) pair with its own rng.

    Returns a list aligned with the inputs; an element that failed holds the
    raised exception instead of a ``StepResult``.
    """
    if not (len(states) == len(actions) == len(rngs)):
        raise ContractError("states, actions and rngs must have equal length")
    out = []
    for s, a, g in zip(states, actions, rngs):
        try:
            out.append(step(s, a, model, catalog, config, g))
        except SlateRLError as exc:
            out.append(exc)
    return out


def expected_page_reward(model, state, slate, catalog, config):
    """Model-expected reward of completing ``slate`` from ``state``."""
    dist = feedback_distribution(model, state, slate, state.history, config)
    marg = dist @ valid_patterns(config.page_size, config.row_size)
    return page_reward(marg, catalog.utility(slate), config.gamma)


def state_vector_dim(config, context_dim):
    return context_dim + 2 + config.page_size + 2 * config.max_pages * config.page_size


def state_to_vector(state, config):
    """Flat encoding of a state.

    Layout: user context, page index, terminal flag, chosen items of the
    current page (-1 padded to page_size), then ``max_pages`` history blocks
    of (items, feedback), each -1 padded.
    """
    ps = config.page_size
    chosen = np.full(ps, -1.0)
    chosen[:len(state.chosen_items)] = state.chosen_items
    hist = np.full((config.max_pages, 2, ps), -1.0)
    for k, page in enumerate(state.history):
        hist[k, 0] = page.items
        hist[k, 1] = page.feedback
    return np.concatenate([state.context, [state.page_index, float(state.terminal)], chosen, hist.ravel()])


def state_from_vector(vec, config, context_dim):
    vec = np.asarray(vec, dtype=float)
    if len(vec) != state_vector_dim(config, context_dim):
        raise ContractError("state vector has the wrong length")
    ps = config.page_size
    ctx = tuple(float(x) for x in vec[:context_dim])
    page_index = int(vec[context_dim])
    terminal = bool(vec[context_dim + 1])
    rest = vec[context_dim + 2:]
    chosen = tuple(int(x) for x in rest[:ps] if x >= 0)
    hist = rest[ps:].reshape(config.max_pages, 2, ps)
    history = tuple(Page(tuple(int(x) for x in h[0]), tuple(int(x) for x in h[1]))
                    for h in hist if h[0, 0] >= 0)
    return SlateState(ctx, chosen, page_index, page_index * ps + len(chosen), history, terminal)


class SlateEnv:
    """Stateful convenience wrapper around :func:`step`.

    ``user_sampler(rng)`` draws a user context when ``reset`` is called
    without one.
    """

    def __init__(self, model, catalog, config, user_sampler=None):
        self.model = model
        self.catalog = catalog
        self.config = config
        self.user_sampler = user_sampler
        self.rng = make_rng(0)
        self.state = None

    def reset(self, user_context=None, seed=0):
        self.rng = make_rng(seed, "env")
        if user_context is None:
            if self.user_sampler is None:
                raise ContractError("no user context given and no user_sampler configured")
            user_context = self.user_sampler(make_rng(seed, "user"))
        self.state = initial_state(user_context, self.config, self.model)
        return self.state

    def action_mask(self, state=None):
        return action_mask(self.state if state is None else state, self.catalog, self.config)

    def step(self, action, state=None):
        res = step(self.state if state is None else state, action, self.model,
                   self.catalog, self.config, self.rng)
        self.state = res.next_state
        return res
