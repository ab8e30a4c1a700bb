"""Small hand-built models and policies shared by tests."""
import hashlib

import numpy as np

from slaterl.catalog import Catalog
from slaterl.policies_base import Policy, softmax


class ConstModel:
    """Every item bought with probability ``q``; continue with probability ``c``."""

    def __init__(self, q, c=1.0, context_dim=1):
        self.q, self.c, self.context_dim = q, c, context_dim

    def conditional_probs(self, user_context, slate, history=()):
        return np.full(len(slate), self.q)

    def continue_probability(self, user_context, slate, feedback, history=()):
        return self.c


class TableModel:
    """Item-specific purchase probabilities, independent of context and slate."""

    def __init__(self, probs, c=0.5, context_dim=1):
        self.probs, self.c, self.context_dim = np.asarray(probs, float), c, context_dim

    def conditional_probs(self, user_context, slate, history=()):
        bought = {i for p in history for i, f in zip(p.items, p.feedback) if f}
        q = self.probs[list(slate)].copy()
        # a mild history effect so that multi-page enumeration is not trivial
        return np.where([i in bought for i in slate], q * 0.5, q)

    def continue_probability(self, user_context, slate, feedback, history=()):
        return self.c


def _hash_unit(*keys):
    h = hashlib.blake2b(repr(keys).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2 ** 64


class ArbitraryValueModel:
    """Deterministic but otherwise arbitrary reward and Q estimates."""

    def __init__(self, scale=10.0):
        self.scale = scale

    def _key(self, state):
        return (state.chosen_items, state.page_index, state.history)

    def reward_estimates(self, state, mask):
        return np.array([self.scale * _hash_unit("r", self._key(state), int(a)) for a in mask])

    def q_values(self, state, mask):
        return np.array([self.scale * _hash_unit("q", self._key(state), int(a)) for a in mask])


class StatePreferencePolicy(Policy):
    """Softmax over fixed per-item scores shifted by the page index and slot."""

    def __init__(self, scores, tilt=0.7):
        self.scores, self.tilt = np.asarray(scores, float), tilt

    def action_probabilities(self, state, mask):
        mask = np.asarray(mask, dtype=int)
        shift = self.tilt * (len(state.chosen_items) + state.page_index)
        return softmax(self.scores[mask] + shift * (mask % 2))


def two_item_catalog(utilities=(10.0, 0.0)):
    return Catalog(np.asarray(utilities, float), np.eye(2))
