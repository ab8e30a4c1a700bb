"""Policy interface shared by the synthetic world, the learners and CPE."""
import numpy as np

from .errors import ContractError


class Policy:
    """A stochastic policy over the valid items of a state.

    Subclasses implement :meth:`action_probabilities`, returning a vector
    aligned with ``mask`` that sums to one.
    """

    def action_probabilities(self, state, mask):
        raise NotImplementedError

    def probability(self, state, mask, action):
        mask = np.asarray(mask)
        hit = np.flatnonzero(mask == action)
        if not len(hit):
            return 0.0
        return float(self.action_probabilities(state, mask)[hit[0]])

    def sample(self, state, mask, rng):
        """Draw an item; returns ``(item, probability)``."""
        p = self.action_probabilities(state, mask)
        k = rng.choice(len(mask), p=p)
        return int(mask[k]), float(p[k])


def softmax(scores):
    z = np.asarray(scores, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


def check_distribution(p, mask):
    if len(p) != len(mask) or not np.isclose(p.sum(), 1.0, atol=1e-9) or np.any(p < 0):
        raise ContractError("policy returned an invalid distribution over the mask")
    return p


class UniformPolicy(Policy):
    def action_probabilities(self, state, mask):
        return np.full(len(mask), 1.0 / len(mask))


class FixedPolicy(Policy):
    """Deterministic policy from a ``state -> item`` function (falls back to the first valid item)."""

    def __init__(self, choose):
        self.choose = choose

    def action_probabilities(self, state, mask):
        p = np.zeros(len(mask))
        hit = np.flatnonzero(np.asarray(mask) == self.choose(state))
        p[hit[0] if len(hit) else 0] = 1.0
        return p
