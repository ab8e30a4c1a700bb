"""Counterfactual policy evaluation from logged trajectories.

Estimators: trajectory-level importance sampling (IS), step-wise weighted
importance sampling with per-step ratio clipping (SWIS), per-step doubly
robust (DR) and backward-recursive sequential doubly robust (Seq-DR).
Every estimate is also reported relative to the empirical value of the
behavior policy, so 1.0 means "as good as what was logged".

All estimators accept optional trajectory ``weights``. Without weights each
trajectory counts ``1/n``; with weights (e.g. exact trajectory
probabilities from enumeration) the mean becomes a weighted sum.
"""
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .env import state_from_vector, state_to_vector
from .errors import ContractError, PropensityError


class TrajStep(NamedTuple):
    state: object
    action: int
    behavior_prob: float
    reward: float
    action_mask: tuple


@dataclass(frozen=True)
class Trajectory:
    steps: tuple
    mdp_id: str = ""

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self):
        return np.array([s.reward for s in self.steps], dtype=float)

    def discounted_return(self, gamma):
        r = self.rewards
        return float(np.sum(gamma ** np.arange(len(r)) * r))


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    behavior_value: float

    @property
    def relative(self):
        if self.behavior_value == 0:
            raise ContractError("behavior value is zero; relative estimate undefined")
        return self.value / self.behavior_value


@dataclass
class CpeReport:
    estimates: dict
    behavior_value: float
    policy: str = "target"
    relative: dict = field(init=False)

    def __post_init__(self):
        self.relative = {k: e.relative for k, e in self.estimates.items()}

    def to_dict(self):
        return {
            "policy": self.policy, "behavior_value": self.behavior_value,
            "estimates": {k: {"value": e.value, "stderr": e.stderr, "relative": e.relative}
                          for k, e in self.estimates.items()},
        }


ESTIMATOR_LABELS = {"is": "IS", "swis": "SWIS", "dr": "DR", "seq_dr": "Seq. DR"}


def format_reports(reports):
    """Text table with one row per policy: relative estimate and its standard error."""
    names = list(ESTIMATOR_LABELS)
    lines = ["Policy\t" + "\t".join(ESTIMATOR_LABELS[n] for n in names)]
    for rep in reports:
        cells = []
        for n in names:
            e = rep.estimates[n]
            cells.append(f"{e.relative:.2f}(±{e.stderr / abs(rep.behavior_value):.2f})")
        lines.append(rep.policy + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def _weights(trajectories, weights):
    n = len(trajectories)
    if n == 0:
        raise ContractError("no trajectories")
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ContractError("weights must be non-negative, one per trajectory")
    return w / w.sum()


def _summarize(per_traj, w):
    """Weighted mean and standard error (``sqrt(weighted var / n)``)."""
    x = np.asarray(per_traj, dtype=float)
    mean = float(np.dot(w, x))
    n = len(x)
    if n < 2:
        return mean, 0.0
    var = float(np.dot(w, (x - mean) ** 2)) * n / (n - 1)
    return mean, float(np.sqrt(var / n))


def _discounts(gamma, n):
    return gamma ** np.arange(n)


def step_ratios(trajectory, target_policy):
    """Per-step propensity ratios ``pi_e(a_t|s_t) / b_t``."""
    out = np.empty(len(trajectory))
    for t, s in enumerate(trajectory.steps):
        if not s.behavior_prob > 0:
            raise PropensityError(f"behavior propensity {s.behavior_prob} at step {t} is not positive")
        out[t] = target_policy.probability(s.state, np.asarray(s.action_mask), s.action) / s.behavior_prob
    return out


def behavior_value(trajectories, gamma, weights=None):
    w = _weights(trajectories, weights)
    return float(np.dot(w, [t.discounted_return(gamma) for t in trajectories]))


def _estimate(per_traj, trajectories, gamma, weights):
    w = _weights(trajectories, weights)
    mean, se = _summarize(per_traj, w)
    return Estimate(mean, se, behavior_value(trajectories, gamma, weights))


def is_values(trajectories, target_policy, gamma):
    return np.array([np.prod(step_ratios(t, target_policy)) * t.discounted_return(gamma)
                     for t in trajectories])


def is_estimate(trajectories, target_policy, gamma, weights=None):
    """Unweighted trajectory-level importance sampling."""
    return _estimate(is_values(trajectories, target_policy, gamma), trajectories, gamma, weights)


def swis_weights(trajectories, target_policy, clip=(0.1, 10.0), weights=None):
    """Self-normalised cumulative weights, shape ``(n_traj, horizon)``.

    Per-step ratios are clipped to ``clip`` (``None`` disables clipping)
    before taking cumulative products. Finished trajectories keep their
    last cumulative weight and contribute zero reward afterwards. Each
    column sums to one.
    """
    if clip is not None and not clip[0] < clip[1]:
        raise ContractError("clip interval must satisfy lo < hi")
    w = _weights(trajectories, weights)
    horizon = max(len(t) for t in trajectories)
    cum = np.zeros((len(trajectories), horizon))
    for k, t in enumerate(trajectories):
        r = step_ratios(t, target_policy)
        if clip is not None:
            r = np.clip(r, clip[0], clip[1])
        c = np.cumprod(r)
        cum[k, :len(c)] = c
        cum[k, len(c):] = c[-1] if len(c) else 1.0
    cum = cum * w[:, None]
    tot = cum.sum(axis=0)
    return np.divide(cum, tot, out=np.zeros_like(cum), where=tot > 0)


def swis_estimate(trajectories, target_policy, gamma, clip=(0.1, 10.0), weights=None):
    """Step-wise weighted importance sampling."""
    w = _weights(trajectories, weights)
    ws = swis_weights(trajectories, target_policy, clip, weights)
    horizon = ws.shape[1]
    rew = np.zeros_like(ws)
    for k, t in enumerate(trajectories):
        rew[k, :len(t)] = t.rewards
    contrib = (ws * rew * _discounts(gamma, horizon)).sum(axis=1)
    # per-trajectory values whose weighted mean is the estimate
    per_traj = np.divide(contrib, w, out=np.zeros_like(contrib), where=w > 0)
    return _estimate(per_traj, trajectories, gamma, weights)


def _model_values(fn, state, mask, what):
    vals = np.asarray(fn(state, mask), dtype=float)
    if vals.shape != (len(mask),) or not np.all(np.isfinite(vals)):
        raise ContractError(f"value model returned no usable {what} for some action")
    return vals


def dr_values(trajectories, target_policy, gamma, value_model):
    out = np.empty(len(trajectories))
    for k, t in enumerate(trajectories):
        total = 0.0
        for i, s in enumerate(t.steps):
            mask = np.asarray(s.action_mask)
            rhat = _model_values(value_model.reward_estimates, s.state, mask, "reward estimate")
            pi = target_policy.action_probabilities(s.state, mask)
            a = int(np.flatnonzero(mask == s.action)[0])
            if not s.behavior_prob > 0:
                raise PropensityError(f"behavior propensity {s.behavior_prob} at step {i} is not positive")
            rho = pi[a] / s.behavior_prob
            total += gamma ** i * (float(pi @ rhat) + rho * (s.reward - rhat[a]))
        out[k] = total
    return out


def dr_estimate(trajectories, target_policy, gamma, value_model, weights=None):
    """Per-step doubly robust estimate using model-expected immediate rewards."""
    return _estimate(dr_values(trajectories, target_policy, gamma, value_model),
                     trajectories, gamma, weights)


def seq_dr_values(trajectories, target_policy, gamma, value_model):
    out = np.empty(len(trajectories))
    for k, t in enumerate(trajectories):
        v = 0.0
        for i in range(len(t) - 1, -1, -1):
            s = t.steps[i]
            mask = np.asarray(s.action_mask)
            q = _model_values(value_model.q_values, s.state, mask, "Q estimate")
            pi = target_policy.action_probabilities(s.state, mask)
            a = int(np.flatnonzero(mask == s.action)[0])
            if not s.behavior_prob > 0:
                raise PropensityError(f"behavior propensity {s.behavior_prob} at step {i} is not positive")
            rho = pi[a] / s.behavior_prob
            v = float(pi @ q) + rho * (s.reward + gamma * v - q[a])
        out[k] = v
    return out


def seq_dr_estimate(trajectories, target_policy, gamma, value_model, weights=None):
    """Sequential doubly robust estimate (backward recursion)."""
    return _estimate(seq_dr_values(trajectories, target_policy, gamma, value_model),
                     trajectories, gamma, weights)


def evaluate_policy(trajectories, target_policy, gamma, value_model, clip=(0.1, 10.0),
                    weights=None, name="target"):
    """Run all four estimators and collect them in a :class:`CpeReport`."""
    est = {
        "is": is_estimate(trajectories, target_policy, gamma, weights),
        "swis": swis_estimate(trajectories, target_policy, gamma, clip, weights),
        "dr": dr_estimate(trajectories, target_policy, gamma, value_model, weights),
        "seq_dr": seq_dr_estimate(trajectories, target_policy, gamma, value_model, weights),
    }
    return CpeReport(est, est["is"].behavior_value, name)


def trajectories_from_samples(samples, config, context_dim):
    """Group MDP samples by ``mdp_id`` into trajectories with decoded states."""
    groups = {}
    for s in samples:
        groups.setdefault(s.mdp_id, []).append(s)
    out = []
    for mdp_id, rows in groups.items():
        rows.sort(key=lambda s: s.sequence_id)
        steps = tuple(TrajStep(state_from_vector(s.state, config, context_dim), int(s.action),
                               float(s.action_probability), float(s.reward), tuple(s.action_mask))
                      for s in rows)
        out.append(Trajectory(steps, mdp_id))
    return out


def write_trajectories(trajectories, stream, config):
    for t in trajectories:
        rec = {"mdp_id": t.mdp_id, "steps": [
            {"state": state_to_vector(s.state, config).tolist(), "action": int(s.action),
             "behavior_prob": float(s.behavior_prob), "reward": float(s.reward),
             "action_mask": [int(a) for a in s.action_mask]} for s in t.steps]}
        stream.write(json.dumps(rec) + "\n")


def read_trajectories(stream, config, context_dim):
    out = []
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        steps = tuple(TrajStep(state_from_vector(s["state"], config, context_dim), s["action"],
                               s["behavior_prob"], s["reward"], tuple(s["action_mask"]))
                      for s in rec["steps"])
        out.append(Trajectory(steps, rec["mdp_id"]))
    return out
