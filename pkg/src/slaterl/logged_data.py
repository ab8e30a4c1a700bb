"""Raw log parsing, sessionization, padding and MDP sample construction.

Log format (UTF-8, tab separated, header line required)::

    timestamp  session_id  sequence_id  exposed_items  user_feedback
    user_portrait  click_history  item_features  behavior_policy_id
    behavior_action_probs

List-valued fields are space delimited inside their column.
"""
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .env import Page, SlateState, state_to_vector
from .errors import (CatalogError, ConfigurationError, IntegrityError, ParseError,
                     SchemaError, ValidityError)
from .rng import make_rng
from .unlock import validate_feedback

LOG_COLUMNS = (
    "timestamp", "session_id", "sequence_id", "exposed_items", "user_feedback",
    "user_portrait", "click_history", "item_features", "behavior_policy_id",
    "behavior_action_probs",
)


@dataclass(frozen=True)
class SchemaConfig:
    """Row geometry. Feature dims of ``None`` are not checked."""

    page_size: int = 9
    row_size: int = 3
    portrait_dim: Optional[int] = None
    click_dim: Optional[int] = None
    item_feature_dim: Optional[int] = None


# feature dims of the public slate dataset
DATASET_SCHEMA = SchemaConfig(portrait_dim=42, click_dim=64, item_feature_dim=360)


@dataclass(frozen=True)
class LoggedRow:
    timestamp: int
    session_id: str
    sequence_id: int
    exposed_items: tuple
    user_feedback: tuple
    user_portrait: tuple
    click_history: tuple
    item_features: tuple
    behavior_policy_id: str
    behavior_action_probs: tuple


class LoggedPage(NamedTuple):
    exposed_items: tuple
    user_feedback: tuple
    behavior_action_probs: tuple


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    user_portrait: tuple
    click_history: tuple
    pages: tuple
    padded_page_count: int = 0
    behavior_policy_id: str = ""
    timestamp: int = 0

    @property
    def user_context(self):
        return self.user_portrait + self.click_history

    @property
    def real_pages(self):
        return self.pages[:len(self.pages) - self.padded_page_count]


def _fmt_float(x):
    return repr(float(x))


def format_row(row):
    cols = [
        str(int(row.timestamp)), row.session_id, str(int(row.sequence_id)),
        " ".join(str(int(i)) for i in row.exposed_items),
        " ".join(str(int(f)) for f in row.user_feedback),
        " ".join(map(_fmt_float, row.user_portrait)),
        " ".join(map(_fmt_float, row.click_history)),
        " ".join(map(_fmt_float, row.item_features)),
        row.behavior_policy_id,
        " ".join(map(_fmt_float, row.behavior_action_probs)),
    ]
    return "\t".join(cols)


def write_log(rows, stream):
    stream.write("\t".join(LOG_COLUMNS) + "\n")
    for row in rows:
        stream.write(format_row(row) + "\n")


def _ints(text, name, line):
    try:
        return tuple(int(x) for x in text.split())
    except ValueError:
        raise ParseError(f"non-integer value in {name}", line) from None


def _floats(text, name, line):
    try:
        vals = tuple(float(x) for x in text.split())
    except ValueError:
        raise ParseError(f"non-numeric value in {name}", line) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(f"non-finite value in {name}", line)
    return vals


def parse_line(text, schema=SchemaConfig(), line=None):
    """Parse one data line into a :class:`LoggedRow`."""
    parts = text.rstrip("\r\n").split("\t")
    if len(parts) != len(LOG_COLUMNS):
        raise ParseError(f"expected {len(LOG_COLUMNS)} fields, got {len(parts)}", line)
    ts, sid, seq, items, fb, portrait, clicks, ifeat, pid, probs = parts
    try:
        ts, seq = int(ts), int(seq)
    except ValueError:
        raise ParseError("timestamp and sequence_id must be integers", line) from None
    if seq < 1:
        raise ParseError("sequence_id must be >= 1", line)
    if not sid:
        raise ParseError("empty session_id", line)
    items = _ints(items, "exposed_items", line)
    fb = _ints(fb, "user_feedback", line)
    portrait = _floats(portrait, "user_portrait", line)
    clicks = _floats(clicks, "click_history", line)
    ifeat = _floats(ifeat, "item_features", line)
    probs = _floats(probs, "behavior_action_probs", line)

    n = schema.page_size
    if len(items) != n:
        raise SchemaError(f"exposed_items has {len(items)} entries, expected {n}", line)
    if len(set(items)) != n:
        raise SchemaError("exposed_items contains duplicates", line)
    if len(fb) != n:
        raise SchemaError(f"user_feedback has {len(fb)} entries, expected {n}", line)
    if len(probs) != n:
        raise SchemaError(f"behavior_action_probs has {len(probs)} entries, expected {n}", line)
    if any(not 0 < p <= 1 for p in probs):
        raise SchemaError("behavior_action_probs must lie in (0, 1]", line)
    for name, vals, dim in (("user_portrait", portrait, schema.portrait_dim),
                            ("click_history", clicks, schema.click_dim),
                            ("item_features", ifeat, schema.item_feature_dim)):
        if dim is not None and len(vals) != dim:
            raise SchemaError(f"{name} has dim {len(vals)}, expected {dim}", line)
    check = validate_feedback(fb, n, schema.row_size)
    if not check:
        raise ValidityError(f"invalid feedback {' '.join(map(str, fb))}: {check.reason}", fb, line)
    return LoggedRow(ts, sid, seq, items, fb, portrait, clicks, ifeat, pid, probs)


def _lines(source):
    if isinstance(source, str):
        source = io.StringIO(source)
    return source


def parse_log(source, schema=SchemaConfig()):
    """Parse a whole log (text or text stream); raises on the first bad line."""
    rows, errors = _parse(source, schema, collect=False)
    return rows


def validate_log(source, schema=SchemaConfig()):
    """Parse a log, collecting every error instead of stopping at the first."""
    return _parse(source, schema, collect=True)


def _parse(source, schema, collect):
    lines = _lines(source)
    header = lines.readline()
    if tuple(header.rstrip("\r\n").split("\t")) != LOG_COLUMNS:
        err = ParseError("missing or wrong header line", 1)
        if not collect:
            raise err
        return [], [err]
    rows, errors = [], []
    for n, text in enumerate(lines, start=2):
        if not text.strip():
            continue
        try:
            rows.append(parse_line(text, schema, n))
        except ParseError as exc:
            if not collect:
                raise
            errors.append(exc)
    return rows, errors


def sessionize_and_pad(rows, max_pages, n_items, seed=0):
    """Group rows into sessions and zero-pad each to ``max_pages`` pages.

    Padded pages show a uniformly drawn slate of distinct items (drawn one
    slot at a time without replacement, so slot ``i`` has probability
    ``1 / (n_items - i)``) and all-zero feedback.
    """
    groups = {}
    for row in rows:
        groups.setdefault(row.session_id, []).append(row)
    sessions = []
    for sid, srows in groups.items():
        srows = sorted(srows, key=lambda r: r.sequence_id)
        seqs = [r.sequence_id for r in srows]
        if seqs != list(range(1, len(srows) + 1)):
            raise IntegrityError(f"session {sid}: sequence ids {seqs} have gaps or duplicates")
        first = srows[0]
        for r in srows[1:]:
            if r.user_portrait != first.user_portrait or r.click_history != first.click_history:
                raise IntegrityError(f"session {sid}: conflicting user features")
        if len(srows) > max_pages:
            raise IntegrityError(f"session {sid} has {len(srows)} pages, more than max_pages={max_pages}")
        pages = [LoggedPage(r.exposed_items, r.user_feedback, r.behavior_action_probs) for r in srows]
        page_size = len(first.exposed_items)
        if n_items < page_size:
            raise ConfigurationError("catalog smaller than a page")
        n_pad = max_pages - len(pages)
        rng = make_rng(seed, "pad", sid)
        for _ in range(n_pad):
            items = tuple(int(i) for i in rng.choice(n_items, size=page_size, replace=False))
            probs = tuple(1.0 / (n_items - i) for i in range(page_size))
            pages.append(LoggedPage(items, (0,) * page_size, probs))
        sessions.append(SessionRecord(sid, first.user_portrait, first.click_history, tuple(pages),
                                      n_pad, first.behavior_policy_id, first.timestamp))
    return sessions


@dataclass(eq=False)
class MdpSample:
    mdp_id: str
    sequence_id: int
    state: np.ndarray
    observation: np.ndarray
    action: int
    action_features: np.ndarray
    action_probability: float
    action_mask: tuple
    reward: float
    next_state: np.ndarray
    next_observation: np.ndarray
    next_action: Optional[int]
    next_action_probability: Optional[float]
    next_action_mask: tuple
    terminal: int

    _ARRAYS = ("state", "observation", "action_features", "next_state", "next_observation")

    def to_dict(self):
        d = {}
        for k in MDP_FIELDS:
            v = getattr(self, k)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, tuple):
                v = list(v)
            d[k] = v
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {k: d[k] for k in MDP_FIELDS}
        for k in cls._ARRAYS:
            kw[k] = np.asarray(kw[k], dtype=float)
        kw["action_mask"] = tuple(kw["action_mask"])
        kw["next_action_mask"] = tuple(kw["next_action_mask"])
        return cls(**kw)

    def __eq__(self, other):
        if not isinstance(other, MdpSample):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


MDP_FIELDS = ("mdp_id", "sequence_id", "state", "observation", "action", "action_features",
              "action_probability", "action_mask", "reward", "next_state", "next_observation",
              "next_action", "next_action_probability", "next_action_mask", "terminal")


def session_states(session, config):
    """States visited by a logged session, one per decision plus the final state."""
    ctx = tuple(float(x) for x in session.user_context)
    states = []
    history = ()
    ps = config.page_size
    for p, page in enumerate(session.pages):
        for i in range(ps):
            states.append(SlateState(ctx, tuple(page.exposed_items[:i]), p, p * ps + i, history))
        history = history + (Page(tuple(page.exposed_items), tuple(page.user_feedback)),)
    n = len(session.pages)
    states.append(SlateState(ctx, (), n, n * ps, history, True))
    return states


def to_mdp_samples(session, config, catalog, obs_encoder=None):
    """Turn one (padded) session into per-item decision samples.

    Reward at step ``i`` of a page is ``feedback_i * utility_i``.
    """
    if len(session.pages) > config.max_pages:
        raise ConfigurationError("session has more pages than config.max_pages")
    encode = obs_encoder or (lambda s: s)
    states = session_states(session, config)
    vecs = [state_to_vector(s, config) for s in states]
    obs = [np.asarray(encode(v), dtype=float) for v in vecs]
    all_ids = set(range(catalog.n_items))
    rows = []
    for page in session.pages:
        if len(page.exposed_items) != config.page_size:
            raise ConfigurationError("page length does not match config.page_size")
        for i, item in enumerate(page.exposed_items):
            if not 0 <= item < catalog.n_items:
                raise CatalogError(f"unknown item id {item!r}")
            shown = set(page.exposed_items[:i]) if config.distinct_within_page else set()
            mask = tuple(sorted(all_ids - shown))
            reward = float(page.user_feedback[i]) * float(catalog.utilities[item])
            rows.append((item, page.behavior_action_probs[i], mask, reward))
    samples = []
    for t, (item, prob, mask, reward) in enumerate(rows):
        last = t == len(rows) - 1
        nxt = None if last else rows[t + 1]
        samples.append(MdpSample(
            mdp_id=session.session_id, sequence_id=t, state=vecs[t], observation=obs[t],
            action=int(item), action_features=np.array(catalog.features[item]),
            action_probability=float(prob), action_mask=mask, reward=reward,
            next_state=vecs[t + 1], next_observation=obs[t + 1],
            next_action=None if last else int(nxt[0]),
            next_action_probability=None if last else float(nxt[1]),
            next_action_mask=() if last else nxt[2], terminal=int(last)))
    return samples


def write_mdp_samples(samples, stream):
    for s in samples:
        stream.write(json.dumps(s.to_dict()) + "\n")


def read_mdp_samples(stream):
    return [MdpSample.from_dict(json.loads(line)) for line in _lines(stream) if line.strip()]


class SessionMeta(NamedTuple):
    era: Optional[str]
    timestamp: int
    user_key: tuple


def policy_era(policy_id):
    """``'sl'``/``'rl'`` prefix of a behavior policy id, else ``None``."""
    head = policy_id.replace(":", "-").split("-")[0].lower()
    return head if head in ("sl", "rl") else None


def session_meta(sessions):
    return {s.session_id: SessionMeta(policy_era(s.behavior_policy_id), s.timestamp, s.user_portrait)
            for s in sessions}


@dataclass
class DatasetSplit:
    mode: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


SPLIT_MODES = ("sl-rl", "by-user", "by-time")


def _record_id(rec):
    return rec.session_id if isinstance(rec, SessionRecord) else rec.mdp_id


def split_dataset(records, mode, params=None, meta=None):
    """Split sessions (or MDP samples, with ``meta``) into disjoint train/test sets.

    ``meta`` maps session id to :class:`SessionMeta`; it is derived
    automatically when ``records`` are :class:`SessionRecord` objects.

    params
        ``by-user``: ``test_fraction`` (default 0.1), ``seed`` (default 0).
        ``by-time``: ``cutoff`` timestamp; sessions starting before it train.
    """
    params = dict(params or {})
    records = list(records)
    if meta is None:
        if not all(isinstance(r, SessionRecord) for r in records):
            raise ConfigurationError("meta is required when splitting MDP samples")
        meta = session_meta(records)
    ids = {_record_id(r) for r in records}
    missing = ids - set(meta)
    if missing:
        raise ConfigurationError(f"no session metadata for {sorted(missing)[:3]}")

    if mode == "sl-rl":
        untagged = sorted(i for i in ids if meta[i].era is None)
        if untagged:
            raise ConfigurationError(f"sessions without sl/rl era tag, e.g. {untagged[0]}")
        test_ids = {i for i in ids if meta[i].era == "rl"}
    elif mode == "by-user":
        frac = float(params.get("test_fraction", 0.1))
        if not 0 < frac < 1:
            raise ConfigurationError("test_fraction must be in (0, 1)")
        users = sorted({meta[i].user_key for i in ids})
        rng = make_rng(int(params.get("seed", 0)), "split-by-user")
        n_test = max(1, int(round(frac * len(users))))
        chosen = {users[k] for k in rng.permutation(len(users))[:n_test]}
        test_ids = {i for i in ids if meta[i].user_key in chosen}
    elif mode == "by-time":
        if "cutoff" not in params:
            raise ConfigurationError("by-time split needs a cutoff")
        cutoff = int(params["cutoff"])
        test_ids = {i for i in ids if meta[i].timestamp >= cutoff}
    else:
        raise ConfigurationError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")

    train = [r for r in records if _record_id(r) not in test_ids]
    test = [r for r in records if _record_id(r) in test_ids]
    if not train:
        raise ConfigurationError(f"{mode} split leaves the training set empty")
    if not test:
        raise ConfigurationError(f"{mode} split leaves the test set empty")
    return DatasetSplit(mode, train, test)
