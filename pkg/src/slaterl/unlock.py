"""The unlock rule and the valid feedback patterns it allows.

A page of ``page_size`` items is laid out in rows of ``row_size``. Items of a
row can only be purchased once every item of all earlier rows has been
purchased. For the standard 3x3 page this leaves 22 valid patterns.
"""
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ContractError

PAGE_SIZE = 9
ROW_SIZE = 3


class FeedbackCheck(NamedTuple):
    valid: bool
    reason: str = ""

    def __bool__(self):
        return self.valid


def _check_geometry(page_size, row_size):
    if row_size < 1 or page_size < 1 or page_size % row_size:
        raise ContractError(f"page_size {page_size} is not a multiple of row_size {row_size}")


def validate_feedback(feedback, page_size=PAGE_SIZE, row_size=ROW_SIZE):
    """Check one page of 0/1 feedback against the unlock rule."""
    _check_geometry(page_size, row_size)
    flags = list(feedback)
    if len(flags) != page_size:
        raise ContractError(f"expected {page_size} feedback flags, got {len(flags)}")
    for f in flags:
        if f not in (0, 1):
            return FeedbackCheck(False, f"flag {f!r} is not 0/1")
    rows = [flags[i:i + row_size] for i in range(0, page_size, row_size)]
    for k, row in enumerate(rows):
        if any(row) and not all(all(r) for r in rows[:k]):
            blocked = next(j for j in range(k) if not all(rows[j]))
            return FeedbackCheck(False, f"purchase in row {k + 1} while row {blocked + 1} is not sold out")
    return FeedbackCheck(True)


@lru_cache(maxsize=None)
def _patterns(page_size, row_size):
    n_rows = page_size // row_size
    out = []
    for full in range(n_rows + 1):
        prefix = [1] * (full * row_size)
        if full == n_rows:
            out.append(prefix)
            continue
        rest = [0] * (page_size - (full + 1) * row_size)
        for bits in range(2 ** row_size - 1):
            row = [(bits >> j) & 1 for j in range(row_size)]
            out.append(prefix + row + rest)
    pats = np.array(out, dtype=np.int8)
    # items whose row is open (purchasable) under each pattern
    open_rows = np.zeros_like(pats, dtype=bool)
    for n, p in enumerate(pats):
        for k in range(n_rows):
            open_rows[n, k * row_size:(k + 1) * row_size] = True
            if not p[k * row_size:(k + 1) * row_size].all():
                break
    pats.setflags(write=False)
    open_rows.setflags(write=False)
    return pats, open_rows


def valid_patterns(page_size=PAGE_SIZE, row_size=ROW_SIZE):
    """All unlock-valid patterns, shape ``(n_patterns, page_size)``."""
    _check_geometry(page_size, row_size)
    return _patterns(page_size, row_size)[0]


def pattern_index(feedback, page_size=PAGE_SIZE, row_size=ROW_SIZE):
    pats = valid_patterns(page_size, row_size)
    hit = np.flatnonzero((pats == np.asarray(feedback, dtype=np.int8)).all(axis=1))
    if not len(hit):
        raise ContractError(f"feedback {list(feedback)} is not a valid pattern")
    return int(hit[0])


def pattern_distribution(cond_probs, row_size=ROW_SIZE):
    """Distribution over valid patterns given row-conditional purchase probabilities.

    ``cond_probs[i]`` is the probability that item ``i`` is purchased given
    that its row is open. Items within an open row are independent; a row
    opens only when all earlier rows are sold out. The product over open
    items is renormalised over the valid patterns.
    """
    q = np.asarray(cond_probs, dtype=float)
    _check_geometry(len(q), row_size)
    pats, open_rows = _patterns(len(q), row_size)
    if np.any((q < 0) | (q > 1)) or not np.all(np.isfinite(q)):
        raise ContractError("purchase probabilities must lie in [0, 1]")
    per_item = np.where(pats == 1, q, 1.0 - q)
    probs = np.prod(np.where(open_rows, per_item, 1.0), axis=1)
    total = probs.sum()
    if total <= 0:
        raise ContractError("pattern distribution has zero mass")
    return probs / total


def marginal_probs(pattern_probs, page_size=PAGE_SIZE, row_size=ROW_SIZE):
    """Per-item purchase probability implied by a pattern distribution."""
    return np.asarray(pattern_probs) @ valid_patterns(page_size, row_size)
