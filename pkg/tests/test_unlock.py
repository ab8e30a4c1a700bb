import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slaterl.errors import ContractError
from slaterl.unlock import (marginal_probs, pattern_distribution, pattern_index, valid_patterns,
                            validate_feedback)

from conftest import unlock_oracle

ALL_BITS = list(itertools.product((0, 1), repeat=9))


def test_exactly_22_of_512_patterns_are_valid():
    assert sum(bool(validate_feedback(b)) for b in ALL_BITS) == 22


def test_validator_agrees_with_oracle_on_every_pattern():
    for b in ALL_BITS:
        assert bool(validate_feedback(b)) == unlock_oracle(b)


def test_valid_patterns_table_matches_enumeration():
    table = {tuple(p) for p in valid_patterns().tolist()}
    assert table == {b for b in ALL_BITS if unlock_oracle(b)}
    assert len(valid_patterns()) == 22


@pytest.mark.parametrize("bits,ok", [
    ([1, 1, 1, 1, 0, 0, 0, 0, 0], True),
    ([0, 0, 0, 0, 0, 0, 0, 0, 1], False),
    ([0, 0, 0, 1, 0, 0, 0, 0, 0], False),
    ([1, 1, 1, 1, 1, 1, 1, 1, 1], True),
    ([0] * 9, True),
])
def test_examples(bits, ok):
    assert bool(validate_feedback(bits)) is ok


def test_invalid_reason_names_rows():
    check = validate_feedback([0, 0, 0, 1, 0, 0, 0, 0, 0])
    assert not check.valid and "row 2" in check.reason and "row 1" in check.reason


def test_wrong_length_is_contract_error():
    with pytest.raises(ContractError):
        validate_feedback([1, 0, 0])


def test_other_geometries():
    assert len(valid_patterns(2, 1)) == 3
    assert len(valid_patterns(2, 2)) == 4
    assert len(valid_patterns(4, 2)) == 3 + 3 + 1


def test_degenerate_distributions():
    assert pattern_distribution(np.ones(9))[pattern_index([1] * 9)] == 1.0
    assert pattern_distribution(np.zeros(9))[pattern_index([0] * 9)] == 1.0


def test_distribution_matches_sequential_sampling_semantics():
    # brute force: product over open rows of independent Bernoulli
    rng = np.random.default_rng(0)
    q = rng.uniform(0.05, 0.95, 9)
    dist = pattern_distribution(q)
    for p, pat in zip(dist, valid_patterns()):
        expected = 1.0
        for r in range(3):
            row = pat[3 * r:3 * r + 3]
            expected *= np.prod(np.where(row == 1, q[3 * r:3 * r + 3], 1 - q[3 * r:3 * r + 3]))
            if not row.all():
                break
        assert p == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=9, max_size=9))
def test_distribution_properties(q):
    dist = pattern_distribution(q)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(dist >= 0)
    marg = marginal_probs(dist)
    # first-row marginals are the row-conditional probabilities themselves
    assert np.allclose(marg[:3], q[:3], atol=1e-12)
    # marginal of item i equals total mass of patterns with item i bought
    pats = valid_patterns()
    for i in range(9):
        assert marg[i] == pytest.approx(dist[pats[:, i] == 1].sum(), abs=1e-12)


def test_generic_support_is_22():
    assert np.count_nonzero(pattern_distribution(np.full(9, 0.4))) == 22
