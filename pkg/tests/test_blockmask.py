import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dialoflow.blockmask import (
    MaskSpec,
    block_of,
    build_mask,
    compose_reachability,
    mask_predicate,
    receptive_field,
)


def brute_mask(n, b, tb, tf):
    m = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(n):
            d = j // b - i // b
            m[i, j] = -tb <= d <= tf
    return m


@pytest.mark.parametrize("i,b,want", [(0, 1, 0), (0, 7, 0), (5, 3, 1), (9, 3, 3)])
def test_block_of(i, b, want):
    assert block_of(i, b) == want


def test_isolated_is_block_diagonal():
    m = build_mask(4, MaskSpec.isolated(2)).matrix
    want = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], bool)
    assert np.array_equal(m, want)
    assert MaskSpec.causal(2) == MaskSpec.isolated(2)


def test_history_sees_previous_block():
    m = build_mask(6, MaskSpec.history(2)).matrix
    want = np.zeros((6, 6), bool)
    for i in range(6):
        bi = i // 2
        for j in range(6):
            want[i, j] = j // 2 in (bi, bi - 1)
    assert np.array_equal(m, want)
    assert np.array_equal(build_mask(6, MaskSpec.future(2)).matrix, want.T)


def test_symmetric_matches_double_loop():
    m = build_mask(10, MaskSpec.symmetric(3, 1)).matrix
    want = np.array([[abs(i // 3 - j // 3) <= 1 for j in range(10)] for i in range(10)])
    assert np.array_equal(m, want)


def test_ragged_tail_keeps_all_tokens():
    bm = build_mask(7, MaskSpec(3, 0, 0))
    assert bm.ragged_tail and bm.num_blocks == 3
    assert bm.matrix[6, 6] and not bm.matrix[6, 5]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8), st.integers(0, 3), st.integers(0, 3))
def test_build_mask_equals_bruteforce(n, b, tb, tf):
    spec = MaskSpec(b, tb, tf)
    m = build_mask(n, spec).matrix
    assert np.array_equal(m, brute_mask(n, b, tb, tf))
    pred = mask_predicate(spec)
    assert all(pred(i, j) == m[i, j] for i in range(n) for j in range(n))
    if tb == tf:
        assert np.array_equal(m, m.T)


def test_receptive_field_examples():
    assert receptive_field([MaskSpec(2, 0, 0)]) == (0, 0)
    assert receptive_field([MaskSpec(2, 1, 0)] * 2) == (2, 0)
    specs = [MaskSpec(3, 1, 0), MaskSpec(3, 0, 1), MaskSpec(3, 1, 1)]
    assert receptive_field(specs) == (2, 2)
    reach = compose_reachability([build_mask(20, s) for s in specs])
    assert reach == build_mask(20, MaskSpec(3, 2, 2))
    with pytest.raises(ValueError):
        receptive_field([MaskSpec(2, 1, 0), MaskSpec(3, 1, 0)])


def test_compose_examples():
    iso = build_mask(8, MaskSpec(1, 0, 0))
    assert np.array_equal(compose_reachability([iso, iso]).matrix, np.eye(8, dtype=bool))
    h = build_mask(8, MaskSpec(2, 1, 0))
    assert compose_reachability([h, h]) == build_mask(8, MaskSpec(2, 2, 0))
    full = build_mask(8, MaskSpec(8, 0, 0))
    some = build_mask(8, MaskSpec(2, 0, 1))
    assert compose_reachability([some, full]).matrix.all()
    assert compose_reachability([full, some]).matrix.all()
    with pytest.raises(ValueError):
        compose_reachability([h, build_mask(6, MaskSpec(2, 1, 0))])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5),
       st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=4))
def test_composition_law(n, b, extents):
    specs = [MaskSpec(b, tb, tf) for tb, tf in extents]
    B, F = receptive_field(specs)
    assert compose_reachability([build_mask(n, s) for s in specs]) == build_mask(n, MaskSpec(b, B, F))


def test_mask_dump_formats():
    bm = build_mask(3, MaskSpec(2, 0, 0))
    assert bm.to_text() == "1 1 0\n1 1 0\n0 0 1"
    import json
    d = json.loads(bm.to_json())
    assert d == {"n": 3, "b": 2, "tb": 0, "tf": 0, "rows": [[1, 1, 0], [1, 1, 0], [0, 0, 1]]}


def test_invalid_specs():
    with pytest.raises(ValueError):
        MaskSpec(0)
    with pytest.raises(ValueError):
        MaskSpec(2, -1, 0)
    with pytest.raises(ValueError):
        build_mask(0, MaskSpec(2))
