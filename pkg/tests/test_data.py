import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polsteal.data import TransferDataset, prune_data
from polsteal.errors import EmptyInputError, ShapeError


def make(m, n=3, k=2, seed=0):
    rng = np.random.default_rng(seed)
    return TransferDataset(rng.normal(size=(m, n)), rng.uniform(-0.9, 0.9, size=(m, k)))


def test_shapes_validated():
    with pytest.raises(ShapeError):
        TransferDataset(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(ShapeError):
        TransferDataset(np.zeros(3), np.zeros((3, 1)))
    d = make(5)
    assert (len(d), d.state_dim, d.action_dim) == (5, 3, 2)


@given(st.integers(2, 400), st.floats(0.01, 0.9))
def test_split_partitions_pairs(m, frac):
    d = make(m)
    train, val = d.split(frac, np.random.default_rng(1))
    assert len(train) + len(val) == m
    assert len(val) == min(m - 1, max(1, round(m * frac)))
    rows = {tuple(r) for r in np.vstack([train.states, val.states])}
    assert rows == {tuple(r) for r in d.states}


def test_split_needs_two_pairs():
    with pytest.raises(EmptyInputError):
        make(1).split(0.1, np.random.default_rng(0))


def test_attached_split_is_reused():
    d = make(50).with_split(np.random.default_rng(3))
    assert len(d.val_index) == 5
    t1, v1 = d.split(0.5, np.random.default_rng(0))
    t2, v2 = d.split(0.1, np.random.default_rng(9))
    np.testing.assert_array_equal(v1.states, v2.states)
    np.testing.assert_array_equal(v1.states, d.val_part().states)
    np.testing.assert_array_equal(t1.states, d.train_part().states)


def test_val_part_requires_split():
    with pytest.raises(EmptyInputError):
        make(4).val_part()


def test_sample_without_replacement():
    d = make(30)
    s = d.sample(10, np.random.default_rng(0))
    assert len({tuple(r) for r in s.states}) == 10
    assert len(d.sample(100, np.random.default_rng(0))) == 30
    with pytest.raises(EmptyInputError):
        TransferDataset(np.zeros((0, 2)), np.zeros((0, 1))).sample(1, np.random.default_rng(0))


def test_concat_drops_split_and_empty_parts():
    a, b = make(4).with_split(np.random.default_rng(0)), make(6, seed=1)
    empty = TransferDataset(np.zeros((0, 3)), np.zeros((0, 2)))
    c = TransferDataset.concat(a, empty, b)
    assert len(c) == 10 and c.val_index is None
    with pytest.raises(EmptyInputError):
        TransferDataset.concat(empty)


def test_prune_example():
    d = TransferDataset(np.arange(8.0).reshape(4, 2), np.array([[0.5, 1.0], [0.2, -0.3], [-1.0, 0.0], [0.999, -0.999]]))
    p = prune_data(d)
    np.testing.assert_array_equal(p.states, [[2.0, 3.0], [6.0, 7.0]])


@given(st.lists(st.lists(st.sampled_from([-1.0, -0.5, 0.0, 0.7, 1.0]), min_size=2, max_size=2), min_size=1, max_size=30))
def test_prune_keeps_exactly_unsaturated(rows):
    a = np.array(rows)
    d = TransferDataset(np.arange(len(a), dtype=float)[:, None], a)
    p = prune_data(d)
    assert np.all(np.abs(p.actions) < 1)
    # brute-force oracle
    expected = [i for i, r in enumerate(rows) if all(abs(v) != 1.0 for v in r)]
    np.testing.assert_array_equal(p.states[:, 0], expected)
    assert len(prune_data(p)) == len(p)


def test_sample_carries_attached_split():
    d = make(200).with_split(np.random.default_rng(0))
    val_rows = {tuple(r) for r in d.val_part().states}
    s = d.sample(120, np.random.default_rng(1))
    assert s.val_index is not None
    assert {tuple(r) for r in s.val_part().states} <= val_rows
    assert not ({tuple(r) for r in s.train_part().states} & val_rows)
    # a draw that misses one side of the split falls back to no split
    tiny = d.sample(1, np.random.default_rng(2))
    assert tiny.val_index is None
