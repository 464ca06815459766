import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progdistill.boolean_tasks import (HierarchySpec, ParitySpec, all_inputs, dump_csv, hierarchy_label,
                                       parity_label, sample_arrays, sample_batch, sample_inputs, to_signed)


def test_parity_examples():
    spec = ParitySpec(6, 4)
    x = np.ones(6)
    assert parity_label(spec, x) == 1
    x[0] = -1
    assert parity_label(spec, x) == 2
    assert parity_label(ParitySpec(6, 2), np.array([-1, -1, 1, 1, 1, 1])) == 1


def test_parity_rejects_bad_input():
    spec = ParitySpec(4, 2)
    with pytest.raises(ValueError):
        parity_label(spec, np.array([1, 0, 1, 1]))
    with pytest.raises(ValueError):
        parity_label(spec, np.ones(5))
    with pytest.raises(ValueError):
        ParitySpec(4, 5)
    with pytest.raises(ValueError):
        ParitySpec(4, 2, (0, 0))


def test_hierarchy_depth_one_is_parity():
    spec = HierarchySpec(4, 1, ((0, 1),))
    assert hierarchy_label(spec, np.array([1, 1, 1, 1])) == 2
    assert hierarchy_label(spec, np.array([-1, 1, 1, 1])) == 1


def test_hierarchy_right_then_left():
    spec = HierarchySpec(8, 2, ((0, 1), (2, 3), (4, 5)))
    x = np.array([1, 1, 1, 1, 1, -1, 1, 1])
    assert hierarchy_label(spec, x) == 3


def test_hierarchy_depth3_uniform_classes():
    spec = HierarchySpec.contiguous(35, 3, 5)
    x = sample_inputs(35, np.random.default_rng(0), 80_000)
    counts = np.bincount(hierarchy_label(spec, x), minlength=9)[1:]
    assert counts.sum() == 80_000
    assert np.all(np.abs(counts / 80_000 - 1 / 8) < 0.006)


def test_hierarchy_needs_disjoint_features():
    with pytest.raises(ValueError):
        HierarchySpec(6, 1, ((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        HierarchySpec(6, 2, ((0, 1), (1, 2), (3, 4)))
    with pytest.raises(ValueError):
        HierarchySpec.contiguous(8, 2, 3)


def test_sample_batch_statistics():
    rng = np.random.default_rng(5)
    assert sample_batch(ParitySpec(10, 3), rng, 0) == []
    x, y = sample_arrays(ParitySpec(10, 3), rng, 10_000)
    assert np.all(np.abs(x.mean(axis=0)) <= 0.05)
    assert 0.47 <= (y == 1).mean() <= 0.53


def test_sample_batch_records():
    batch = sample_batch(ParitySpec(5, 2), np.random.default_rng(1), 3)
    assert len(batch) == 3
    for s in batch:
        assert s.y == parity_label(ParitySpec(5, 2), s.x)


def test_all_inputs_and_signed():
    cube = all_inputs(3)
    assert cube.shape == (8, 3)
    assert len({tuple(r) for r in cube}) == 8
    assert np.array_equal(to_signed(np.array([1, 2])), [1.0, -1.0])


def test_dump_csv(tmp_path):
    x, y = sample_arrays(ParitySpec(4, 2), np.random.default_rng(2), 5)
    path = tmp_path / "d.csv"
    dump_csv(path, x, y)
    rows = path.read_text().strip().splitlines()
    assert len(rows) == 6
    assert rows[0].split(",")[-1] == "y"


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12).flatmap(lambda d: st.tuples(
    st.just(d), st.integers(1, d), st.lists(st.sampled_from([-1.0, 1.0]), min_size=d, max_size=d))))
def test_single_flip_in_support_toggles_parity(args):
    d, k, bits = args
    spec = ParitySpec(d, k)
    x = np.array(bits)
    flipped = x.copy()
    flipped[spec.support[0]] *= -1
    assert parity_label(spec, x) != parity_label(spec, flipped)
    if k < d:
        off = x.copy()
        off[d - 1] *= -1
        assert parity_label(spec, x) == parity_label(spec, off)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_hierarchy_labels_in_range(depth, k, seed):
    d = (2 ** depth - 1) * k + 1
    spec = HierarchySpec.contiguous(d, depth, k)
    x = sample_inputs(d, np.random.default_rng(seed), 64)
    y = hierarchy_label(spec, x)
    assert y.min() >= 1 and y.max() <= 2 ** depth


@pytest.mark.parametrize("d", [2, 5, 10])
def test_depth_one_hierarchy_matches_parity_exhaustively(d):
    feature = tuple(range(min(3, d)))
    parity = ParitySpec(d, len(feature), feature)
    tree = HierarchySpec(d, 1, (feature,))
    x = all_inputs(d)
    assert np.array_equal(parity_label(parity, x) == 1, hierarchy_label(tree, x) == 2)


@pytest.mark.parametrize("d,k", [(6, 3), (12, 4)])
def test_flip_invariants_exhaustive(d, k):
    spec = ParitySpec(d, k)
    x = all_inputs(d)
    y = parity_label(spec, x)
    for j in range(d):
        z = x.copy()
        z[:, j] *= -1
        same = parity_label(spec, z) == y
        assert (not same.any()) if j in spec.support else same.all()


def test_same_seed_same_batch():
    a = sample_arrays(ParitySpec(9, 3), np.random.default_rng(4), 50)
    b = sample_arrays(ParitySpec(9, 3), np.random.default_rng(4), 50)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
