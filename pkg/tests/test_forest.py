import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mriqa.errors import DegenerateClassError, FormatError, InvalidInputError
from mriqa.forest import (DecisionTree, Forest, ForestConfig, best_split, entropy, fit_forest, predict_volume,
                          volume_features)


def oracle_entropy(labels):
    n = len(labels)
    return -sum((labels.count(k) / n) * math.log2(labels.count(k) / n) for k in set(labels))


def oracle_tree(rows, labels):
    """Exhaustive recursive search over every feature and every midpoint threshold."""
    if len(set(labels)) <= 1:
        return [leaf(labels)]
    parent = oracle_entropy(labels)
    best = None
    for f in range(len(rows[0])):
        values = sorted(set(r[f] for r in rows))
        for lo, hi in zip(values, values[1:]):
            t = (lo + hi) / 2
            left = [y for r, y in zip(rows, labels) if r[f] <= t]
            right = [y for r, y in zip(rows, labels) if r[f] > t]
            gain = parent - len(left) / len(labels) * oracle_entropy(left) \
                - len(right) / len(labels) * oracle_entropy(right)
            if best is None or gain > best[0] + 1e-12:
                best = (gain, f, t)
    if best is None:
        return [leaf(labels)]
    _, f, t = best
    lrows = [(r, y) for r, y in zip(rows, labels) if r[f] <= t]
    rrows = [(r, y) for r, y in zip(rows, labels) if r[f] > t]
    return ([("S", f, t)] + oracle_tree([r for r, _ in lrows], [y for _, y in lrows])
            + oracle_tree([r for r, _ in rrows], [y for _, y in rrows]))


def leaf(labels):
    return ("L",) + tuple(labels.count(k) / len(labels) for k in range(3))


@st.composite
def small_problems(draw):
    n = draw(st.integers(1, 8))
    f = draw(st.integers(1, 3))
    X = draw(st.lists(st.lists(st.integers(0, 4).map(float), min_size=f, max_size=f), min_size=n, max_size=n))
    y = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    return X, y


@settings(max_examples=100, deadline=None)
@given(small_problems())
def test_single_tree_matches_exhaustive_search(problem):
    X, y = problem
    tree = DecisionTree().fit(np.array(X), np.array(y))
    assert tree.nodes == oracle_tree(X, y)


def test_entropy_values():
    assert entropy([5, 5, 0]) == pytest.approx(1.0)
    assert entropy([4, 0, 0]) == 0.0
    assert entropy([1, 1, 1]) == pytest.approx(math.log2(3))
    assert entropy([1, 2, 0], weights=[2, 1, 1]) == pytest.approx(1.0)


def test_best_split_perfect_separation():
    X = np.array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    s = best_split(X, np.array([0, 0, 1, 1]))
    assert (s.feature, s.threshold, s.gain) == (0, 1.5, pytest.approx(1.0))
    assert best_split(X, np.array([1, 1, 1, 1])) is None
    assert best_split(X[:, 1:], np.array([0, 0, 1, 1])) is None


def test_class_weights_enter_the_gain():
    X = np.arange(6, dtype=float)[:, None]
    y = np.array([0, 0, 1, 1, 1, 1])
    assert best_split(X, y).gain == pytest.approx(entropy([2, 4]))
    weighted = best_split(X, y, class_weights=[2.0, 1.0, 1.0])
    assert weighted.threshold == 1.5 and weighted.gain == pytest.approx(1.0)


def separable_volumes(rng, n=60):
    y = np.repeat([0, 1, 2], n // 3)
    X = rng.normal(size=(n, 13)) * 0.05
    X += y[:, None]
    return X, y


def test_forest_fits_and_is_deterministic(rng):
    X, y = separable_volumes(rng)
    a = fit_forest(X, y, ForestConfig(n_trees=10), seed=4)
    b = fit_forest(X, y, ForestConfig(n_trees=10), seed=4)
    assert (a.predict(X) == y).mean() == 1.0
    assert a.to_text() == b.to_text()
    P = a.predict_proba(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)


def test_forest_serialization_round_trip(tmp_path, rng):
    X, y = separable_volumes(rng)
    f = fit_forest(X, y, ForestConfig(n_trees=5, max_depth=3), seed=1)
    f.save(tmp_path / "f.json")
    g = Forest.load(tmp_path / "f.json")
    np.testing.assert_array_equal(f.predict_proba(X), g.predict_proba(X))
    with pytest.raises(FormatError):
        Forest.from_text('{"format": "other"}')


def test_forest_needs_two_classes():
    with pytest.raises(DegenerateClassError):
        fit_forest(np.zeros((4, 13)), np.zeros(4, dtype=int))


def test_volume_features_layout():
    P = np.array([[0.9, 0.05, 0.05], [0.1, 0.1, 0.8], [0.2, 0.2, 0.6], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    f = volume_features(P)
    assert f.shape == (13,)
    np.testing.assert_allclose(f[:3], [0.4, 0.0, 0.6])
    np.testing.assert_allclose(f[3:6], P.mean(0))
    np.testing.assert_allclose(f[6:9], P.min(0))
    np.testing.assert_allclose(f[9:12], P.max(0))
    assert f[12] == pytest.approx(2 / 5)  # two runs of fail slices
    with pytest.raises(InvalidInputError):
        volume_features(np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**16))
def test_volume_features_order_invariant_except_runs(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3), size=n)
    a, b = volume_features(P), volume_features(P[rng.permutation(n)])
    np.testing.assert_allclose(a[:12], b[:12])


def test_predict_volume(rng):
    X, y = separable_volumes(rng)
    f = fit_forest(X, y, ForestConfig(n_trees=5), seed=0)
    pred = predict_volume(f, X[-1])
    assert int(pred.label) == 2 and sum(pred.probabilities) == pytest.approx(1.0)
