import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfkit.policy import (Constraints, InfeasibleConstraintsError, PolicyNode,
                           best_score_allocation, evaluate_policy, fit_policy_tree,
                           fit_sequential_tree, largest_remainder, random_allocation,
                           three_way_split, write_allocation_table)
from mcfkit.synth import brute_force_tree_oracle

X4 = np.array([0.0, 0.0, 1.0, 1.0])
S4 = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])

# eight rows, one per cell of three binary features; frozen from a search
V8 = np.array([[(i >> b) & 1 for b in range(3)] for i in range(8)], dtype=float)
S8 = np.array([[2, 2], [2, 3], [1, 3], [2, 0], [1, 3], [2, 0], [3, 2], [3, 0]], dtype=float)


def test_three_way_split_sizes_and_strata():
    d = np.repeat([0, 1, 2], [50, 30, 20])
    parts = three_way_split(d, seed=4)
    assert [p.size for p in parts] == [40, 40, 20]
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(100))
    for p in parts:
        for a in range(3):
            assert abs(np.sum(d[p] == a) - p.size * np.mean(d == a)) <= 2
    again = three_way_split(d, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))
    with pytest.raises(ValueError):
        three_way_split(d, (0.5, 0.5, 0.5))


def test_four_row_example():
    tree = fit_policy_tree(S4, X4, depth=1)
    assert tree.value == 4.0
    assert tree.predict(X4).tolist() == [0, 0, 1, 1]
    assert tree.root.feature == 0


@pytest.mark.parametrize("method", ["exact", "cost"])
def test_four_row_example_with_cap(method):
    cons = Constraints((0.25, None))
    tree = fit_policy_tree(S4, X4, depth=1, constraints=cons, method=method)
    alloc = tree.predict(X4)
    assert np.sum(alloc == 0) <= 1
    assert tree.value <= 3.0
    if method == "exact":
        # a depth-1 tree cannot isolate one of two tied rows
        assert tree.value == brute_force_tree_oracle(S4, X4, 1, (0.25, None)).value == 2.0


def test_dominant_column_gives_depth_zero_value():
    r = np.random.default_rng(2)
    s = r.normal(size=(30, 3))
    s[:, 2] += 10
    tree = fit_policy_tree(s, r.normal(size=(30, 2)), depth=2)
    assert set(tree.predict(r.normal(size=(5, 2)))) == {2}
    assert tree.value == pytest.approx(s[:, 2].sum(), abs=1e-9)
    assert fit_policy_tree(s, r.normal(size=(30, 2)), depth=0).root.arm == 2


def test_costs_shift_assignments():
    tree = fit_policy_tree(S4, X4, depth=1, costs=[0.0, 2.0])
    assert set(tree.predict(X4)) == {0}


def test_infeasible_caps_and_bad_input():
    with pytest.raises(InfeasibleConstraintsError):
        Constraints((0.2, 0.2))
    with pytest.raises(ValueError):
        fit_policy_tree(np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        fit_policy_tree(S4, X4, depth=5)
    with pytest.raises(ValueError):
        fit_policy_tree(S4 * np.nan, X4)
    # caps sum to one but a constant feature cannot split the rows
    with pytest.raises(InfeasibleConstraintsError):
        fit_policy_tree(S4, np.zeros(4), depth=1, constraints=Constraints((0.5, 0.5)))


def test_sequential_zero_depth_is_base():
    r = np.random.default_rng(3)
    s, v = r.normal(size=(40, 3)), r.normal(size=(40, 2))
    a = fit_policy_tree(s, v, 2)
    b = fit_sequential_tree(s, v, 2, 0)
    assert b.value == a.value and np.array_equal(a.predict(v), b.predict(v))


def test_sequential_weakly_improves_base():
    r = np.random.default_rng(4)
    for _ in range(5):
        s, v = r.normal(size=(40, 3)), r.integers(0, 4, (40, 3)).astype(float)
        base = fit_policy_tree(s, v, 1, approx=False)
        comp = fit_sequential_tree(s, v, 1, 1, approx=False)
        assert comp.value >= base.value - 1e-12
        assert comp.depth <= 2
        assert comp.value <= fit_policy_tree(s, v, 2, approx=False).value + 1e-9


def test_sequential_can_fall_short_of_optimal_deeper_tree():
    # every row is its own cell, so the optimal depth-3 tree earns each row's best score
    assert fit_policy_tree(S8, V8, 3, approx=False).value == S8.max(axis=1).sum() == 21.0
    comp = fit_sequential_tree(S8, V8, 2, 1, approx=False)
    assert comp.value == 19.0
    # the depth-2 base it refines is itself optimal
    assert fit_policy_tree(S8, V8, 2, approx=False).value == \
        brute_force_tree_oracle(S8, V8, 2).value


def test_constrained_sequential_meets_caps():
    r = np.random.default_rng(5)
    s, v = r.normal(size=(60, 3)), r.integers(0, 3, (60, 2)).astype(float)
    cons = Constraints((None, 0.2, 0.3))
    tree = fit_sequential_tree(s, v, 1, 1, constraints=cons)
    assert cons.satisfied(tree.predict(v))


def test_best_score_examples():
    s = np.array([[10.0, 5.0], [3.0, 2.0]])
    assert best_score_allocation(s, Constraints((0.5, None))).tolist() == [0, 1]
    s2 = np.array([[3.0, 2.0], [10.0, 5.0]])
    assert best_score_allocation(s2, Constraints((0.5, None))).tolist() == [1, 0]
    assert best_score_allocation(np.zeros((4, 3))).tolist() == [0, 0, 0, 0]
    dom = np.column_stack([np.zeros(5), np.ones(5)])
    assert best_score_allocation(dom).tolist() == [1] * 5


def test_random_allocation_counts():
    assert largest_remainder((0.45, 0.25, 0.30), 20).tolist() == [9, 5, 6]
    a = random_allocation((0.5, 0.5), 4, seed=1)
    assert np.bincount(a).tolist() == [2, 2]
    assert np.array_equal(random_allocation((0.45, 0.25, 0.30), 20, 7),
                          random_allocation((0.45, 0.25, 0.30), 20, 7))
    assert np.bincount(random_allocation((0.45, 0.25, 0.30), 20, 7)).tolist() == [9, 5, 6]


def test_evaluate_policy(tmp_path):
    r = np.random.default_rng(6)
    s = r.normal(size=(50, 3))
    best = evaluate_policy(np.argmax(s, axis=1), s, "best")
    assert best.value == pytest.approx(s.max(axis=1).mean())
    for _ in range(20):
        assert evaluate_policy(r.integers(0, 3, 50), s).value <= best.value + 1e-12
    zero = evaluate_policy(r.integers(0, 3, 50), np.zeros((50, 3)))
    assert zero.value == 0.0 and zero.shares.sum() == pytest.approx(1.0)
    write_allocation_table(tmp_path / "a.csv", [best, zero])
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == \
        "policy,value,share_0,share_1,share_2"


def test_tree_export_roundtrip(tmp_path):
    r = np.random.default_rng(7)
    s, v = r.normal(size=(30, 2)), r.integers(0, 3, (30, 2)).astype(float)
    tree = fit_policy_tree(s, v, 2, kinds=["continuous", "unordered"],
                           feature_names=["age", "sector"])
    tree.to_json(tmp_path / "t.json")
    d = json.loads((tmp_path / "t.json").read_text())
    node = PolicyNode.from_dict(d["tree"], d["features"])
    assert node == tree.root
    assert "treatment" in tree.to_text()


# exact agreement with enumeration -----------------------------------------

_dyadic = st.integers(-8, 8).map(lambda k: k / 4)


@st.composite
def _instance(draw):
    n = draw(st.integers(2, 12))
    k = draw(st.integers(2, 3))
    q = draw(st.integers(1, 3))
    s = np.array(draw(st.lists(st.lists(_dyadic, min_size=k, max_size=k),
                               min_size=n, max_size=n)))
    v = np.array(draw(st.lists(st.lists(st.integers(0, 1), min_size=q, max_size=q),
                               min_size=n, max_size=n)), dtype=float)
    return s, v


@settings(max_examples=60, deadline=None)
@given(_instance(), st.integers(1, 2))
def test_tree_matches_enumeration(inst, depth):
    s, v = inst
    assert fit_policy_tree(s, v, depth).value == brute_force_tree_oracle(s, v, depth).value


@settings(max_examples=60, deadline=None)
@given(_instance(), st.sampled_from([0.0, 0.25, 0.5]))
def test_capped_tree_matches_enumeration(inst, cap):
    s, v = inst
    caps = (None,) + (cap,) + (None,) * (s.shape[1] - 2)
    oracle = brute_force_tree_oracle(s, v, 2, caps)
    tree = fit_policy_tree(s, v, 2, Constraints(caps))
    assert tree.value == oracle.value
    assert Constraints(caps).satisfied(tree.predict(v))


@settings(max_examples=40, deadline=None)
@given(_instance(), st.integers(0, 2), _dyadic)
def test_column_shift_keeps_assignments(inst, col, shift):
    s, v = inst
    col = col % s.shape[1]
    moved = s.copy()
    moved[:, col] += shift
    a = fit_policy_tree(s, v, 2).predict(v)
    b = fit_policy_tree(moved, v, 2).predict(v)
    if shift == 0:
        assert np.array_equal(a, b)
    else:
        # shifting every entry of every column leaves the argmax untouched
        both = s + shift
        assert np.array_equal(a, fit_policy_tree(both, v, 2).predict(v))
