import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partdisc.evaluation import clustering_acc, hungarian_match


def exhaustive_match(cost):
    """All-permutations oracle with lexicographic tie-break (C <= 7)."""
    C = cost.shape[0]
    best_cost, best_perm = None, None
    for perm in itertools.permutations(range(C)):
        total = sum(cost[i, perm[i]] for i in range(C))
        if best_cost is None or total < best_cost - 1e-12 or (
            abs(total - best_cost) <= 1e-12 and perm < best_perm
        ):
            best_cost, best_perm = total, perm
    return np.array(best_perm)


class TestHungarian:
    def test_identity(self):
        cost = np.eye(3) * -1.0
        np.testing.assert_array_equal(hungarian_match(cost), [0, 1, 2])

    def test_hand_example(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        # optimum: (0,1)+(1,0)+(2,2) = 1+2+2 = 5
        np.testing.assert_array_equal(hungarian_match(cost), [1, 0, 2])

    def test_tie_break_lexicographic(self):
        # every permutation costs the same; must return the identity
        cost = np.ones((4, 4))
        np.testing.assert_array_equal(hungarian_match(cost), [0, 1, 2, 3])

    def test_matches_exhaustive_100_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            C = int(rng.integers(2, 8))
            cost = rng.integers(0, 5, size=(C, C)).astype(float)  # integer costs force ties
            got = hungarian_match(cost)
            expect = exhaustive_match(cost)
            np.testing.assert_array_equal(got, expect)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            hungarian_match(np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian_match(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestClusteringAcc:
    def test_perfect_predictions(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        rep = clustering_acc(labels, labels, old_classes={0})
        assert rep.all == 1.0 and rep.old == 1.0 and rep.new == 1.0

    def test_permuted_cluster_ids_still_perfect(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        preds = np.array([2, 2, 0, 0, 1, 1])
        rep = clustering_acc(preds, labels, old_classes={0})
        assert rep.all == 1.0
        np.testing.assert_array_equal(rep.permutation[preds], labels)

    def test_hand_computed_split(self):
        # classes: 0 old, 1 new. preds perfect on old, half wrong on new.
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        preds = np.array([0, 0, 0, 0, 1, 1, 0, 0])
        rep = clustering_acc(preds, labels, old_classes={0}, C=2)
        assert rep.old == 1.0
        assert rep.new == 0.5
        assert rep.all == 0.75

    def test_single_global_match_not_per_subset(self):
        # a cluster dominated by new-class samples must map there even if that
        # costs the old-class samples inside it
        labels = np.array([0, 1, 1, 1])
        preds = np.array([1, 1, 1, 1])
        rep = clustering_acc(preds, labels, old_classes={0}, C=2)
        assert rep.new == 1.0 and rep.old == 0.0 and rep.all == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            clustering_acc(np.zeros(3, dtype=int), np.zeros(4, dtype=int), old_classes=set())

    def test_matches_bruteforce_accuracy(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            C = int(rng.integers(2, 6))
            n = int(rng.integers(5, 40))
            labels = rng.integers(0, C, size=n)
            preds = rng.integers(0, C, size=n)
            rep = clustering_acc(preds, labels, old_classes={0}, C=C)
            best = max(
                np.mean(np.array(perm)[preds] == labels)
                for perm in itertools.permutations(range(C))
            )
            assert abs(rep.all - best) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), C=st.integers(2, 5))
    def test_property_relabeling_invariance(self, seed, C):
        rng = np.random.default_rng(seed)
        n = 30
        labels = rng.integers(0, C, size=n)
        preds = rng.integers(0, C, size=n)
        base = clustering_acc(preds, labels, old_classes={0}, C=C).all
        relab = rng.permutation(C)
        permuted = clustering_acc(relab[preds], labels, old_classes={0}, C=C).all
        assert abs(base - permuted) < 1e-12
