import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scf.numkit import make_rng
from scf.rss import DisjointSet, ds_find, ds_union, select_positives


def components_oracle(n, edges):
    """Quadratic label propagation: each node ends up labeled with its component minimum."""
    comp = list(range(n))
    changed = True
    while changed:
        changed = False
        for a, b in edges:
            lo = min(comp[a], comp[b])
            if comp[a] != lo or comp[b] != lo:
                comp[a] = comp[b] = lo
                changed = True
    return comp


def is_spanning_tree(nodes, edges):
    if len(edges) != len(nodes) - 1:
        return False
    idx = {v: k for k, v in enumerate(nodes)}
    comp = components_oracle(len(nodes), [(idx[a], idx[b]) for a, b in edges])
    return len(set(comp)) == 1  # n-1 edges + connected => acyclic


class TestDisjointSet:
    def test_fresh(self):
        assert ds_find(DisjointSet(4), 2) == 2

    def test_union(self):
        ds = DisjointSet(4)
        assert ds_union(ds, 0, 1) is True
        assert ds.components == 3
        assert ds_find(ds, 0) == ds_find(ds, 1)
        assert ds_union(ds, 0, 1) is False
        assert ds.components == 3

    def test_chain_to_one(self):
        ds = DisjointSet(6)
        for i in range(5):
            ds.union(i, i + 1)
        assert ds.components == 1
        assert ds.members(3) == list(range(6))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            DisjointSet(3).find(3)
        with pytest.raises(IndexError):
            DisjointSet(3).union(0, -1)

    @given(st.integers(1, 25), st.lists(st.tuples(st.integers(0, 24), st.integers(0, 24)), max_size=40))
    def test_matches_label_propagation(self, n, raw):
        edges = [(a % n, b % n) for a, b in raw]
        ds = DisjointSet(n)
        for a, b in edges:
            ds.union(a, b)
        comp = components_oracle(n, edges)
        for i in range(n):
            for j in range(n):
                assert (ds.find(i) == ds.find(j)) == (comp[i] == comp[j])
        assert ds.components == len(set(comp))
        # forest: every parent chain terminates at a root
        for i in range(n):
            seen, k = set(), i
            while ds.parent[k] != k:
                assert k not in seen
                seen.add(k)
                k = ds.parent[k]


class TestSelectPositives:
    def test_singletons_skipped(self):
        sel = select_positives([0, 1], make_rng(0))
        assert sel.pairs == []
        assert sel.skipped_classes == [0, 1]

    def test_forced_pairs(self):
        assert select_positives([0, 0, 1, 1], make_rng(0)).pairs == [(0, 1), (2, 3)]

    def test_one_class_of_four(self):
        sel = select_positives([0, 0, 0, 0], make_rng(9))
        assert len(sel) == 3
        assert [a for a, _ in sel.pairs] == [0, 1, 2]
        assert is_spanning_tree([0, 1, 2, 3], sel.pairs)

    def test_walkthrough_outcome_reachable(self):
        # A->D, B->C, C->D is one of the valid draws for four samples
        target = [(0, 3), (1, 2), (2, 3)]
        hits = sum(select_positives([0] * 4, make_rng(s)).pairs == target for s in range(300))
        assert hits > 0

    def test_positive_in_other_component(self):
        rng = make_rng(5)
        labels = rng.integers(0, 2, size=30)
        sel = select_positives(labels, make_rng(6))
        ds = DisjointSet(30)
        for a, p in sel.pairs:
            assert labels[a] == labels[p] and a != p
            assert ds.find(a) != ds.find(p)
            ds.union(a, p)

    def test_deterministic(self):
        labels = make_rng(1).integers(0, 3, size=20)
        assert select_positives(labels, make_rng(2)).pairs == select_positives(labels, make_rng(2)).pairs

    def test_empty(self):
        with pytest.raises(ValueError):
            select_positives([], make_rng(0))

    def test_arrays(self):
        sel = select_positives([0, 0, 1, 1], make_rng(0))
        np.testing.assert_array_equal(sel.anchors, [0, 2])
        np.testing.assert_array_equal(sel.positives, [1, 3])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=64), st.integers(0, 2**32))
    def test_spanning_tree_per_class(self, labels, seed):
        sel = select_positives(labels, make_rng(seed))
        labels = np.array(labels)
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c).tolist()
            edges = [(a, p) for a, p in sel.pairs if labels[a] == c]
            if len(members) == 1:
                assert c in sel.skipped_classes and not edges
            else:
                assert is_spanning_tree(members, edges)
                assert len({a for a, _ in edges}) == len(edges)
