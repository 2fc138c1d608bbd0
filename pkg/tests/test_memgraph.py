import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmm.memgraph import LayoutError, build_hga_mask, layout, mask_to_pbm, super_indices

lengths_strategy = st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5)


def allow_oracle(lengths, i, j):
    """Direct restatement of the connectivity rule, used as the oracle."""
    spans = []
    offset = 0
    for n in lengths:
        spans.append((offset, offset + n + 1))
        offset += n + 1
    supers = {lo for lo, _ in spans}
    same_segment = any(lo <= i < hi and lo <= j < hi for lo, hi in spans)
    return same_segment or (i in supers and j in supers)


class TestLayout:
    def test_single_memory(self):
        lay = layout([2])
        assert lay.total_len == 3
        assert lay.super_positions == (0,)

    def test_two_memories(self):
        lay = layout([2, 3])
        assert lay.total_len == 7
        assert lay.super_positions == (0, 3)
        assert lay.spans == ((0, 3), (3, 7))

    def test_three_singletons(self):
        assert layout([1, 1, 1]).super_positions == (0, 2, 4)

    def test_zero_length_memory_rejected(self):
        with pytest.raises(LayoutError):
            layout([2, 0])

    def test_empty_rejected(self):
        with pytest.raises(LayoutError):
            layout([])


class TestMask:
    def test_single_memory_fully_connected(self):
        allow = build_hga_mask(layout([2]))
        assert allow.shape == (3, 3)
        assert allow.all()

    def test_two_singletons_pattern(self):
        allow = build_hga_mask(layout([1, 1]))
        expected = np.array(
            [
                [1, 1, 1, 0],
                [1, 1, 0, 0],
                [1, 0, 1, 1],
                [0, 0, 1, 1],
            ],
            dtype=bool,
        )
        np.testing.assert_array_equal(allow, expected)
        assert allow.sum() == 10

    def test_true_count_2_3(self):
        lengths = [2, 3]
        allow = build_hga_mask(layout(lengths))
        n = allow.shape[0]
        oracle = sum(allow_oracle(lengths, i, j) for i in range(n) for j in range(n))
        assert allow.sum() == oracle == 27

    @given(lengths_strategy)
    @settings(max_examples=200)
    def test_matches_rule_oracle(self, lengths):
        allow = build_hga_mask(layout(lengths))
        n = allow.shape[0]
        for i in range(n):
            for j in range(n):
                assert allow[i, j] == allow_oracle(lengths, i, j)

    @given(lengths_strategy)
    @settings(max_examples=200)
    def test_invariants(self, lengths):
        lay = layout(lengths)
        allow = build_hga_mask(lay)
        m = len(lengths)
        # symmetry and self-attention
        np.testing.assert_array_equal(allow, allow.T)
        assert allow.diagonal().all()
        # true-count formula
        assert allow.sum() == sum((n + 1) ** 2 for n in lengths) + m * (m - 1)
        # super nodes all interconnected
        sup = np.asarray(lay.super_positions)
        assert allow[np.ix_(sup, sup)].all()
        # trivial nodes of different memories blocked
        for a, (lo_a, hi_a) in enumerate(lay.spans):
            for b, (lo_b, hi_b) in enumerate(lay.spans):
                if a == b:
                    continue
                assert not allow[lo_a + 1 : hi_a, lo_b + 1 : hi_b].any()

    @given(lengths_strategy)
    @settings(max_examples=50)
    def test_reachability_through_super_backbone(self, lengths):
        """Every node is within 2 hops of every super node, and the whole
        graph has diameter <= 3 (trivial-to-trivial across memories goes
        trivial -> super -> super -> trivial)."""
        lay = layout(lengths)
        a = build_hga_mask(lay).astype(int)
        reach2 = (a + a @ a) > 0
        sup = np.asarray(lay.super_positions)
        assert reach2[:, sup].all()
        reach3 = (a + a @ a + a @ a @ a) > 0
        assert reach3.all()


class TestSuperIndices:
    def test_examples(self):
        assert super_indices(layout([2, 3])) == [0, 3]
        assert super_indices(layout([1])) == [0]

    def test_stable_under_equal_lengths(self):
        assert super_indices(layout([2, 2, 2])) == [0, 3, 6]


def test_pbm_export():
    text = mask_to_pbm(build_hga_mask(layout([1, 1])))
    lines = text.splitlines()
    assert lines[0] == "P1"
    assert lines[1] == "4 4"
    assert lines[2] == "1 1 1 0"
    assert len(lines) == 6
