import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_htr.core import BBox, ContractError, Detection
from fewshot_htr.decoder import (BLANK, DecodeConfig, ctc_runs, decode, decode_sequence,
                                 greedy_ctc_decode, max_ind)
from fewshot_htr.simmatrix import build_matrix

from oracles import ctc_collapse, decode_runs, decode_trace


def runs_matrix(runs, n_classes=4):
    """Matrix whose column argmax follows ``runs`` = [(class or BLANK, length), ...]."""
    cols = [c for c, n in runs for _ in range(n)]
    m = np.zeros((n_classes, len(cols)))
    for x, c in enumerate(cols):
        if c != BLANK:
            m[c, x] = 0.9
    return m


@st.composite
def grid_matrices(draw, max_w=40, max_n=4):
    n = draw(st.integers(1, max_n))
    w = draw(st.integers(1, max_w))
    levels = draw(st.lists(st.integers(0, 4), min_size=n * w, max_size=n * w))
    # coarse levels make ties and long runs common
    return np.array(levels, dtype=np.float64).reshape(n, w) / 4


class TestMaxInd:
    def test_all_zero(self):
        cm = max_ind(np.zeros((3, 5)))
        assert (cm.index == BLANK).all() and (cm.score == 0).all()

    def test_tie_goes_to_smaller_id(self):
        cm = max_ind(np.array([[0.2], [0.9], [0.9]]))
        assert cm.index[0] == 1 and cm.score[0] == 0.9

    def test_composes_with_projection(self):
        m = build_matrix([Detection(2, BBox(10, 0, 20, 5), 0.8)], 30, 3, 0.5)
        cm = max_ind(m)
        assert (cm.index[10:20] == 2).all() and (cm.score[10:20] == 0.8).all()
        assert (cm.index[:10] == BLANK).all() and (cm.index[20:] == BLANK).all()

    def test_no_classes(self):
        assert (max_ind(np.zeros((0, 4))).index == BLANK).all()


class TestDecode:
    def test_twenty_column_run(self):
        out = decode(runs_matrix([(3, 20), (BLANK, 10)]), DecodeConfig(15))
        assert [e.class_id for e in out] == [3]

    def test_ten_column_run(self):
        assert decode(runs_matrix([(3, 10), (BLANK, 10)]), DecodeConfig(15)) == []

    def test_blank_run_allows_repeat(self):
        seq = decode_sequence(runs_matrix([(1, 30), (BLANK, 5), (1, 30)]), DecodeConfig(15))
        assert seq == [1, 1]

    def test_emission_boundary(self):
        """A run emits exactly when it is at least rep_thresh + 3 columns long."""
        for thr in (0, 2, 15):
            assert decode_sequence(runs_matrix([(0, thr + 3)]), DecodeConfig(thr)) == [0]
            assert decode_sequence(runs_matrix([(0, thr + 2)]), DecodeConfig(thr)) == []

    def test_emit_column_and_provenance(self):
        d = Detection(2, BBox(5, 0, 40, 9), 0.8)
        m = build_matrix([d], 50, 3, 0.5)
        (e,) = decode(m, DecodeConfig(15))
        assert e.emit_column == 5 + 17
        assert e.provenance_box == d.box
        assert e.score == 0.8

    def test_overlapping_stronger_symbol_interrupts(self):
        dets = [Detection(0, BBox(0, 0, 40, 9), 0.7), Detection(1, BBox(30, 0, 70, 9), 0.9)]
        seq = decode_sequence(build_matrix(dets, 80, 2, 0.5), DecodeConfig(15))
        assert seq == [0, 1]
        dets = [Detection(0, BBox(0, 0, 40, 9), 0.7), Detection(1, BBox(10, 0, 50, 9), 0.9)]
        assert decode_sequence(build_matrix(dets, 80, 2, 0.5), DecodeConfig(15)) == [1]

    def test_blank_never_emitted(self):
        assert decode(np.zeros((2, 100)), DecodeConfig(0)) == []

    def test_config_validation(self):
        with pytest.raises(ContractError):
            DecodeConfig(-1)

    @settings(max_examples=300)
    @given(grid_matrices(), st.sampled_from([0, 2, 5]))
    def test_matches_literal_trace(self, m, thr):
        got = [(e.class_id, e.emit_column) for e in decode(m, DecodeConfig(thr))]
        assert got == decode_trace(m.tolist(), thr)

    @settings(max_examples=300)
    @given(grid_matrices(), st.sampled_from([0, 1, 2, 5, 15]))
    def test_matches_run_length_rule(self, m, thr):
        got = [(e.class_id, e.emit_column) for e in decode(m, DecodeConfig(thr))]
        assert got == decode_runs(m.tolist(), thr)

    @settings(max_examples=200)
    @given(grid_matrices(), st.sampled_from([0, 2, 5]))
    def test_at_most_one_emission_per_run(self, m, thr):
        idx = max_ind(m).index
        n_runs = sum(1 for x in range(len(idx)) if idx[x] != BLANK and (x == 0 or idx[x - 1] != idx[x]))
        assert len(decode(m, DecodeConfig(thr))) <= n_runs

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(18, 40), st.integers(0, 10)), max_size=8))
    def test_separated_detections_read_in_order(self, spec):
        """Non-overlapping detections wider than rep_thresh + 2 decode to their class sequence."""
        dets, x = [], 0
        for c, w, gap in spec:
            dets.append(Detection(c, BBox(x, 0, x + w, 4), 0.9))
            x += w + gap + 1
        m = build_matrix(dets, max(x, 1), 4, 0.5)
        assert decode_sequence(m, DecodeConfig(15)) == [d.class_id for d in dets if d.box.width >= 18]

    @settings(max_examples=200)
    @given(grid_matrices(), st.sampled_from([0, 2, 5]), st.integers(0, 3))
    def test_invariant_under_increasing_maps(self, m, thr, which):
        maps = [np.sqrt, lambda v: v ** 3, lambda v: np.expm1(4 * v) / np.expm1(4), lambda v: 0.2 * v]
        a = [(e.class_id, e.emit_column) for e in decode(m, DecodeConfig(thr))]
        b = [(e.class_id, e.emit_column) for e in decode(maps[which](m), DecodeConfig(thr))]
        assert a == b


class TestCtc:
    def _m(self, cols, n=6):
        m = np.zeros((n, len(cols)))
        for x, c in enumerate(cols):
            if c != BLANK:
                m[c, x] = 0.7
        return m

    @pytest.mark.parametrize("cols,want", [
        ([BLANK, BLANK, 2, 2, 2, BLANK, 5, 5], [2, 5]),
        ([BLANK] * 4, []),
        ([1, 1, BLANK, 1, 1], [1, 1]),
    ])
    def test_examples(self, cols, want):
        assert greedy_ctc_decode(self._m(cols)) == want

    @given(grid_matrices())
    def test_matches_collapse_oracle(self, m):
        assert greedy_ctc_decode(m) == ctc_collapse(list(max_ind(m).index))

    @given(grid_matrices())
    def test_runs_agree_with_sequence(self, m):
        runs = ctc_runs(m)
        assert [r[0] for r in runs] == greedy_ctc_decode(m)
        assert all(a[2] <= b[1] for a, b in zip(runs, runs[1:]))
