import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_htr.core import BBox, ContractError, GrayImage, Origin, Symbol
from fewshot_htr.evaluate import labeling_accuracy
from fewshot_htr.pseudolabel import (Candidate, Label, LoopConfig, LoopState, StartLine,
                                     estimate_budget, fully_labeled, ink_overlap, ink_mask,
                                     covered_mask, init_state, run_iteration, run_loop,
                                     select_pseudo_labels, write_overlay)
from fewshot_htr.synthgen import SynthConfig, generate_synthetic


def _state(total=None, remaining=None, pool=None):
    return LoopState(1, None, pool or {}, total_candidates=total, remaining=remaining)


def _cand(score, x0=0, line="a", cls=0, order=0, w=10):
    return Candidate(line, order, cls, BBox(x0, 0, x0 + w, 20), score)


class TestConfig:
    def test_defaults(self):
        cfg = LoopConfig()
        assert (cfg.min_conf, cfg.batch_fraction) == (0.4, 0.2)

    @pytest.mark.parametrize("kw", [dict(batch_fraction=0.0), dict(batch_fraction=1.5),
                                    dict(min_conf=-0.1), dict(max_iters=-1),
                                    dict(dedup_iou=0.0), dict(max_new_templates=-2)])
    def test_rejects(self, kw):
        with pytest.raises(ContractError):
            LoopConfig(**kw)


class TestBudget:
    def test_fifth_of_hundred(self):
        assert estimate_budget(_state(100), LoopConfig()) == 20

    def test_clamped_to_remaining(self):
        assert estimate_budget(_state(100, remaining=7), LoopConfig()) == 7

    def test_full_fraction(self):
        assert estimate_budget(_state(37), LoopConfig(batch_fraction=1.0)) == 37

    @given(st.integers(0, 10_000), st.integers(1, 100))
    def test_ceil(self, total, pct):
        k = estimate_budget(_state(total), LoopConfig(batch_fraction=pct / 100))
        assert k == -(-total * pct // 100)


class TestSelection:
    def test_nothing_credible(self):
        cands = [_cand(0.3, 0), _cand(0.39, 20)]
        assert select_pseudo_labels(cands, _state(10), LoopConfig(), budget=5) == []

    def test_same_box_keeps_best(self):
        cands = [_cand(0.8, 0, cls=1), _cand(0.9, 0, cls=2)]
        out = select_pseudo_labels(cands, _state(10), LoopConfig(), budget=5)
        assert [c.score for c in out] == [0.9]

    def test_top_k(self):
        cands = [_cand(s, 20 * i) for i, s in enumerate([0.5, 0.95, 0.7, 0.6, 0.9])]
        out = select_pseudo_labels(cands, _state(10), LoopConfig(), budget=3)
        assert [c.score for c in out] == [0.95, 0.9, 0.7]

    def test_skips_accepted_box(self):
        prev = Symbol(0, BBox(0, 0, 10, 20), 0.9, Origin.PSEUDO)
        st_ = _state(10, pool={"a": (Label(prev, 1),)})
        assert select_pseudo_labels([_cand(0.99, 1)], st_, LoopConfig(), budget=5) == []

    def test_tie_break_by_line_order(self):
        cands = [_cand(0.8, 0, line="b", order=1), _cand(0.8, 0, line="a", order=0)]
        out = select_pseudo_labels(cands, _state(10), LoopConfig(), budget=1)
        assert out[0].line_id == "a"

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 200)), max_size=30),
           st.integers(0, 10), st.floats(0, 1))
    def test_invariants(self, raw, k, min_conf):
        cfg = LoopConfig(min_conf=min_conf)
        cands = [_cand(s, x) for s, x in raw]
        out = select_pseudo_labels(cands, _state(10), cfg, budget=k)
        assert len(out) <= k
        assert all(c.score >= min_conf for c in out)
        scores = [c.score for c in out]
        assert scores == sorted(scores, reverse=True)


class TestInk:
    def _img(self):
        data = np.full((20, 50), 255, np.uint8)
        data[5:15, 10:20] = 0
        data[5:15, 30:33] = 0
        return GrayImage(data)

    def test_mask(self):
        m = ink_mask(self._img())
        assert m[10:20].all() and m[30:33].all() and m.sum() == 13

    def test_fully_labeled(self):
        img = self._img()
        a = Symbol(0, BBox(10, 0, 20, 20))
        b = Symbol(0, BBox(30, 0, 33, 20))
        assert not fully_labeled(img, [a])
        assert fully_labeled(img, [a, b])
        assert fully_labeled(img, [a], min_extent=4)
        assert not fully_labeled(img, [a], min_extent=3)

    def test_overlap(self):
        img = self._img()
        cov = covered_mask(50, [Symbol(0, BBox(10, 0, 20, 20))])
        assert ink_overlap(BBox(15, 0, 25, 20), ink_mask(img), cov) == 1.0
        assert ink_overlap(BBox(15, 0, 35, 20), ink_mask(img), cov) == pytest.approx(5 / 8)
        assert ink_overlap(BBox(40, 0, 45, 20), ink_mask(img), cov) == 1.0  # no ink


# ---------------------------------------------------------------------------
# small end-to-end corpora

def _corpus(support, n=6, seed=3):
    cfg = SynthConfig(seed=seed, symbols_per_line=(3, 5), spacing_range=(4, 20))
    lines = [generate_synthetic(support, cfg, i) for i in range(n)]
    return [(sl.annotation.image, sl.image) for sl in lines], lines


FAST = dict(synth_lines_per_iter=0, max_iters=20)


@pytest.fixture(scope="module")
def small_run(small_support):
    corpus, lines = _corpus(small_support)
    return run_loop(corpus, small_support, LoopConfig(**FAST)), lines


def test_loop_terminates_with_accurate_labels(small_run, small_support):
    res, lines = small_run
    from fewshot_htr.core import Dataset
    gt = Dataset(small_support.names, [sl.annotation for sl in lines])
    assert 1 <= res.iterations <= 20
    assert labeling_accuracy(res.dataset, gt).accuracy >= 0.8


def test_history_invariants(small_run):
    res, _ = small_run
    cum = [h["cumulative"] for h in res.history]
    assert all(b > a for a, b in zip(cum, cum[1:]))
    assert all(h["added"] > 0 and h["min_score"] >= 0.4 for h in res.history)
    assert sum(h["added"] for h in res.history) == res.total_labels == cum[-1]
    assert [h["iteration"] for h in res.history] == sorted({h["iteration"] for h in res.history})


def test_labels_are_append_only(small_support):
    corpus, _ = _corpus(small_support, n=4)
    cfg = LoopConfig(**FAST)
    state = init_state(small_support, cfg)
    seen = {}
    for _ in range(4):
        state = run_iteration(state, corpus, small_support, cfg)
        for lid, labs in state.pool.items():
            assert labs[:len(seen.get(lid, ()))] == seen.get(lid, ())
        seen = dict(state.pool)
        assert state.last_added <= math.ceil(round(0.2 * state.total_candidates, 9))


def test_full_batch_single_adding_iteration(small_support):
    corpus, _ = _corpus(small_support, n=3)
    res = run_loop(corpus, small_support, LoopConfig(batch_fraction=1.0, min_conf=0.0, **FAST))
    assert len(res.history) == 1


def test_empty_corpus():
    from fewshot_htr.synthgen import procedural_alphabet
    sup = procedural_alphabet(2, 1, seed=0)
    res = run_loop([], sup, LoopConfig(**FAST))
    assert res.iterations == 0 and res.history == [] and res.total_labels == 0


def test_fully_labeled_pool_adds_nothing(small_support):
    corpus, lines = _corpus(small_support, n=3)
    start = tuple(StartLine(lid, img, sl.annotation.symbols) for (lid, img), sl in zip(corpus, lines))
    res = run_loop(corpus, small_support, LoopConfig(start_labeled=start, **FAST))
    assert res.history == []
    assert res.total_labels == sum(len(sl.annotation.symbols) for sl in lines)
    assert all(s.origin is Origin.GROUND_TRUTH for ln in res.dataset.lines for s in ln.symbols)


def test_duplicate_ids_rejected(small_support):
    corpus, _ = _corpus(small_support, n=1)
    with pytest.raises(ContractError):
        run_loop(corpus * 2, small_support, LoopConfig(**FAST))


def test_deterministic(small_support):
    corpus, _ = _corpus(small_support, n=3)
    a = run_loop(corpus, small_support, LoopConfig(max_iters=2, synth_lines_per_iter=2))
    b = run_loop(corpus, small_support, LoopConfig(max_iters=2, synth_lines_per_iter=2))
    assert a.history == b.history
    assert a.dataset.lines == b.dataset.lines


def test_overlay(small_run, small_support, tmp_path):
    from PIL import Image
    res, lines = small_run
    corpus = [(sl.annotation.image, sl.image) for sl in lines]
    write_overlay(res.state, corpus, tmp_path / "o.png")
    im = Image.open(tmp_path / "o.png")
    assert im.mode == "RGB" and im.size[1] == sum(sl.image.height for sl in lines)
