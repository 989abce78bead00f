"""Progressive pseudo-labeling of an unlabeled line corpus.

Each iteration grows the template bank with the crops accepted in the previous
one, transcribes every line that still has unlabeled ink, and commits the most
confident transcribed symbols (a fixed budget per iteration). Labels are never
revised. The loop stops when nothing credible is left to add.

Candidates are decoder emissions together with the detection box that produced
them, so the similarity-matrix threshold and the run-length rule filter the raw
template responses before anything is committed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (AnnotatedLine, BBox, ContractError, Dataset, GrayImage, Origin,
                   SupportSet, Symbol, crop, iou)
from .decoder import DecodeConfig
from .evaluate import corpus_ser
from .matcher import MatchConfig, TemplateBank, extend_bank_many, normalize_glyph
from .pipeline import Transcriber, map_ordered, to_original
from .simmatrix import DEFAULT_CONF_THRESH
from .synthgen import SynthConfig, generate_synthetic


@dataclass(frozen=True)
class StartLine:
    """A real line with trusted labels, used to seed the semi-supervised mode."""

    line_id: str
    image: GrayImage
    symbols: tuple[Symbol, ...]


@dataclass(frozen=True)
class LoopConfig:
    min_conf: float = 0.4
    batch_fraction: float = 0.2
    synth_lines_per_iter: int = 200
    max_iters: int = 50
    conf_thresh: float = DEFAULT_CONF_THRESH
    dedup_iou: float = 0.5
    # a candidate whose ink columns are mostly inside accepted boxes is not new
    max_ink_overlap: float = 0.5
    # crops kept per class each iteration, best first; None keeps all
    max_new_templates: int | None = 8
    seed: int = 0
    start_labeled: tuple[StartLine, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ContractError("batch_fraction must lie in (0, 1]")
        if not 0.0 <= self.min_conf <= 1.0:
            raise ContractError("min_conf must lie in [0, 1]")
        if not 0.0 <= self.conf_thresh <= 1.0:
            raise ContractError("conf_thresh must lie in [0, 1]")
        if not 0.0 < self.dedup_iou <= 1.0:
            raise ContractError("dedup_iou must lie in (0, 1]")
        if not 0.0 <= self.max_ink_overlap <= 1.0:
            raise ContractError("max_ink_overlap must lie in [0, 1]")
        if self.max_iters < 0 or self.synth_lines_per_iter < 0:
            raise ContractError("max_iters and synth_lines_per_iter must be >= 0")
        if self.max_new_templates is not None and self.max_new_templates < 0:
            raise ContractError("max_new_templates must be >= 0")


@dataclass(frozen=True)
class Candidate:
    line_id: str
    order: int          # position of the line in the corpus, used for tie-breaks
    class_id: int
    box: BBox           # original line coordinates
    score: float

    def sort_key(self):
        return (-self.score, self.order, self.box.x0, self.class_id)


@dataclass(frozen=True)
class Label:
    symbol: Symbol
    iteration: int      # 0 for seeded ground truth


@dataclass
class LoopState:
    iteration: int
    bank: TemplateBank
    pool: dict[str, tuple[Label, ...]]
    history: list[dict] = field(default_factory=list)
    total_candidates: int | None = None      # T, frozen at the first detection pass
    pending: tuple[tuple[int, GrayImage, float], ...] = ()
    remaining: int | None = None             # eligible candidates at the last pass
    last_added: int | None = None

    @property
    def total_labels(self) -> int:
        return sum(len(v) for v in self.pool.values())

    def labels(self, line_id: str) -> list[Symbol]:
        return [lab.symbol for lab in self.pool.get(line_id, ())]


@dataclass
class LoopResult:
    dataset: Dataset
    history: list[dict]
    bank: TemplateBank
    match_cfg: MatchConfig
    decode_cfg: DecodeConfig
    state: LoopState

    @property
    def total_labels(self) -> int:
        return self.state.total_labels

    @property
    def iterations(self) -> int:
        return self.state.iteration


# ---------------------------------------------------------------------------
# helpers

def _budget_count(fraction: float, total: int) -> int:
    # round first so 0.2 * 100 cannot drift to 21 through float error
    return int(math.ceil(round(fraction * total, 9)))


def estimate_budget(state: LoopState, cfg: LoopConfig) -> int:
    """Labels allowed this iteration: ceil(fraction * T), clamped to what is left."""
    total = state.total_candidates or 0
    k = _budget_count(cfg.batch_fraction, total)
    if state.remaining is not None:
        k = min(k, state.remaining)
    return k


def ink_mask(img: GrayImage, ink_level: int = 128) -> np.ndarray:
    """Per column: does the middle 60% band of the line hold ink?"""
    h = img.height
    lo, hi = int(math.floor(0.2 * h)), int(math.ceil(0.8 * h))
    band = img.data[lo:max(hi, lo + 1)]
    return (band < ink_level).any(axis=0)


def covered_mask(width: int, labels: Sequence[Symbol]) -> np.ndarray:
    covered = np.zeros(width, dtype=bool)
    for s in labels:
        covered[s.box.x0:s.box.x1] = True
    return covered


def fully_labeled(img: GrayImage, labels: Sequence[Symbol], min_extent: int = 1) -> bool:
    """True when no stretch of unlabeled ink at least ``min_extent`` columns wide is left.

    A stretch runs between labeled columns; its extent is first to last ink column.
    """
    free = ~covered_mask(img.width, labels)
    ink = ink_mask(img) & free
    if not ink.any():
        return True
    if min_extent <= 1:
        return False
    # split uncovered columns into maximal runs and measure the ink extent of each
    edges = np.flatnonzero(np.diff(np.concatenate(([0], free.astype(np.int8), [0]))))
    for a, b in zip(edges[::2], edges[1::2]):
        cols = np.flatnonzero(ink[a:b])
        if len(cols) and cols[-1] - cols[0] + 1 >= min_extent:
            return False
    return True


def ink_overlap(box: BBox, ink: np.ndarray, covered: np.ndarray) -> float:
    """Share of the box's ink columns already inside accepted boxes (1.0 if it has no ink)."""
    cols = ink[box.x0:box.x1]
    n = int(cols.sum())
    if n == 0:
        return 1.0
    return float((cols & covered[box.x0:box.x1]).sum()) / n


def _line_candidates(tr: Transcriber, line_id: str, order: int, img: GrayImage) -> list[Candidate]:
    res = tr.transcribe(img)
    out = []
    for e in res.emissions:
        if e.provenance_box is None:
            continue
        box = to_original(e.provenance_box, res.x_scale, img.width, img.height)
        out.append(Candidate(line_id, order, e.class_id, box, float(e.score)))
    return out


def _eligible(cands: Sequence[Candidate], state: LoopState, cfg: LoopConfig,
              images: dict[str, GrayImage] | None = None) -> list[Candidate]:
    """Candidates above ``min_conf`` that do not repeat an accepted label.

    With ``images`` given, candidates whose ink is mostly labeled already are
    dropped as well.
    """
    out = []
    masks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for c in cands:
        if c.score < cfg.min_conf:
            continue
        labels = state.labels(c.line_id)
        if any(iou(c.box, s.box) >= cfg.dedup_iou for s in labels):
            continue
        if images is not None and labels:
            if c.line_id not in masks:
                img = images[c.line_id]
                masks[c.line_id] = (ink_mask(img), covered_mask(img.width, labels))
            if ink_overlap(c.box, *masks[c.line_id]) > cfg.max_ink_overlap:
                continue
        out.append(c)
    return out


def select_pseudo_labels(cands: Sequence[Candidate], state: LoopState, cfg: LoopConfig,
                         budget: int | None = None,
                         images: dict[str, GrayImage] | None = None) -> list[Candidate]:
    """Top-``budget`` credible candidates, skipping any that duplicate an accepted box.

    Picks made earlier in the same batch count as accepted.
    """
    pool = sorted(_eligible(cands, state, cfg, images), key=Candidate.sort_key)
    k = estimate_budget(state, cfg) if budget is None else budget
    accepted: list[Candidate] = []
    taken: dict[str, list[BBox]] = {}
    masks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for c in pool:
        if len(accepted) >= k:
            break
        if any(iou(c.box, b) >= cfg.dedup_iou for b in taken.get(c.line_id, ())):
            continue
        if images is not None:
            if c.line_id not in masks:
                img = images[c.line_id]
                masks[c.line_id] = (ink_mask(img), covered_mask(img.width, state.labels(c.line_id)))
            ink, covered = masks[c.line_id]
            if c.line_id in taken and ink_overlap(c.box, ink, covered) > cfg.max_ink_overlap:
                continue
            covered[c.box.x0:c.box.x1] = True
        accepted.append(c)
        taken.setdefault(c.line_id, []).append(c.box)
    return accepted


def _min_extent(decode_cfg: DecodeConfig, norm_height: int, height: int) -> int:
    return max(1, int(math.floor((decode_cfg.rep_thresh + 2) * height / norm_height)))


def _pick_templates(items: Sequence[tuple[int, GrayImage, float]], limit: int | None):
    if limit is None:
        return [(cid, img) for cid, img, _ in items]
    per_class: dict[int, list[tuple[int, float, GrayImage]]] = {}
    for i, (cid, img, score) in enumerate(items):
        per_class.setdefault(cid, []).append((i, score, img))
    keep = []
    for cid in sorted(per_class):
        best = sorted(per_class[cid], key=lambda t: (-t[1], t[0]))[:limit]
        keep.extend((i, cid, img) for i, _, img in best)
    return [(cid, img) for _, cid, img in sorted(keep, key=lambda t: t[0])]


def _grow(bank: TemplateBank, items, cfg: LoopConfig) -> TemplateBank:
    if not items:
        return bank
    chosen = _pick_templates(items, cfg.max_new_templates)
    normed = [(cid, normalize_glyph(img, bank.norm_height)) for cid, img in chosen]
    return extend_bank_many(bank, [(c, t) for c, t in normed if t is not None], normalized=True)


def _sanity_ser(tr: Transcriber, support: SupportSet, cfg: LoopConfig, synth_cfg: SynthConfig,
                iteration: int, threads: int):
    if cfg.synth_lines_per_iter == 0:
        return None
    seed = int(np.random.SeedSequence([cfg.seed, iteration]).generate_state(1)[0])
    scfg = replace(synth_cfg, seed=seed, line_height=tr.match_cfg.norm_height)
    lines = [generate_synthetic(support, scfg, i) for i in range(cfg.synth_lines_per_iter)]
    res = tr.transcribe_many([sl.image for sl in lines], threads=threads)
    return corpus_ser([(r.sequence, sl.annotation.sequence) for r, sl in zip(res, lines)])


# ---------------------------------------------------------------------------
# loop

def init_state(support: SupportSet, cfg: LoopConfig, match_cfg: MatchConfig = MatchConfig(),
               bank: TemplateBank | None = None) -> LoopState:
    bank = bank or TemplateBank.from_support(support, match_cfg.norm_height)
    pool: dict[str, tuple[Label, ...]] = {}
    seed_crops = []
    for sl in cfg.start_labeled or ():
        syms = tuple(Symbol(s.class_id, s.box, 1.0, Origin.GROUND_TRUTH) for s in sl.symbols)
        pool[sl.line_id] = tuple(Label(s, 0) for s in syms)
        seed_crops.extend((s.class_id, crop(sl.image, s.box)) for s in syms)
    if seed_crops:
        bank = extend_bank_many(bank, seed_crops)
    return LoopState(0, bank, pool)


def run_iteration(state: LoopState, corpus: Sequence[tuple[str, GrayImage]], support: SupportSet,
                  cfg: LoopConfig, match_cfg: MatchConfig = MatchConfig(),
                  decode_cfg: DecodeConfig = DecodeConfig(), synth_cfg: SynthConfig = SynthConfig(),
                  threads: int = 1) -> LoopState:
    """One adapt / detect / select / commit round; returns the next state."""
    iteration = state.iteration + 1
    bank = _grow(state.bank, state.pending, cfg)
    tr = Transcriber(bank, match_cfg, decode_cfg, cfg.conf_thresh)

    images = dict(corpus)
    norm_h = match_cfg.norm_height
    # nothing narrower than a decodable run can still be transcribed
    todo = [(i, lid, img) for i, (lid, img) in enumerate(corpus)
            if not fully_labeled(img, state.labels(lid),
                                 _min_extent(decode_cfg, norm_h, img.height))]
    per_line = map_ordered(lambda t: _line_candidates(tr, t[1], t[0], t[2]), todo, threads)
    cands = [c for group in per_line for c in group]

    nxt = replace(state, iteration=iteration, bank=bank, pending=(), pool=dict(state.pool),
                  history=list(state.history))
    eligible = _eligible(cands, nxt, cfg, images)
    if nxt.total_candidates is None:
        nxt.total_candidates = len(eligible)
    nxt.remaining = len(eligible)
    accepted = select_pseudo_labels(eligible, nxt, cfg, estimate_budget(nxt, cfg), images)

    for c in accepted:
        sym = Symbol(c.class_id, c.box, c.score, Origin.PSEUDO)
        nxt.pool[c.line_id] = nxt.pool.get(c.line_id, ()) + (Label(sym, iteration),)
    nxt.pending = tuple((c.class_id, crop(images[c.line_id], c.box), c.score) for c in accepted)
    nxt.last_added = len(accepted)

    if accepted:
        scores = [c.score for c in accepted]
        nxt.history.append({
            "iteration": iteration,
            "added": len(accepted),
            "cumulative": nxt.total_labels,
            "mean_score": float(np.mean(scores)),
            "min_score": float(min(scores)),
            "synth_sanity_ser": _sanity_ser(tr, support, cfg, synth_cfg, iteration, threads),
        })
    return nxt


def to_dataset(state: LoopState, corpus: Sequence[tuple[str, GrayImage]], alphabet: Sequence[str],
               root=None) -> Dataset:
    lines = [AnnotatedLine(lid, img.width, img.height, tuple(state.labels(lid)))
             for lid, img in corpus]
    return Dataset(list(alphabet), lines, root)


def run_loop(corpus: Sequence[tuple[str, GrayImage]], support: SupportSet, cfg: LoopConfig = LoopConfig(),
             match_cfg: MatchConfig | None = None, decode_cfg: DecodeConfig | None = None,
             synth_cfg: SynthConfig | None = None, threads: int = 1, snapshot_dir=None,
             root=None) -> LoopResult:
    """Label ``corpus`` (a sequence of (line_id, image) pairs) until no credible label remains."""
    match_cfg = match_cfg or MatchConfig()
    decode_cfg = decode_cfg or DecodeConfig()
    synth_cfg = synth_cfg or SynthConfig()
    corpus = list(corpus)
    ids = [lid for lid, _ in corpus]
    if len(set(ids)) != len(ids):
        raise ContractError("corpus line ids must be unique")
    state = init_state(support, cfg, match_cfg)
    while corpus and state.iteration < cfg.max_iters:
        state = run_iteration(state, corpus, support, cfg, match_cfg, decode_cfg, synth_cfg, threads)
        if snapshot_dir is not None and state.last_added:
            write_overlay(state, corpus, Path(snapshot_dir) / f"iter_{state.iteration:03d}.png")
        if not state.remaining or not state.last_added:
            break
    # crops of the final batch still belong in the bank handed to later transcription
    state.bank = _grow(state.bank, state.pending, cfg)
    state.pending = ()
    return LoopResult(to_dataset(state, corpus, support.names, root), state.history,
                      state.bank, match_cfg, decode_cfg, state)


# ---------------------------------------------------------------------------
# overlays

_NEW = (230, 60, 40)
_OLD = (40, 120, 230)
_SEED = (60, 170, 60)


def write_overlay(state: LoopState, corpus: Sequence[tuple[str, GrayImage]], path) -> None:
    """Stack every line with its labels tinted: this iteration red, earlier blue, seeded green."""
    from PIL import Image

    if not corpus:
        return
    width = max(img.width for _, img in corpus)
    height = sum(img.height for _, img in corpus)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    y = 0
    for lid, img in corpus:
        rgb = np.repeat(img.data[:, :, None], 3, axis=2).astype(np.float64)
        for lab in state.pool.get(lid, ()):
            color = _SEED if lab.iteration == 0 else _NEW if lab.iteration == state.iteration else _OLD
            b = lab.symbol.box
            region = rgb[b.y0:b.y1, b.x0:b.x1]
            region[:] = 0.6 * region + 0.4 * np.array(color)
        canvas[y:y + img.height, :img.width] = rgb.round().astype(np.uint8)
        y += img.height
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(path)
