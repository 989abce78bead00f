"""Left-to-right decoding of a similarity matrix.

``decode`` follows the repetition-threshold scan: a class is transcribed once
it has held the column argmax for more than ``rep_thresh`` consecutive columns
after its run began. ``greedy_ctc_decode`` is the plain best-path collapse,
kept as a baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BBox, ContractError
from .simmatrix import SimilarityMatrix

BLANK = -1


@dataclass(frozen=True)
class DecodeConfig:
    rep_thresh: int = 15

    def __post_init__(self):
        if self.rep_thresh < 0:
            raise ContractError("rep_thresh must be >= 0")


@dataclass(frozen=True, eq=False)
class ColumnMax:
    index: np.ndarray   # class id per column, BLANK where the column is empty
    score: np.ndarray

    def __len__(self):
        return len(self.index)


@dataclass(frozen=True)
class Emission:
    class_id: int
    emit_column: int
    provenance_box: BBox | None
    score: float


def max_ind(m: SimilarityMatrix | np.ndarray) -> ColumnMax:
    cells = m.cells if isinstance(m, SimilarityMatrix) else np.asarray(m, dtype=np.float64)
    if cells.shape[0] == 0:
        n = cells.shape[1]
        return ColumnMax(np.full(n, BLANK, dtype=np.int64), np.zeros(n))
    idx = np.argmax(cells, axis=0).astype(np.int64)   # first max wins ties
    score = cells[idx, np.arange(cells.shape[1])]
    idx[score <= 0] = BLANK
    score = np.where(idx == BLANK, 0.0, score)
    return ColumnMax(idx, score)


def decode(m: SimilarityMatrix | np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> list[Emission]:
    cm = max_ind(m)
    out = []
    last = BLANK
    repetitions = 0
    can_add = False
    for x, (idx, score) in enumerate(zip(cm.index.tolist(), cm.score.tolist())):
        if idx != last:
            repetitions = 0
            can_add = True
        elif repetitions > cfg.rep_thresh and can_add:
            if idx != BLANK:
                box = None
                if isinstance(m, SimilarityMatrix):
                    src = m.source(idx, x)
                    box = src.box if src is not None else None
                out.append(Emission(idx, x, box, score))
            can_add = False
        else:
            repetitions += 1
        last = idx
    return out


def decode_sequence(m, cfg: DecodeConfig = DecodeConfig()) -> list[int]:
    return [e.class_id for e in decode(m, cfg)]


def greedy_ctc_decode(m: SimilarityMatrix | np.ndarray) -> list[int]:
    cm = max_ind(m)
    out = []
    prev = None
    for idx in cm.index.tolist():
        if idx != prev and idx != BLANK:
            out.append(idx)
        prev = idx
    return out


def ctc_runs(m: SimilarityMatrix | np.ndarray) -> list[tuple[int, int, int, float]]:
    """Non-blank argmax runs as (class_id, x0, x1, peak score); their classes are the CTC output."""
    cm = max_ind(m)
    out = []
    start = 0
    idx = cm.index.tolist()
    for x in range(1, len(idx) + 1):
        if x == len(idx) or idx[x] != idx[start]:
            if idx[start] != BLANK:
                out.append((idx[start], start, x, float(cm.score[start:x].max())))
            start = x
    return out
