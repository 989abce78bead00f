"""Projection of per-class detections onto pixel columns."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ContractError, Detection

DEFAULT_CONF_THRESH = 0.8


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """``cells[c, x]`` is the best score of a class-``c`` detection covering column ``x``.

    ``provenance[c, x]`` indexes ``detections`` (-1 when the cell is empty).
    """

    cells: np.ndarray
    provenance: np.ndarray
    detections: tuple[Detection, ...] = ()

    @property
    def n_classes(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def source(self, class_id: int, column: int) -> Detection | None:
        k = int(self.provenance[class_id, column])
        return self.detections[k] if k >= 0 else None

    def dump_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "x", "score"])
            for c, x in zip(*np.nonzero(self.cells)):
                w.writerow([int(c), int(x), f"{self.cells[c, x]:.6f}"])


def build_matrix(dets: Sequence[Detection], width: int, n_classes: int,
                 conf_thresh: float = DEFAULT_CONF_THRESH) -> SimilarityMatrix:
    cells = np.zeros((n_classes, width), dtype=np.float64)
    prov = np.full((n_classes, width), -1, dtype=np.int64)
    kept = []
    for d in dets:
        if not 0 <= d.class_id < n_classes:
            raise ContractError(f"detection class {d.class_id} outside 0..{n_classes - 1}")
        if d.box.x1 > width:
            raise ContractError(f"detection box x1={d.box.x1} exceeds matrix width {width}")
        if d.score < conf_thresh:
            continue
        k = len(kept)
        kept.append(d)
        row = cells[d.class_id, d.box.x0:d.box.x1]
        better = d.score > row
        row[better] = d.score
        prov[d.class_id, d.box.x0:d.box.x1][better] = k
    cells.setflags(write=False)
    prov.setflags(write=False)
    return SimilarityMatrix(cells, prov, tuple(kept))
