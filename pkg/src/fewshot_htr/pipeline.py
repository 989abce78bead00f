"""Line transcription: detect, project to a similarity matrix, decode."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

from .core import BBox, GrayImage
from .decoder import DecodeConfig, Emission, decode, greedy_ctc_decode
from .matcher import MatchConfig, TemplateBank, detect_all, normalize_line
from .simmatrix import DEFAULT_CONF_THRESH, SimilarityMatrix, build_matrix

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally on a thread pool; output order never changes."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def to_original(box: BBox, x_scale: float, width: int, height: int) -> BBox:
    """Map a box from the height-normalized line back onto the source image (full height)."""
    x0 = int(math.floor(box.x0 / x_scale + 1e-9))
    x1 = int(math.ceil(box.x1 / x_scale - 1e-9))
    x0 = min(max(x0, 0), width - 1)
    x1 = min(max(x1, x0 + 1), width)
    return BBox(x0, 0, x1, height)


@dataclass
class LineResult:
    emissions: list[Emission]
    ctc: list[int]
    matrix: SimilarityMatrix
    detections: list
    x_scale: float

    @property
    def sequence(self) -> list[int]:
        return [e.class_id for e in self.emissions]


@dataclass
class Transcriber:
    bank: TemplateBank
    match_cfg: MatchConfig = MatchConfig()
    decode_cfg: DecodeConfig = DecodeConfig()
    conf_thresh: float = DEFAULT_CONF_THRESH

    def detect(self, img: GrayImage):
        line, scale = normalize_line(img, self.match_cfg.norm_height)
        return line, scale, detect_all(line, self.bank, self.match_cfg)

    def from_detections(self, dets, width: int, x_scale: float = 1.0) -> LineResult:
        m = build_matrix(dets, width, self.bank.n_classes, self.conf_thresh)
        return LineResult(decode(m, self.decode_cfg), greedy_ctc_decode(m), m, list(dets), x_scale)

    def transcribe(self, img: GrayImage) -> LineResult:
        line, scale, dets = self.detect(img)
        return self.from_detections(dets, line.width, scale)

    def transcribe_many(self, images: Sequence[GrayImage], threads: int = 1) -> list[LineResult]:
        return map_ordered(self.transcribe, list(images), threads)
