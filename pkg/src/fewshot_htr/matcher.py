"""Template-bank symbol detector.

Each class is scored by zero-mean normalized cross-correlation between
full-height windows of the line and the class templates, maximised over
templates and horizontal scales. A window correlation ``s`` in [-1, 1]
becomes a confidence ``(s + 1) / 2``.

The correlation numerators are integers (uint8 pixels), so the FFT result is
rounded back to exact integers; every score is therefore bit-reproducible and
independent of where in the line a window sits.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (BBox, ContractError, Detection, GrayImage, SchemaError, SupportSet,
                   ink_bbox, resize, resize_to_height)

SHOT = "SHOT"
PSEUDO = "PSEUDO"

CSV_HEADER = ["line_id", "class_id", "x0", "y0", "x1", "y1", "score"]


class DegenerateTemplateWarning(UserWarning):
    """A crop was rejected from the bank because it has no contrast."""


@dataclass(frozen=True)
class MatchConfig:
    norm_height: int = 64
    scales: tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.25)
    stride: int = 2
    nms_iou: float = 0.3
    min_score: float = 0.0
    # crops cut from the corpus already carry its scale
    pseudo_scales: tuple[float, ...] | None = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.pseudo_scales is not None:
            object.__setattr__(self, "pseudo_scales", tuple(float(s) for s in self.pseudo_scales))
            if not self.pseudo_scales or any(s <= 0 for s in self.pseudo_scales):
                raise ContractError("pseudo_scales must be positive when given")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ContractError("scales must be a non-empty list of positive numbers")
        if self.stride < 1:
            raise ContractError("stride must be >= 1")
        if self.norm_height < 2:
            raise ContractError("norm_height must be >= 2")


def ncc(window: GrayImage, template: GrayImage) -> float:
    """Zero-mean normalized cross-correlation of two equally sized images."""
    if (window.width, window.height) != (template.width, template.height):
        raise ContractError(
            f"ncc needs equal sizes, got {window.width}x{window.height} and {template.width}x{template.height}")
    w = window.data.astype(np.float64)
    t = template.data.astype(np.float64)
    w = w - w.mean()
    t = t - t.mean()
    den = math.sqrt(float((w * w).sum()) * float((t * t).sum()))
    if den == 0.0:
        return 0.0
    return float(np.clip((w * t).sum() / den, -1.0, 1.0))


def to_confidence(s):
    return np.clip((np.asarray(s, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def normalize_glyph(img: GrayImage, height: int) -> GrayImage | None:
    """Trim white margins and rescale to ``height``; None if nothing usable remains."""
    box = ink_bbox(img)
    if box is None:
        return None
    arr = img.data[box.y0:box.y1, box.x0:box.x1]
    out = resize_to_height(GrayImage(arr), height)
    if int(out.data.max()) == int(out.data.min()):
        return None
    return out


@dataclass(frozen=True)
class Template:
    image: GrayImage
    source: str = SHOT


@dataclass(frozen=True, eq=False)
class TemplateBank:
    norm_height: int
    templates: tuple[tuple[Template, ...], ...]
    _variants: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for cid, temps in enumerate(self.templates):
            if not any(t.source == SHOT for t in temps):
                raise ContractError(f"class {cid} has no SHOT template")
            for t in temps:
                if t.image.height != self.norm_height:
                    raise ContractError(
                        f"class {cid} template height {t.image.height} != norm_height {self.norm_height}")

    @classmethod
    def from_support(cls, support: SupportSet, norm_height: int = 64) -> "TemplateBank":
        per_class = []
        for c in support.classes:
            temps = []
            for shot in c.shots:
                t = normalize_glyph(shot, norm_height)
                if t is None:
                    raise ContractError(f"shot of class {c.name!r} has no contrast")
                temps.append(Template(t, SHOT))
            per_class.append(tuple(temps))
        return cls(norm_height, tuple(per_class))

    @property
    def n_classes(self) -> int:
        return len(self.templates)

    def count(self, class_id: int | None = None) -> int:
        if class_id is None:
            return sum(len(t) for t in self.templates)
        return len(self.templates[class_id])

    def variants(self, class_id: int, scales: tuple[float, ...],
                 pseudo_scales: tuple[float, ...] | None = None) -> list[np.ndarray]:
        """Templates of one class stretched horizontally by every scale (cached).

        PSEUDO templates use ``pseudo_scales`` when given.
        """
        key = (class_id, scales, pseudo_scales)
        cached = self._variants.get(key)
        if cached is not None:
            return cached
        out = []
        seen = set()
        for t in self.templates[class_id]:
            use = pseudo_scales if (t.source == PSEUDO and pseudo_scales is not None) else scales
            for s in use:
                w = max(1, int(round(s * t.image.width)))
                arr = resize(t.image, w, self.norm_height).data
                if int(arr.max()) == int(arr.min()):
                    continue
                sig = (arr.shape, arr.tobytes())
                if sig in seen:
                    continue
                seen.add(sig)
                out.append(arr)
        self._variants[key] = out
        return out


def extend_bank(bank: TemplateBank, class_id: int, crop_img: GrayImage) -> TemplateBank:
    """New bank with ``crop_img`` appended to ``class_id`` as a PSEUDO template.

    A crop without contrast is rejected with a DegenerateTemplateWarning and the
    original bank is returned.
    """
    if not 0 <= class_id < bank.n_classes:
        raise ContractError(f"unknown class id {class_id}")
    t = normalize_glyph(crop_img, bank.norm_height)
    if t is None:
        warnings.warn(f"rejected degenerate crop for class {class_id}", DegenerateTemplateWarning,
                      stacklevel=2)
        return bank
    return extend_bank_many(bank, [(class_id, t)], normalized=True)


def extend_bank_many(bank: TemplateBank, items: Iterable[tuple[int, GrayImage]],
                     normalized: bool = False) -> TemplateBank:
    """Append several crops at once; degenerate crops are skipped silently."""
    per_class = [list(t) for t in bank.templates]
    for cid, img in items:
        t = img if normalized else normalize_glyph(img, bank.norm_height)
        if t is None:
            continue
        per_class[cid].append(Template(t, PSEUDO))
    return TemplateBank(bank.norm_height, tuple(tuple(t) for t in per_class))


def _window_sums(line: np.ndarray, tw: int):
    col = line.sum(axis=0, dtype=np.int64)
    col2 = (line.astype(np.int64) ** 2).sum(axis=0)
    c1 = np.concatenate(([0], np.cumsum(col)))
    c2 = np.concatenate(([0], np.cumsum(col2)))
    return c1[tw:] - c1[:-tw], c2[tw:] - c2[:-tw]


def _scan(line: np.ndarray, temps_by_class: dict[int, Sequence[np.ndarray]], stride: int):
    """Max-over-templates candidates for several classes on one line.

    Returns ``{class_id: (x0, x1, confidence)}`` with one entry per distinct
    window. Window matrices are built once per template width and shared by all
    classes; the float64 products of uint8 data are exact integers.
    """
    H, W = line.shape
    by_width: dict[int, dict[int, list[np.ndarray]]] = {}
    for cid, temps in temps_by_class.items():
        for t in temps:
            if t.shape[1] <= W:
                by_width.setdefault(t.shape[1], {}).setdefault(cid, []).append(t)
    parts: dict[int, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {cid: [] for cid in temps_by_class}
    lf = line.astype(np.float64)
    for tw in sorted(by_width):
        sw, sww = _window_sums(line, tw)
        xs = np.arange(0, W - tw + 1, stride)
        sw, sww = sw[xs], sww[xs]
        n = H * tw
        vw = n * sww - sw * sw
        valid = vw > 0
        if not valid.any():
            continue
        xs, sw, vw = xs[valid], sw[valid], vw[valid]
        windows = np.lib.stride_tricks.sliding_window_view(lf, tw, axis=1)[:, xs, :]
        windows = np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(len(xs), n)
        root_vw = np.sqrt(vw.astype(np.float64))
        for cid, group in sorted(by_width[tw].items()):
            tstack = np.stack(group).reshape(len(group), n)
            swt = np.rint(windows @ tstack.astype(np.float64).T).astype(np.int64)
            ti = tstack.astype(np.int64)
            st = ti.sum(axis=1)
            vt = n * (ti * ti).sum(axis=1) - st * st
            num = n * swt - sw[:, None] * st[None, :]
            s = num / (root_vw[:, None] * np.sqrt(vt.astype(np.float64))[None, :])
            best = to_confidence(s.max(axis=1))
            parts[cid].append((xs, xs + tw, best))
    out = {}
    for cid, items in parts.items():
        if not items:
            empty = np.zeros(0, dtype=np.int64)
            out[cid] = (empty, empty, np.zeros(0))
            continue
        x0 = np.concatenate([p[0] for p in items])
        x1 = np.concatenate([p[1] for p in items])
        sc = np.concatenate([p[2] for p in items])
        order = np.lexsort((x1, x0))
        out[cid] = (x0[order], x1[order], sc[order])
    return out


def _check_inputs(line: GrayImage, bank: TemplateBank, cfg: MatchConfig):
    if line.height != cfg.norm_height:
        raise ContractError(f"line height {line.height} != norm_height {cfg.norm_height}; normalize first")
    if bank.norm_height != cfg.norm_height:
        raise ContractError("bank and config disagree on norm_height")


def _candidate_arrays(line: GrayImage, class_id: int, bank: TemplateBank, cfg: MatchConfig):
    """Pre-NMS candidates of one class as ``(x0, x1, confidence)`` arrays."""
    _check_inputs(line, bank, cfg)
    if not 0 <= class_id < bank.n_classes:
        raise ContractError(f"class {class_id} not in bank")
    temps = bank.variants(class_id, cfg.scales, cfg.pseudo_scales)
    return _scan(line.data, {class_id: temps}, cfg.stride)[class_id]


def candidate_scores(line: GrayImage, class_id: int, bank: TemplateBank,
                     cfg: MatchConfig) -> dict[tuple[int, int], float]:
    """Pre-NMS candidates of one class: ``{(x0, x1): confidence}``, max over templates.

    Windows with zero variance are not candidates.
    """
    x0, x1, sc = _candidate_arrays(line, class_id, bank, cfg)
    return {(a, b): c for a, b, c in zip(x0.tolist(), x1.tolist(), sc.tolist())}


def nms_indices(boxes: np.ndarray, scores: np.ndarray, class_ids: np.ndarray, iou_thresh: float) -> list[int]:
    """Indices kept by greedy NMS; order is best score first (ties: x0, class id, x1, y0, y1)."""
    if len(scores) == 0:
        return []
    boxes = np.asarray(boxes, dtype=np.int64)
    order = np.lexsort((boxes[:, 3], boxes[:, 1], boxes[:, 2], class_ids, boxes[:, 0], -scores))
    b = boxes[order]
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    idx = np.arange(len(order))
    keep = []
    while idx.size:
        i = idx[0]
        keep.append(int(order[i]))
        rest = idx[1:]
        iw = np.minimum(b[rest, 2], b[i, 2]) - np.maximum(b[rest, 0], b[i, 0])
        ih = np.minimum(b[rest, 3], b[i, 3]) - np.maximum(b[rest, 1], b[i, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ious = inter / (areas[rest] + areas[i] - inter)
        idx = rest[ious < iou_thresh]
    return keep


def nms(cands: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy NMS: best score first (ties: smaller x0, then smaller class id)."""
    if not cands:
        return []
    boxes = np.array([d.box.as_list() for d in cands], dtype=np.int64)
    scores = np.array([d.score for d in cands], dtype=np.float64)
    cids = np.array([d.class_id for d in cands], dtype=np.int64)
    return [cands[i] for i in nms_indices(boxes, scores, cids, iou_thresh)]


def _nms_class(class_id, arrays, H, cfg) -> list[Detection]:
    x0, x1, sc = arrays
    ok = sc >= cfg.min_score
    x0, x1, sc = x0[ok], x1[ok], sc[ok]
    boxes = np.stack([x0, np.zeros_like(x0), x1, np.full_like(x0, H)], axis=1)
    keep = nms_indices(boxes, sc, np.full(len(sc), class_id), cfg.nms_iou)
    return [Detection(class_id, BBox(int(x0[i]), 0, int(x1[i]), H), float(sc[i])) for i in keep]


def score_class(line: GrayImage, class_id: int, bank: TemplateBank, cfg: MatchConfig) -> list[Detection]:
    return _nms_class(class_id, _candidate_arrays(line, class_id, bank, cfg), line.height, cfg)


def detect_all(line: GrayImage, bank: TemplateBank | SupportSet, cfg: MatchConfig) -> list[Detection]:
    """Union of per-class detections, ordered by class id then x0. No cross-class NMS."""
    if isinstance(bank, SupportSet):
        bank = TemplateBank.from_support(bank, cfg.norm_height)
    _check_inputs(line, bank, cfg)
    temps = {cid: bank.variants(cid, cfg.scales, cfg.pseudo_scales) for cid in range(bank.n_classes)}
    scanned = _scan(line.data, temps, cfg.stride)
    out = []
    for cid in range(bank.n_classes):
        dets = _nms_class(cid, scanned[cid], line.height, cfg)
        out.extend(sorted(dets, key=lambda d: (d.box.x0, d.box.x1)))
    return out


def normalize_line(img: GrayImage, norm_height: int) -> tuple[GrayImage, float]:
    """Rescale a line to ``norm_height``; returns the image and the x scale factor applied."""
    if img.height == norm_height:
        return img, 1.0
    out = resize_to_height(img, norm_height)
    return out, out.width / img.width


# ---------------------------------------------------------------------------
# detections CSV

def _fmt_score(score: float) -> str:
    return np.format_float_positional(float(score), unique=True, trim="k", min_digits=6)


def export_detections(dets_by_line: dict[str, Sequence[Detection]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for line_id in sorted(dets_by_line):
            for d in dets_by_line[line_id]:
                w.writerow([line_id, d.class_id, *d.box.as_list(), _fmt_score(d.score)])


def import_external(path, n_classes: int | None = None) -> dict[str, list[Detection]]:
    """Parse a detections CSV into ``{line_id: [Detection, ...]}`` (file order kept)."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read detections {path}: {exc}") from exc
    out: dict[str, list[Detection]] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise SchemaError(path, "row 1", f"header must be {','.join(CSV_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise SchemaError(path, f"row {rowno}", f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            line_id = row[0]
            try:
                cid = int(row[1])
                x0, y0, x1, y1 = (int(v) for v in row[2:6])
                score = float(row[6])
            except ValueError as exc:
                raise SchemaError(path, f"row {rowno}", f"unparsable value ({exc})") from None
            if n_classes is not None and not 0 <= cid < n_classes:
                raise SchemaError(path, f"row {rowno}", f"unknown class id {cid}")
            if cid < 0:
                raise SchemaError(path, f"row {rowno}", f"unknown class id {cid}")
            if not (0.0 <= score <= 1.0):
                raise SchemaError(path, f"row {rowno}", f"score {score} not in [0, 1]")
            try:
                box = BBox(x0, y0, x1, y1)
            except ContractError as exc:
                raise SchemaError(path, f"row {rowno}", str(exc)) from None
            out.setdefault(line_id, []).append(Detection(cid, box, score))
    return out
