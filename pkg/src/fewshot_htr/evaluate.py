"""Symbol error rate, IoU-matched labeling accuracy and the threshold sweep."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .core import AnnotatedLine, Dataset, Detection, iou


class UndefinedRateError(ValueError):
    """SER is undefined for an empty ground truth."""


class DatasetMismatchError(ValueError):
    def __init__(self, message, ids=()):
        self.ids = list(ids)
        super().__init__(message)


@dataclass(frozen=True)
class SerBreakdown:
    S: int
    D: int
    I: int
    N: int

    @property
    def edits(self) -> int:
        return self.S + self.D + self.I

    @property
    def ser(self) -> float:
        return self.edits / self.N


def align(pred: Sequence, gt: Sequence) -> tuple[int, int, int]:
    """(S, D, I) of a minimal unit-cost alignment, ties resolved by fewest S then fewest D."""
    n, m = len(gt), len(pred)
    # cell = (total, S, D, I); tuple order gives the tie-break for free
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        g = gt[i - 1]
        for j in range(1, m + 1):
            t, s, d, ins = prev[j - 1]
            if pred[j - 1] == g:
                best = (t, s, d, ins)
            else:
                best = (t + 1, s + 1, d, ins)
            t, s, d, ins = prev[j]
            cand = (t + 1, s, d + 1, ins)
            if cand < best:
                best = cand
            t, s, d, ins = cur[j - 1]
            cand = (t + 1, s, d, ins + 1)
            if cand < best:
                best = cand
            cur.append(best)
        prev = cur
    _, s, d, ins = prev[m]
    return s, d, ins


def ser(pred: Sequence, gt: Sequence) -> SerBreakdown:
    if len(gt) == 0:
        raise UndefinedRateError("symbol error rate needs a non-empty ground truth")
    s, d, i = align(list(pred), list(gt))
    return SerBreakdown(s, d, i, len(gt))


def corpus_ser(pairs: Sequence[tuple[Sequence, Sequence]], macro: bool = False) -> float:
    """Micro average (total edits / total N) unless ``macro``; empty gts are skipped."""
    rows = [ser(p, g) for p, g in pairs if len(g)]
    if not rows:
        raise UndefinedRateError("no ground-truth symbols in corpus")
    if macro:
        return sum(r.ser for r in rows) / len(rows)
    return sum(r.edits for r in rows) / sum(r.N for r in rows)


@dataclass
class MatchResult:
    accuracy: float
    matched: int
    total: int
    n_pred: int
    pairs: list[tuple[int, int | None]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.matched / self.n_pred if self.n_pred else 0.0


def detection_accuracy(pred: Sequence[Detection], gt: AnnotatedLine, iou_thresh: float = 0.7) -> MatchResult:
    """Recall at IoU: ground truth in x0 order, each takes its best unmatched same-class prediction."""
    used = [False] * len(pred)
    pairs = []
    matched = 0
    for gi, g in enumerate(gt.symbols):
        best, best_iou = None, -1.0
        for pi, p in enumerate(pred):
            if used[pi] or p.class_id != g.class_id:
                continue
            v = iou(g.box, p.box)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = pi, v
        if best is not None:
            used[best] = True
            matched += 1
        pairs.append((gi, best))
    total = len(gt.symbols)
    acc = matched / total if total else 1.0
    return MatchResult(acc, matched, total, len(pred), pairs)


def _check_alignment(pseudo: Dataset, gt: Dataset):
    a, b = pseudo.by_image(), gt.by_image()
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise DatasetMismatchError(f"line ids differ between datasets: {missing}", missing)
    return a, b


def labeling_accuracy(pseudo: Dataset, gt: Dataset, iou_thresh: float = 0.7) -> MatchResult:
    a, b = _check_alignment(pseudo, gt)
    matched = total = n_pred = 0
    for key, gline in b.items():
        preds = [s.as_detection() for s in a[key].symbols]
        r = detection_accuracy(preds, gline, iou_thresh)
        matched += r.matched
        total += r.total
        n_pred += r.n_pred
    return MatchResult(matched / total if total else 1.0, matched, total, n_pred)


def eval_report(pred: Dataset, gt: Dataset, macro: bool = False, iou_thresh: float = 0.7) -> dict:
    a, b = _check_alignment(pred, gt)
    per_line = []
    pairs = []
    for key in sorted(b):
        g = b[key].sequence
        p = a[key].sequence
        if not g:
            continue
        r = ser(p, g)
        pairs.append((p, g))
        per_line.append({"id": key, "ser": r.ser, "S": r.S, "D": r.D, "I": r.I, "N": r.N})
    lab = labeling_accuracy(pred, gt, iou_thresh)
    return {
        "per_line": per_line,
        "corpus_ser": corpus_ser(pairs, macro=macro) if pairs else None,
        "averaging": "macro" if macro else "micro",
        "labeling_accuracy": lab.accuracy,
        "labeling_precision": lab.precision,
    }


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    with open(out / "eval_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "ser", "S", "D", "I", "N"])
        for r in report["per_line"]:
            w.writerow([r["id"], f"{r['ser']:.6f}", r["S"], r["D"], r["I"], r["N"]])
        w.writerow(["corpus", "" if report["corpus_ser"] is None else f"{report['corpus_ser']:.6f}",
                    "", "", "", ""])
        w.writerow(["labeling_accuracy", f"{report['labeling_accuracy']:.6f}", "", "", "", ""])


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    ser: float
    labels: int
    iterations: int


def threshold_sweep(corpus, support, thresholds: Sequence[float], test_lines, loop_cfg=None,
                    match_cfg=None, decode_cfg=None, threads: int = 1, synth_cfg=None) -> list[SweepRow]:
    """Run the pseudo-label loop once per ``min_conf`` threshold and score the held-out lines.

    ``corpus`` is a sequence of (line_id, GrayImage) pairs; ``test_lines`` a
    sequence of (GrayImage, ground-truth class sequence) pairs.
    """
    from dataclasses import replace

    from .pipeline import Transcriber
    from .pseudolabel import LoopConfig, run_loop

    loop_cfg = loop_cfg or LoopConfig()
    rows = []
    for th in thresholds:
        cfg = replace(loop_cfg, min_conf=float(th))
        result = run_loop(corpus, support, cfg, match_cfg=match_cfg, decode_cfg=decode_cfg,
                          synth_cfg=synth_cfg, threads=threads)
        tr = Transcriber(result.bank, result.match_cfg, result.decode_cfg, cfg.conf_thresh)
        preds = tr.transcribe_many([img for img, _ in test_lines], threads=threads)
        pairs = [(p.sequence, g) for p, (_, g) in zip(preds, test_lines)]
        rows.append(SweepRow(float(th), corpus_ser(pairs), result.total_labels, result.iterations))
    return rows


def write_sweep(rows: Sequence[SweepRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "ser", "labels", "iterations"])
        for r in rows:
            w.writerow([f"{r.threshold:g}", f"{r.ser:.6f}", r.labels, r.iterations])


def sweep_to_dicts(rows):
    return [asdict(r) for r in rows]
