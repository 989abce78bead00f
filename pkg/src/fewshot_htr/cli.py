"""Command line entry point: ``fewshot-htr <command> ...``.

Commands: alphabet, synth, detect, transcribe, pseudolabel, eval, sweep.
Configuration is resolved once per run (flags over ``--config`` JSON over
built-in defaults) and written to ``manifest.json`` in the output directory.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 data mismatch or
malformed annotations.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .core import (AnnotatedLine, BBox, ContractError, Dataset, Detection, Origin, SchemaError, Symbol,
                   crop, load_annotations, load_line_image, load_support_set,
                   save_annotations, save_support_set)
from .decoder import DecodeConfig, ctc_runs
from .evaluate import (DatasetMismatchError, eval_report, threshold_sweep, write_report,
                       write_sweep)
from .matcher import MatchConfig, TemplateBank, export_detections, extend_bank_many, import_external
from .pipeline import Transcriber, map_ordered, to_original
from .pseudolabel import LoopConfig, StartLine, run_loop
from .simmatrix import DEFAULT_CONF_THRESH
from .synthgen import SynthConfig, config_to_dict, generate_corpus, procedural_alphabet, write_corpus

log = logging.getLogger("fewshot_htr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4

# flags that take a value which may start with "-" (e.g. "--rotation -5:5")
_RANGE_FLAGS = ("--spacing", "--rotation", "--symbols")

SECTIONS = {"synth": SynthConfig, "match": MatchConfig, "decode": DecodeConfig, "loop": LoopConfig}
# loop fields that are not plain settings
_LOOP_SKIP = {"start_labeled", "conf_thresh", "seed"}

# flag dest -> (section, field)
FLAG_MAP = {
    "spacing": ("synth", "spacing_range"),
    "rotation": ("synth", "rotation_range"),
    "symbols": ("synth", "symbols_per_line"),
    "line_height": ("synth", "line_height"),
    "artifacts": ("synth", "artifact_intensity"),
    "norm_height": ("match", "norm_height"),
    "scales": ("match", "scales"),
    "stride": ("match", "stride"),
    "nms_iou": ("match", "nms_iou"),
    "min_score": ("match", "min_score"),
    "rep_thresh": ("decode", "rep_thresh"),
    "conf_thresh": ("matrix", "conf_thresh"),
    "min_conf": ("loop", "min_conf"),
    "batch_frac": ("loop", "batch_fraction"),
    "synth_per_iter": ("loop", "synth_lines_per_iter"),
    "max_iters": ("loop", "max_iters"),
    "dedup_iou": ("loop", "dedup_iou"),
    "max_new_templates": ("loop", "max_new_templates"),
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing

def _range(kind):
    def parse(text: str):
        parts = text.split(":")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse range {text!r}") from None
    return parse


def _floats(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _join_range_values(argv):
    """Rewrite ``--rotation -5:5`` as ``--rotation=-5:5`` so argparse does not read -5:5 as a flag."""
    out = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a in _RANGE_FLAGS and i + 1 < len(argv):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with synth/match/decode/matrix/loop sections")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads for per-line work (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _synth_flags(p):
    g = p.add_argument_group("synthesis")
    g.add_argument("--spacing", type=_range(int), metavar="MIN:MAX", help="gap between glyphs in px")
    g.add_argument("--rotation", type=_range(float), metavar="MIN:MAX", help="rotation in degrees")
    g.add_argument("--symbols", type=_range(int), metavar="MIN:MAX", help="symbols per line")
    g.add_argument("--line-height", type=int)
    g.add_argument("--artifacts", type=float, metavar="INTENSITY")


def _match_flags(p):
    g = p.add_argument_group("matching and decoding")
    g.add_argument("--norm-height", type=int)
    g.add_argument("--scales", type=_floats, metavar="S1,S2,...")
    g.add_argument("--stride", type=int)
    g.add_argument("--nms-iou", type=float)
    g.add_argument("--min-score", type=float)
    g.add_argument("--rep-thresh", type=int)
    g.add_argument("--conf-thresh", type=float, help=f"similarity-matrix threshold (default {DEFAULT_CONF_THRESH})")


def _loop_flags(p):
    g = p.add_argument_group("pseudo-labeling")
    g.add_argument("--min-conf", type=float)
    g.add_argument("--batch-frac", type=float)
    g.add_argument("--synth-per-iter", type=int)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--dedup-iou", type=float)
    g.add_argument("--max-new-templates", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fewshot-htr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("alphabet", help="write a procedural support set for self-tests")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--shots", type=int, default=5)

    p = sub.add_parser("synth", help="generate a labeled synthetic line corpus")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    _synth_flags(p)

    p = sub.add_parser("detect", help="run the matcher and export detections CSV")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--lines", nargs="+", required=True, help="PNG files, directories or annotation JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo-labels", help="annotation JSON whose symbols extend the template bank")
    _match_flags(p)

    p = sub.add_parser("transcribe", help="transcribe line images")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--lines", nargs="+", required=True, help="PNG files, directories or annotation JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--decoder", choices=("runlength", "ctc"), default="runlength")
    p.add_argument("--scores-from", help="detections CSV to use instead of the matcher")
    p.add_argument("--pseudo-labels", help="annotation JSON whose symbols extend the template bank")
    _match_flags(p)

    p = sub.add_parser("pseudolabel", help="progressively pseudo-label an unlabeled corpus")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--corpus", nargs="+", required=True, help="PNG files, directories or annotation JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--start-labeled", help="annotation JSON of real labeled lines (semi-supervised start)")
    p.add_argument("--snapshots", action="store_true", help="write one overlay PNG per iteration")
    _match_flags(p)
    _loop_flags(p)
    _synth_flags(p)

    p = sub.add_parser("eval", help="SER and labeling accuracy of predictions against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--macro", action="store_true", help="average SER per line instead of over symbols")
    p.add_argument("--iou", type=float, default=0.7)

    p = sub.add_parser("sweep", help="pseudo-label at several min-conf thresholds and score a test split")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--test", required=True, help="annotation JSON of held-out labeled lines")
    p.add_argument("--thresholds", type=_floats, required=True, metavar="T1,T2,...")
    p.add_argument("--out", required=True)
    _match_flags(p)
    _loop_flags(p)
    _synth_flags(p)
    return ap


# ---------------------------------------------------------------------------
# configuration

def _defaults() -> dict:
    cfg = {name: {} for name in SECTIONS}
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            if name == "loop" and f.name in _LOOP_SKIP or name == "synth" and f.name == "seed":
                continue
            v = getattr(cls(), f.name)
            cfg[name][f.name] = list(v) if isinstance(v, tuple) else v
    cfg["matrix"] = {"conf_thresh": DEFAULT_CONF_THRESH}
    cfg["seed"] = 0
    cfg["threads"] = 1
    return cfg


def resolve_config(args) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags (in that order)."""
    cfg = _defaults()
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: malformed JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {args.config}: top level must be an object")
        for key, val in doc.items():
            if key in ("seed", "threads"):
                cfg[key] = val
            elif key in cfg and isinstance(val, dict):
                for k, v in val.items():
                    if k not in cfg[key]:
                        raise ConfigError(f"config {args.config}: unknown setting {key}.{k}")
                    cfg[key][k] = v
            else:
                raise ConfigError(f"config {args.config}: unknown section {key!r}")
    for dest, (section, name) in FLAG_MAP.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[section][name] = list(v) if isinstance(v, tuple) else v
    for key in ("seed", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    # build every section once so a bad value fails before any work starts
    for build in (synth_config, match_config, decode_config, loop_config, conf_thresh):
        try:
            build(cfg)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _build(cls, values: dict, **extra):
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def synth_config(cfg) -> SynthConfig:
    return _build(SynthConfig, cfg["synth"], seed=cfg["seed"])


def match_config(cfg) -> MatchConfig:
    return _build(MatchConfig, cfg["match"])


def decode_config(cfg) -> DecodeConfig:
    return _build(DecodeConfig, cfg["decode"])


def loop_config(cfg, start_labeled=None) -> LoopConfig:
    return _build(LoopConfig, cfg["loop"], conf_thresh=cfg["matrix"]["conf_thresh"], seed=cfg["seed"],
                  start_labeled=start_labeled)


def conf_thresh(cfg) -> float:
    v = cfg["matrix"]["conf_thresh"]
    if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
        raise ConfigError("conf_thresh must lie in [0, 1]")
    return float(v)


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict, outputs: list[str]) -> None:
    doc = {"tool": "fewshot-htr", "version": __version__, "command": command, "config": cfg,
           "inputs": inputs, "outputs": sorted(outputs)}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# inputs

def collect_lines(paths) -> list[tuple[str, Path]]:
    """Resolve PNG files, directories of PNGs and annotation JSONs into (line_id, path) pairs."""
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            ann = p / "annotations.json"
            if ann.is_file():
                out.extend(_lines_from_annotations(ann))
            else:
                out.extend((f.relative_to(p).as_posix(), f) for f in sorted(p.rglob("*.png")))
        elif p.suffix.lower() == ".json":
            out.extend(_lines_from_annotations(p))
        elif p.is_file():
            out.append((p.name, p))
        else:
            raise FileNotFoundError(f"input {p} does not exist")
    ids = [i for i, _ in out]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ConfigError(f"duplicate line ids in inputs: {dup}")
    return out


def _lines_from_annotations(path: Path):
    ds = load_annotations(path)
    return [(ln.image, ds.image_path(ln)) for ln in ds.lines]


def _common_root(paths):
    dirs = [Path(p) for p in paths]
    if len(dirs) == 1 and dirs[0].is_dir():
        return dirs[0]
    if len(dirs) == 1 and dirs[0].suffix.lower() == ".json":
        return load_annotations(dirs[0]).root
    return None


def _bank(support, mcfg: MatchConfig, pseudo_path=None) -> TemplateBank:
    bank = TemplateBank.from_support(support, mcfg.norm_height)
    if pseudo_path:
        ds = load_annotations(pseudo_path)
        if ds.alphabet != support.names:
            raise DatasetMismatchError(f"{pseudo_path}: alphabet differs from the support set")
        items = []
        for ln in ds.lines:
            img = load_line_image(ds.image_path(ln))
            items.extend((s.class_id, crop(img, s.box)) for s in ln.symbols)
        bank = extend_bank_many(bank, items)
    return bank


# ---------------------------------------------------------------------------
# commands

def cmd_alphabet(args, cfg):
    out = Path(args.out)
    support = procedural_alphabet(args.classes, args.shots, seed=cfg["seed"],
                                  height=cfg["synth"]["line_height"])
    save_support_set(support, out)
    write_manifest(out, "alphabet", cfg, {"classes": args.classes, "shots": args.shots},
                   [f"{c.name}/" for c in support.classes])
    print(f"wrote {support.n_classes} classes x {args.shots} shots to {out}")


def cmd_synth(args, cfg):
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    scfg = synth_config(cfg)
    support = load_support_set(args.support)
    out = Path(args.out)
    corpus = generate_corpus(support, scfg, args.count)
    write_corpus(corpus, out)
    cfg = dict(cfg, synth=config_to_dict(scfg))
    write_manifest(out, "synth", cfg, {"support": args.support, "count": args.count},
                   ["annotations.json", "synth_manifest.json", "lines/"])
    print(f"wrote {args.count} synthetic lines to {out}")


def _detect_lines(tr: Transcriber, lines, threads):
    def work(item):
        lid, path = item
        img = load_line_image(path)
        norm, scale, dets = tr.detect(img)
        return lid, img, scale, dets
    return map_ordered(work, lines, threads)


def cmd_detect(args, cfg):
    mcfg = match_config(cfg)
    support = load_support_set(args.support)
    tr = Transcriber(_bank(support, mcfg, args.pseudo_labels), mcfg, decode_config(cfg), conf_thresh(cfg))
    lines = collect_lines(args.lines)
    out = Path(args.out)
    by_line = {}
    for lid, img, scale, dets in _detect_lines(tr, lines, cfg["threads"]):
        by_line[lid] = [Detection(d.class_id, to_original(d.box, scale, img.width, img.height), d.score)
                        for d in dets]
    export_detections(by_line, out / "detections.csv")
    write_manifest(out, "detect", cfg, {"support": args.support, "lines": args.lines,
                                        "pseudo_labels": args.pseudo_labels}, ["detections.csv"])
    print(f"wrote {sum(len(v) for v in by_line.values())} detections for {len(by_line)} lines")


def cmd_transcribe(args, cfg):
    mcfg = match_config(cfg)
    dcfg = decode_config(cfg)
    support = load_support_set(args.support)
    names = support.names
    lines = collect_lines(args.lines)
    imported = None
    if args.scores_from:
        imported = import_external(args.scores_from, support.n_classes)
    bank = _bank(support, mcfg, args.pseudo_labels)
    tr = Transcriber(bank, mcfg, dcfg, conf_thresh(cfg))

    def work(item):
        lid, path = item
        img = load_line_image(path)
        if imported is not None:
            dets = imported.get(lid, [])
            bad = [d for d in dets if d.box.x1 > img.width or d.box.y1 > img.height]
            if bad:
                raise DatasetMismatchError(f"imported detections exceed line {lid}", [lid])
            return lid, img, tr.from_detections(dets, img.width, 1.0)
        return lid, img, tr.transcribe(img)

    results = map_ordered(work, lines, cfg["threads"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detail, pred_lines, text_rows = [], [], []
    for lid, img, res in results:
        def orig(box):
            return to_original(box, res.x_scale, img.width, img.height)
        runlength = [{"class": e.class_id, "name": names[e.class_id], "emit_column": e.emit_column,
                 "box": orig(e.provenance_box).as_list() if e.provenance_box else None,
                 "score": round(e.score, 6)} for e in res.emissions]
        # the CTC path has no detection box; its runs give the columns instead
        runs = ctc_runs(res.matrix)
        ctc = [{"class": c, "name": names[c], "box": orig(BBox(x0, 0, x1, 1)).as_list(),
                "score": round(s, 6)} for c, x0, x1, s in runs]
        chosen = runlength if args.decoder == "runlength" else ctc
        text = " ".join(e["name"] for e in chosen)
        text_rows.append(f"{lid}\t{text}")
        detail.append({"id": lid, "decoder": args.decoder, "text": text,
                       "runlength": {"sequence": [e["class"] for e in runlength],
                                "text": " ".join(e["name"] for e in runlength), "emissions": runlength},
                       "ctc": {"sequence": [e["class"] for e in ctc],
                               "text": " ".join(e["name"] for e in ctc), "runs": ctc}})
        syms = []
        for e in chosen:
            if e["box"] is None:
                continue
            syms.append(Symbol(e["class"], BBox(*e["box"]), min(1.0, e["score"]), Origin.PSEUDO))
        pred_lines.append(AnnotatedLine(lid, img.width, img.height, tuple(syms)))
    (out / "transcriptions.txt").write_text("".join(r + "\n" for r in text_rows), encoding="utf-8")
    (out / "transcriptions.json").write_text(json.dumps(detail, indent=1) + "\n", encoding="utf-8")
    save_annotations(Dataset(names, pred_lines, _common_root(args.lines)), out / "predictions.json")
    write_manifest(out, "transcribe", cfg, {"support": args.support, "lines": args.lines,
                                            "decoder": args.decoder, "scores_from": args.scores_from,
                                            "pseudo_labels": args.pseudo_labels},
                   ["transcriptions.txt", "transcriptions.json", "predictions.json"])
    print(f"transcribed {len(results)} lines")


def _start_lines(path, support) -> tuple[StartLine, ...]:
    ds = load_annotations(path)
    if ds.alphabet != support.names:
        raise DatasetMismatchError(f"{path}: alphabet differs from the support set")
    out = []
    for ln in ds.lines:
        out.append(StartLine(ln.image, load_line_image(ds.image_path(ln)), ln.symbols))
    return tuple(out)


def _load_corpus(paths):
    return [(lid, load_line_image(p)) for lid, p in collect_lines(paths)]


def cmd_pseudolabel(args, cfg):
    support = load_support_set(args.support)
    start = _start_lines(args.start_labeled, support) if args.start_labeled else None
    lcfg = loop_config(cfg, start)
    mcfg, dcfg, scfg = match_config(cfg), decode_config(cfg), synth_config(cfg)
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    result = run_loop(corpus, support, lcfg, mcfg, dcfg, scfg, threads=cfg["threads"],
                      snapshot_dir=out / "snapshots" if args.snapshots else None,
                      root=_common_root(args.corpus))
    save_annotations(result.dataset, out / "annotations.json")
    (out / "history.json").write_text(json.dumps(result.history, indent=1) + "\n", encoding="utf-8")
    write_manifest(out, "pseudolabel", cfg, {"support": args.support, "corpus": args.corpus,
                                             "start_labeled": args.start_labeled},
                   ["annotations.json", "history.json"] + (["snapshots/"] if args.snapshots else []))
    print(f"{result.total_labels} labels after {result.iterations} iterations")


def cmd_eval(args, cfg):
    pred = load_annotations(args.pred)
    gt = load_annotations(args.gt)
    if pred.alphabet != gt.alphabet:
        raise DatasetMismatchError("prediction and ground-truth alphabets differ")
    report = eval_report(pred, gt, macro=args.macro, iou_thresh=args.iou)
    out = Path(args.out)
    write_report(report, out)
    write_manifest(out, "eval", cfg, {"pred": args.pred, "gt": args.gt, "macro": args.macro,
                                      "iou": args.iou}, ["eval_report.json", "eval_report.csv"])
    ser = report["corpus_ser"]
    print(f"corpus SER {ser:.4f}" if ser is not None else "corpus SER undefined",
          f"labeling accuracy {report['labeling_accuracy']:.4f}")


def cmd_sweep(args, cfg):
    support = load_support_set(args.support)
    lcfg = loop_config(cfg)
    corpus = _load_corpus(args.corpus)
    test = load_annotations(args.test)
    test_lines = [(load_line_image(test.image_path(ln)), ln.sequence) for ln in test.lines]
    rows = threshold_sweep(corpus, support, args.thresholds, test_lines, lcfg, match_config(cfg),
                           decode_config(cfg), threads=cfg["threads"], synth_cfg=synth_config(cfg))
    out = Path(args.out)
    write_sweep(rows, out / "sweep.csv")
    write_manifest(out, "sweep", cfg, {"support": args.support, "corpus": args.corpus, "test": args.test,
                                       "thresholds": list(args.thresholds)}, ["sweep.csv"])
    for r in rows:
        print(f"min_conf {r.threshold:g}: SER {r.ser:.4f} ({r.labels} labels, {r.iterations} iterations)")


COMMANDS = {"alphabet": cmd_alphabet, "synth": cmd_synth, "detect": cmd_detect,
            "transcribe": cmd_transcribe, "pseudolabel": cmd_pseudolabel, "eval": cmd_eval,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    argv = _join_range_values(list(sys.argv[1:] if argv is None else argv))
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (SchemaError, DatasetMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
