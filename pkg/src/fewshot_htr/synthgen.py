"""Synthetic text lines built by concatenating support shots.

Every line draws its randomness from ``np.random.default_rng([seed, index])``
so lines can be produced in any order (or in parallel) with identical bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .core import (AnnotatedLine, BBox, ContractError, Dataset, GrayImage, Origin,
                   SupportSet, Symbol, ink_bbox, resize_to_height, save_annotations,
                   save_image)

THICKNESS_OPS = ("none", "thicken", "thin")


@dataclass(frozen=True)
class SynthConfig:
    spacing_range: tuple[int, int] = (0, 30)
    rotation_range: tuple[float, float] = (-5.0, 5.0)
    symbols_per_line: tuple[int, int] = (8, 20)
    line_height: int = 64
    artifact_intensity: float = 0.15
    thickness: bool = True
    seed: int = 0

    def __post_init__(self):
        smin, smax = self.spacing_range
        if smin > smax:
            raise ContractError(f"spacing_range {self.spacing_range} has min > max")
        if smin < -10:
            raise ContractError("spacing_range min must be >= -10")
        rmin, rmax = self.rotation_range
        if rmin > rmax:
            raise ContractError(f"rotation_range {self.rotation_range} has min > max")
        nmin, nmax = self.symbols_per_line
        if nmin < 1 or nmin > nmax:
            raise ContractError(f"symbols_per_line {self.symbols_per_line} must satisfy 1 <= min <= max")
        if self.line_height < 4:
            raise ContractError("line_height must be at least 4 pixels")
        if not 0.0 <= self.artifact_intensity <= 1.0:
            raise ContractError("artifact_intensity must lie in [0, 1]")


@dataclass
class SynthLine:
    image: GrayImage
    annotation: AnnotatedLine
    placements: list[dict] = field(default_factory=list)
    fragments: int = 0


def line_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), int(index)])


def _trim(arr: np.ndarray) -> np.ndarray | None:
    box = ink_bbox(arr)
    if box is None:
        return None
    return arr[box.y0:box.y1, box.x0:box.x1]


def _thickness(arr: np.ndarray, op: str) -> np.ndarray:
    if op == "none":
        return arr
    padded = np.pad(arr, 1, constant_values=255)
    if op == "thicken":
        out = ndimage.minimum_filter(padded, size=3, mode="nearest")
    else:
        out = ndimage.maximum_filter(padded, size=3, mode="nearest")
    # strokes thinner than 3 px vanish under erosion; keep the original then
    return out if (out < 255).any() else padded


def render_glyph(shot: GrayImage, rotation: float, height: int, thickness: str = "none") -> np.ndarray:
    """Thickness change, bilinear rotation, then scaling to ``height`` (aspect kept).

    The result is trimmed so that its frame is exactly the ink bounding box.
    """
    arr = _trim(shot.data)
    if arr is None:
        raise ContractError("shot contains no ink")
    arr = _thickness(arr, thickness)
    if rotation:
        pil = Image.fromarray(np.ascontiguousarray(arr), mode="L")
        arr = np.asarray(pil.rotate(rotation, resample=Image.BILINEAR, expand=True, fillcolor=255))
    arr = _trim(arr)
    scaled = resize_to_height(GrayImage(arr), height).data
    out = _trim(scaled)
    if out is None:
        raise ContractError("glyph vanished during rendering")
    return out


def generate_line(support: SupportSet, cfg: SynthConfig, rng: np.random.Generator,
                  image_name: str = "line.png") -> SynthLine:
    H = cfg.line_height
    n = int(rng.integers(cfg.symbols_per_line[0], cfg.symbols_per_line[1] + 1))
    glyphs = []
    x = 0
    prev_x1 = None
    for _ in range(n):
        cls = int(rng.integers(support.n_classes))
        shots = support.classes[cls].shots
        shot_idx = int(rng.integers(len(shots)))
        rotation = float(rng.uniform(cfg.rotation_range[0], cfg.rotation_range[1]))
        thick = THICKNESS_OPS[int(rng.integers(3))] if cfg.thickness else "none"
        spacing = int(rng.integers(cfg.spacing_range[0], cfg.spacing_range[1] + 1))
        glyph = render_glyph(shots[shot_idx], rotation, H, thick)
        if prev_x1 is None:
            spacing = 0
            x = 0
        else:
            x = max(0, prev_x1 + spacing)
        y = (H - glyph.shape[0]) // 2
        glyphs.append((cls, x, y, glyph, {"class": cls, "shot": shot_idx, "rotation": rotation,
                                          "spacing_before": spacing, "thickness": thick}))
        prev_x1 = x + glyph.shape[1]

    width = max(g[1] + g[3].shape[1] for g in glyphs)
    canvas = np.full((H, width), 255, dtype=np.uint8)
    symbols = []
    placements = []
    for cls, gx, gy, glyph, info in glyphs:
        gh, gw = glyph.shape
        region = canvas[gy:gy + gh, gx:gx + gw]
        np.minimum(region, glyph, out=region)
        box = BBox(gx, gy, gx + gw, gy + gh)
        symbols.append(Symbol(cls, box, 1.0, Origin.SYNTHETIC))
        placements.append(dict(info, box=box.as_list()))
    ann = AnnotatedLine(image_name, width, H, tuple(symbols))
    return SynthLine(GrayImage(canvas), ann, placements)


def core_band_mask(boxes, width: int, height: int) -> np.ndarray:
    """Mask of the middle 60% (vertically) of every box."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        top = b.y0 + int(math.floor(0.2 * b.height))
        bottom = b.y1 - int(math.floor(0.2 * b.height))
        mask[top:bottom, b.x0:b.x1] = True
    return mask


def apply_artifacts(line: GrayImage, support: SupportSet, boxes, intensity: float,
                    rng: np.random.Generator) -> tuple[GrayImage, int]:
    """Stamp glyph fragments into the top and bottom 20% bands of the line.

    Returns the new image and the number of fragments stamped. Pixels inside
    the middle band of any box in ``boxes`` are never modified.
    """
    if not 0.0 <= intensity <= 1.0:
        raise ContractError("artifact intensity must lie in [0, 1]")
    if intensity == 0.0:
        return line, 0
    H, W = line.height, line.width
    count = int(rng.poisson(intensity * W / H))
    if count == 0:
        return line, 0
    canvas = line.data.copy()
    protected = core_band_mask(boxes, W, H)
    band = max(1, int(round(0.2 * H)))
    for _ in range(count):
        cls = int(rng.integers(support.n_classes))
        shots = support.classes[cls].shots
        shot = shots[int(rng.integers(len(shots)))]
        glyph = render_glyph(shot, 0.0, H)
        gh, gw = glyph.shape
        fh = int(rng.integers(max(1, band // 2), band + 1))
        fw = int(rng.integers(max(1, gw // 3), gw + 1))
        fx = int(rng.integers(0, gw - fw + 1))
        top_band = bool(rng.integers(2))
        if top_band:
            # tail of a descender hanging from the line above
            frag = glyph[gh - fh:, fx:fx + fw]
            y = 0
        else:
            frag = glyph[:fh, fx:fx + fw]
            y = H - fh
        x = int(rng.integers(-fw + 1, W))
        x0, x1 = max(0, x), min(W, x + fw)
        if x1 <= x0:
            continue
        frag = frag[:, x0 - x:x1 - x]
        region = canvas[y:y + fh, x0:x1]
        keep = protected[y:y + fh, x0:x1]
        np.copyto(region, np.minimum(region, frag), where=~keep)
    return GrayImage(canvas), count


def generate_synthetic(support: SupportSet, cfg: SynthConfig, index: int,
                       image_name: str | None = None) -> SynthLine:
    """Line ``index`` of the corpus defined by ``cfg.seed``: layout plus artifacts."""
    rng = line_rng(cfg.seed, index)
    name = image_name or f"lines/{index:04d}.png"
    line = generate_line(support, cfg, rng, name)
    boxes = [s.box for s in line.annotation.symbols]
    img, frags = apply_artifacts(line.image, support, boxes, cfg.artifact_intensity, rng)
    line.image = img
    line.fragments = frags
    return line


@dataclass
class SynthCorpus:
    dataset: Dataset
    images: dict[str, GrayImage]
    manifest: dict


def generate_corpus(support: SupportSet, cfg: SynthConfig, count: int, out_dir=None) -> SynthCorpus:
    if count < 0:
        raise ContractError("count must be non-negative")
    lines, images, records = [], {}, []
    for i in range(count):
        sl = generate_synthetic(support, cfg, i)
        lines.append(sl.annotation)
        images[sl.annotation.image] = sl.image
        gaps = [b.box.x0 - a.box.x1 for a, b in zip(sl.annotation.symbols, sl.annotation.symbols[1:])]
        records.append({"image": sl.annotation.image, "symbols": sl.placements,
                        "fragments": sl.fragments, "gaps": gaps})
    ds = Dataset(support.names, lines)
    manifest = {"config": config_to_dict(cfg), "count": count, "lines": records}
    if out_dir is not None:
        write_corpus(SynthCorpus(ds, images, manifest), out_dir)
    return SynthCorpus(ds, images, manifest)


def config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    for k in ("spacing_range", "rotation_range", "symbols_per_line"):
        d[k] = list(d[k])
    return d


def write_corpus(corpus: SynthCorpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in corpus.images.items():
        save_image(img, out / name)
    corpus.dataset.root = out
    save_annotations(corpus.dataset, out / "annotations.json")
    (out / "synth_manifest.json").write_text(json.dumps(corpus.manifest, indent=1) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# procedural alphabet for self-tests

_GRID_X = (0.12, 0.5, 0.88)
_GRID_Y = (0.08, 0.36, 0.64, 0.92)


def _draw_glyph(strokes, width, height, stroke_width, jitter, rng) -> GrayImage:
    img = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(img)

    def pt(p):
        gx, gy = p
        x = _GRID_X[gx] * (width - 1) + (rng.uniform(-jitter, jitter) if jitter else 0.0)
        y = _GRID_Y[gy] * (height - 1) + (rng.uniform(-jitter, jitter) if jitter else 0.0)
        return (x, y)

    for kind, a, b in strokes:
        pa, pb = pt(a), pt(b)
        if kind == "line":
            draw.line([pa, pb], fill=0, width=stroke_width)
        else:
            x0, x1 = sorted((pa[0], pb[0]))
            y0, y1 = sorted((pa[1], pb[1]))
            draw.ellipse([x0, y0, max(x1, x0 + 6), max(y1, y0 + 6)], outline=0, width=stroke_width)
    return GrayImage(np.asarray(img))


def _random_strokes(rng):
    strokes = []
    for _ in range(int(rng.integers(3, 5))):
        kind = "ellipse" if rng.random() < 0.25 else "line"
        while True:
            a = (int(rng.integers(3)), int(rng.integers(4)))
            b = (int(rng.integers(3)), int(rng.integers(4)))
            if a != b and (kind == "line" or (a[0] != b[0] and a[1] != b[1])):
                break
        strokes.append((kind, a, b))
    # one tall stroke keeps every glyph spanning the full height
    col = int(rng.integers(3))
    strokes.append(("line", (col, 0), (int(rng.integers(3)), 3)))
    return strokes


def _proto_ncc(a: GrayImage, b: GrayImage) -> float:
    from .matcher import ncc
    size = (40, 64)
    ra = np.asarray(Image.fromarray(a.data).resize(size, Image.BILINEAR))
    rb = np.asarray(Image.fromarray(b.data).resize(size, Image.BILINEAR))
    return ncc(GrayImage(ra), GrayImage(rb))


def _well_formed(img: GrayImage) -> bool:
    """One connected stroke blob whose ink reaches every column of its frame."""
    ink = img.data < 128
    box = ink_bbox(img.data, background=128)
    if box is None or box.height < 0.9 * img.height:
        return False
    _, n = ndimage.label(ink, structure=np.ones((3, 3)))
    return n == 1 and bool(ink[:, box.x0:box.x1].any(axis=0).all())


def procedural_alphabet(n_classes: int = 12, shots: int = 5, seed: int = 0,
                        height: int = 64, max_similarity: float = 0.5) -> SupportSet:
    """Distinct connected stroke glyphs, ``shots`` jittered renderings per class."""
    rng = np.random.default_rng([int(seed), 0xA1FA])
    protos = []
    classes = []
    attempts = 0
    while len(classes) < n_classes:
        attempts += 1
        if attempts > 500 * n_classes:
            raise RuntimeError("could not draw enough mutually distinct glyphs")
        strokes = _random_strokes(rng)
        width = int(rng.integers(32, 52))
        proto = _draw_glyph(strokes, width, height, 6, 0.0, rng)
        if not _well_formed(proto):
            continue
        if any(_proto_ncc(proto, p) > max_similarity for p in protos):
            continue
        renders = [_draw_glyph(strokes, width, height, int(rng.integers(5, 8)), 2.0, rng)
                   for _ in range(shots)]
        if not all(_well_formed(r) for r in renders):
            continue
        protos.append(proto)
        classes.append((f"g{len(classes):02d}", renders))
    return SupportSet.from_shots(classes, max_shots=max(shots, 1))
