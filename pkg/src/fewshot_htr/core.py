"""Shared raster, geometry, alphabet and annotation types.

Boxes are half-open integer pixel rectangles ``[x0, x1) x [y0, y1)``.
Images are 8-bit luminance arrays indexed ``[row, col]``; ink is dark.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

DEFAULT_MAX_SHOTS = 5


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class SchemaError(ValueError):
    """An annotation or detection file does not match its schema."""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: {field}: {message}")


class GrayImage:
    """Immutable 2-D uint8 luminance raster."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ContractError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ContractError("GrayImage must have positive width and height")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating):
                arr = np.rint(arr)
            if arr.min() < 0 or arr.max() > 255:
                raise ContractError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def blank(cls, width: int, height: int, value: int = 255) -> "GrayImage":
        return cls(np.full((height, width), value, dtype=np.uint8))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, order=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ContractError(f"box coordinate {name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.x0 < 0 or self.y0 < 0:
            raise ContractError(f"box {self.as_list()} has negative origin")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ContractError(f"box {self.as_list()} has non-positive area")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def inside(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def shifted(self, dx: int = 0, dy: int = 0) -> "BBox":
        return BBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def crop(img: GrayImage, box: BBox) -> GrayImage:
    if box.x1 > img.width:
        raise ContractError(f"crop box x1={box.x1} exceeds image width {img.width}")
    if box.y1 > img.height:
        raise ContractError(f"crop box y1={box.y1} exceeds image height {img.height}")
    return GrayImage(img.data[box.y0:box.y1, box.x0:box.x1])


def ink_bbox(img: GrayImage | np.ndarray, background: int = 255) -> BBox | None:
    """Tight box around every non-background pixel, or None for a blank image."""
    arr = img.data if isinstance(img, GrayImage) else img
    ink = arr < background
    cols = np.flatnonzero(ink.any(axis=0))
    if cols.size == 0:
        return None
    rows = np.flatnonzero(ink.any(axis=1))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def resize(img: GrayImage, width: int, height: int) -> GrayImage:
    if (width, height) == (img.width, img.height):
        return img
    pil = Image.fromarray(img.data).resize((width, height), Image.BILINEAR)
    return GrayImage(np.asarray(pil))


def resize_to_height(img: GrayImage, height: int) -> GrayImage:
    width = max(1, int(round(img.width * height / img.height)))
    return resize(img, width, height)


class Origin(str, enum.Enum):
    GROUND_TRUTH = "GROUND_TRUTH"
    SYNTHETIC = "SYNTHETIC"
    PSEUDO = "PSEUDO"


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Symbol:
    class_id: int
    box: BBox
    score: float = 1.0
    origin: Origin = Origin.GROUND_TRUTH

    def as_detection(self) -> Detection:
        return Detection(self.class_id, self.box, self.score)


def _symbol_key(s):
    return (s.box.x0, s.class_id)


@dataclass(frozen=True)
class AnnotatedLine:
    image: str
    width: int
    height: int
    symbols: tuple[Symbol, ...] = ()

    def __post_init__(self):
        syms = tuple(sorted(self.symbols, key=_symbol_key))
        for s in syms:
            if not s.box.inside(self.width, self.height):
                raise ContractError(
                    f"symbol box {s.box.as_list()} outside {self.width}x{self.height} line {self.image}")
        object.__setattr__(self, "symbols", syms)

    @property
    def sequence(self) -> list[int]:
        return [s.class_id for s in self.symbols]


@dataclass(frozen=True)
class SymbolClass:
    class_id: int
    name: str
    shots: tuple[GrayImage, ...]


@dataclass(frozen=True)
class SupportSet:
    """N-way k-shot alphabet; class ids are the positions 0..N-1."""

    classes: tuple[SymbolClass, ...]
    max_shots: int = DEFAULT_MAX_SHOTS

    def __post_init__(self):
        if not self.classes:
            raise ContractError("support set needs at least one class")
        for i, c in enumerate(self.classes):
            if c.class_id != i:
                raise ContractError(f"class ids must be 0..N-1 in order; found {c.class_id} at position {i}")
            if not 1 <= len(c.shots) <= self.max_shots:
                raise ContractError(
                    f"class {c.name!r} has {len(c.shots)} shots; expected 1..{self.max_shots}")

    @classmethod
    def from_shots(cls, named_shots: Sequence[tuple[str, Sequence[GrayImage]]],
                   max_shots: int = DEFAULT_MAX_SHOTS) -> "SupportSet":
        return cls(tuple(SymbolClass(i, name, tuple(shots))
                         for i, (name, shots) in enumerate(named_shots)), max_shots)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass
class Dataset:
    """A set of annotated lines plus the alphabet their class ids refer to."""

    alphabet: list[str]
    lines: list[AnnotatedLine] = field(default_factory=list)
    root: Path | None = None

    def image_path(self, line: AnnotatedLine) -> Path:
        p = Path(line.image)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def by_image(self) -> dict[str, AnnotatedLine]:
        return {ln.image: ln for ln in self.lines}

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.alphabet == other.alphabet and self.lines == other.lines


# ---------------------------------------------------------------------------
# persistence

def to_gray(arr: np.ndarray) -> np.ndarray:
    """Collapse colour channels by equal-weight average; drop alpha."""
    if arr.ndim == 2:
        return arr.astype(np.uint8)
    if arr.ndim == 3:
        chans = arr[..., :3] if arr.shape[2] >= 3 else arr[..., :1]
        return np.rint(chans.astype(np.float64).mean(axis=2)).astype(np.uint8)
    raise ContractError(f"unsupported image array shape {arr.shape}")


def load_line_image(path) -> GrayImage:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I", "F"):
                arr = np.asarray(im.convert("F"))
                arr = arr * (255.0 / max(float(arr.max()), 1.0))
            elif im.mode in ("L", "RGB", "RGBA", "LA"):
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return GrayImage(to_gray(arr))


def save_image(img: GrayImage, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.data, mode="L").save(path, format="PNG")


def load_support_set(directory, max_shots: int = DEFAULT_MAX_SHOTS) -> SupportSet:
    """One subdirectory per class, ordered by name; each holds the class's shot PNGs."""
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"support directory {directory} does not exist")
    classes = []
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        shots = [load_line_image(f) for f in sorted(sub.glob("*.png"))]
        if not shots:
            raise ContractError(f"support class directory {sub} holds no PNG shots")
        classes.append((sub.name, shots))
    if not classes:
        raise ContractError(f"support directory {directory} has no class subdirectories")
    return SupportSet.from_shots(classes, max_shots=max_shots)


def save_support_set(support: SupportSet, directory) -> None:
    directory = Path(directory)
    for c in support.classes:
        for j, shot in enumerate(c.shots):
            save_image(shot, directory / c.name / f"shot_{j}.png")


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "alphabet": {"classes": [{"id": i, "name": n} for i, n in enumerate(ds.alphabet)]},
        "lines": [
            {
                "image": ln.image,
                "width": ln.width,
                "height": ln.height,
                "symbols": [
                    {"class": s.class_id, "box": s.box.as_list(), "score": round(float(s.score), 6),
                     "origin": s.origin.value}
                    for s in ln.symbols
                ],
            }
            for ln in ds.lines
        ],
    }


def save_annotations(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dataset_to_dict(ds)
    if ds.root is not None:
        rel = os.path.relpath(Path(ds.root).resolve(), path.parent.resolve())
        if rel != ".":
            # images live elsewhere; record where, relative to this file
            doc["image_root"] = Path(rel).as_posix()
    text = json.dumps(doc, indent=1)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _require(cond, path, where, message):
    if not cond:
        raise SchemaError(path, where, message)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def dataset_from_dict(doc, path="<memory>", root=None) -> Dataset:
    _require(isinstance(doc, dict), path, "$", "top level must be an object")
    alpha = doc.get("alphabet")
    _require(isinstance(alpha, dict) and isinstance(alpha.get("classes"), list), path,
             "alphabet.classes", "missing or not a list")
    names = []
    for i, c in enumerate(alpha["classes"]):
        where = f"alphabet.classes[{i}]"
        _require(isinstance(c, dict), path, where, "must be an object")
        _require(c.get("id") == i and _is_int(c.get("id")), path, f"{where}.id",
                 f"expected {i} (ids must be 0..N-1 in order)")
        _require(isinstance(c.get("name"), str), path, f"{where}.name", "must be a string")
        names.append(c["name"])
    lines_doc = doc.get("lines")
    _require(isinstance(lines_doc, list), path, "lines", "missing or not a list")
    lines = []
    for li, ln in enumerate(lines_doc):
        where = f"lines[{li}]"
        _require(isinstance(ln, dict), path, where, "must be an object")
        _require(isinstance(ln.get("image"), str), path, f"{where}.image", "must be a string")
        for k in ("width", "height"):
            _require(_is_int(ln.get(k)) and ln[k] > 0, path, f"{where}.{k}", "must be a positive integer")
        syms_doc = ln.get("symbols", [])
        _require(isinstance(syms_doc, list), path, f"{where}.symbols", "must be a list")
        syms = []
        for si, s in enumerate(syms_doc):
            sw = f"{where}.symbols[{si}]"
            _require(isinstance(s, dict), path, sw, "must be an object")
            cls = s.get("class")
            _require(_is_int(cls) and 0 <= cls < len(names), path, f"{sw}.class",
                     f"must be a class id in 0..{len(names) - 1}")
            box = s.get("box")
            _require(isinstance(box, list) and len(box) == 4 and all(_is_int(v) for v in box),
                     path, f"{sw}.box", "must be four integers [x0,y0,x1,y1]")
            x0, y0, x1, y1 = box
            _require(0 <= x0 < x1 <= ln["width"] and 0 <= y0 < y1 <= ln["height"], path, f"{sw}.box",
                     f"{box} is empty or outside the {ln['width']}x{ln['height']} line")
            score = s.get("score", 1.0)
            _require(isinstance(score, (int, float)) and not isinstance(score, bool)
                     and 0.0 <= score <= 1.0, path, f"{sw}.score", f"{score!r} not in [0, 1]")
            try:
                origin = Origin(s.get("origin", "GROUND_TRUTH"))
            except ValueError:
                raise SchemaError(path, f"{sw}.origin", f"unknown origin {s.get('origin')!r}") from None
            if origin is Origin.GROUND_TRUTH:
                _require(score == 1.0, path, f"{sw}.score", "GROUND_TRUTH scores are fixed at 1.0")
            syms.append(Symbol(cls, BBox(x0, y0, x1, y1), float(score), origin))
        lines.append(AnnotatedLine(ln["image"], ln["width"], ln["height"], tuple(syms)))
    return Dataset(names, lines, root=root)


def load_annotations(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read annotations {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(path, f"line {exc.lineno}", f"malformed JSON: {exc.msg}") from None
    root = path.parent
    if isinstance(doc, dict) and "image_root" in doc:
        if not isinstance(doc["image_root"], str):
            raise SchemaError(path, "image_root", "must be a string")
        root = root / doc["image_root"]
    return dataset_from_dict(doc, path, root=root)


def sorted_symbols(symbols: Iterable[Symbol]) -> list[Symbol]:
    return sorted(symbols, key=_symbol_key)
