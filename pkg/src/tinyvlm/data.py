"""Datasets: JSON-lines manifests, PPM images and a synthetic scene generator.

The synthetic scenes stand in for real image/caption corpora.  Each scene is
1-4 coloured shapes on a 3x3 grid; ``describe_scene`` renders either a one
clause caption (``short``) or a multi-sentence description covering every
shape attribute and every pairwise spatial relation (``dense``).
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError

MANIFEST_VERSION = 1
SOURCES = ("alignment", "sft", "dense_caption")
STYLES = ("short", "dense")

PALETTE = {
    "red": (230, 25, 25),
    "green": (20, 170, 40),
    "blue": (30, 60, 230),
    "yellow": (250, 220, 20),
    "purple": (140, 40, 180),
    "orange": (250, 130, 10),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
}
COLORS = tuple(PALETTE)
KINDS = ("square", "circle", "triangle")
SIZES = ("small", "large")
GRID = 3
_HALF_EXTENT = {"small": 0.25, "large": 0.45}  # fraction of a cell
_ROWS = ("top", "middle", "bottom")
_COLS = ("left", "center", "right")
_NUMBERS = ("no", "one", "two", "three", "four")
_ORDINALS = ("one", "two", "three", "four")

PROMPTS = (
    "Describe this image in detail.",
    "Write a detailed description of the picture.",
    "What is shown in this image?",
    "Describe the scene.",
    "Give a thorough description of the image.",
    "Provide a caption for this image.",
)


class SpecError(ValueError):
    """A scene specification violates its invariants."""


@dataclass(frozen=True, order=True)
class Shape:
    cell: tuple[int, int]  # (row, col) on the grid
    kind: str
    color: str
    size: str = "large"


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    background: str
    seed: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.shapes) > 4:
            raise SpecError("a scene holds at most 4 shapes")
        if self.background not in PALETTE:
            raise SpecError(f"unknown background colour {self.background!r}")
        cells = [s.cell for s in self.shapes]
        if len(set(cells)) != len(cells):
            raise SpecError("shapes overlap: two shapes share a grid cell")
        for s in self.shapes:
            if s.kind not in KINDS or s.color not in PALETTE or s.size not in SIZES:
                raise SpecError(f"invalid shape {s}")
            if not (0 <= s.cell[0] < GRID and 0 <= s.cell[1] < GRID):
                raise SpecError(f"cell {s.cell} outside the {GRID}x{GRID} grid")
            if s.color == self.background:
                raise SpecError(f"{s.color} shape is invisible on a {self.background} background")

    def to_json(self) -> str:
        shapes = [[s.cell[0], s.cell[1], s.kind, s.color, s.size] for s in self.shapes]
        return json.dumps({"background": self.background, "shapes": shapes}, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(tuple(Shape((r, c), k, col, sz) for r, c, k, col, sz in d["shapes"]), d["background"])


@dataclass(frozen=True)
class InstructionSample:
    image: str
    instruction: str
    response: str
    source: str

    def to_record(self) -> dict:
        return {"image": self.image, "instruction": self.instruction, "response": self.response, "source": self.source}


@dataclass
class DatasetManifest:
    samples: list[InstructionSample]
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def resolve(self, sample: InstructionSample, resolution: int = 32) -> np.ndarray:
        return resolve_image(sample.image, self.root, resolution)


# -- manifests ------------------------------------------------------------

_REQUIRED = ("image", "instruction", "response", "source")


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest; errors carry the 1-based line number."""
    path = Path(path)
    samples = []
    for lineno, raw in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid UTF-8 ({exc.reason})") from None
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        if "manifest_version" in record and not samples:
            if record["manifest_version"] != MANIFEST_VERSION:
                raise FormatError(f"{path}:{lineno}: unsupported manifest version {record['manifest_version']}")
            continue
        for key in _REQUIRED:
            if key not in record:
                raise FormatError(f"{path}:{lineno}: missing field {key!r}")
            if not isinstance(record[key], str):
                raise FormatError(f"{path}:{lineno}: field {key!r} must be a string")
        if not record["response"].strip():
            raise FormatError(f"{path}:{lineno}: empty response")
        if record["source"] not in SOURCES:
            raise FormatError(f"{path}:{lineno}: unknown source {record['source']!r}")
        samples.append(InstructionSample(*(record[k] for k in _REQUIRED)))
    return DatasetManifest(samples, root=path.parent)


def write_manifest(manifest: DatasetManifest | Iterable[InstructionSample], path) -> None:
    samples = manifest.samples if isinstance(manifest, DatasetManifest) else list(manifest)
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


# -- PPM ------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into an ``H x W x 3`` uint8 array."""
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    for _ in range(4):
        m = _PPM_TOKEN.match(blob, pos)
        if not m:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {fields[0][:8]!r})")
    try:
        width, height, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: empty image {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    payload = blob[pos : pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 uint8 image, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def resolve_image(ref: str, root: Path = Path("."), resolution: int = 32) -> np.ndarray:
    """Raw RGB bytes for an image reference: ``scene:<json>`` or a PPM path."""
    if ref.startswith("scene:"):
        return render_scene(SceneSpec.from_json(ref[len("scene:"):]), resolution)
    path = Path(ref)
    return load_ppm(path if path.is_absolute() else Path(root) / path)


# -- scenes ---------------------------------------------------------------


def shape_geometry(shape: Shape, resolution: int) -> tuple[float, float, float]:
    """Centre (x, y) and half extent in pixel units."""
    cell = resolution / GRID
    row, col = shape.cell
    return (col + 0.5) * cell, (row + 0.5) * cell, _HALF_EXTENT[shape.size] * cell


def render_scene(spec: SceneSpec, resolution: int = 32) -> np.ndarray:
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = PALETTE[spec.background]
    ys, xs = np.mgrid[0:resolution, 0:resolution] + 0.5  # pixel centres
    for shape in spec.shapes:
        cx, cy, h = shape_geometry(shape, resolution)
        dx, dy = xs - cx, ys - cy
        if shape.kind == "square":
            inside = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        elif shape.kind == "circle":
            inside = dx * dx + dy * dy <= h * h
        else:  # upward triangle, apex at top
            inside = (np.abs(dy) <= h) & (np.abs(dx) <= (dy + h) / 2)
        img[inside] = PALETTE[shape.color]
    return img


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _position(cell: tuple[int, int]) -> str:
    row, col = cell
    if row == 1 and col == 1:
        return "center"
    if row == 1:
        return _COLS[col]
    if col == 1:
        return _ROWS[row]
    return f"{_ROWS[row]} {_COLS[col]}"


def _relation(a: Shape, b: Shape) -> str:
    parts = []
    if a.cell[0] != b.cell[0]:
        parts.append("above" if a.cell[0] < b.cell[0] else "below")
    if a.cell[1] != b.cell[1]:
        parts.append("left of" if a.cell[1] < b.cell[1] else "right of")
    return " and ".join(parts)


def describe_scene(spec: SceneSpec, style: str = "dense") -> str:
    if style not in STYLES:
        raise ValueError(f"unknown caption style {style!r}")
    shapes = spec.shapes
    if style == "short":
        if not shapes:
            return f"a plain {spec.background} background"
        items = [f"{_article(s.color)} {s.color} {s.kind}" for s in shapes]
        listed = items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]
        return f"{listed} on {_article(spec.background)} {spec.background} background"
    if not shapes:
        return f"a plain {spec.background} background with no shapes."
    noun = "shape" if len(shapes) == 1 else "shapes"
    sentences = [f"{_article(spec.background)} {spec.background} background with {_NUMBERS[len(shapes)]} {noun}."]
    for i, s in enumerate(shapes):
        sentences.append(f"shape {_ORDINALS[i]} is a {s.size} {s.color} {s.kind} in the {_position(s.cell)}.")
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            rel = _relation(shapes[i], shapes[j])
            sentences.append(f"shape {_ORDINALS[i]} is {rel} shape {_ORDINALS[j]}.")
    return " ".join(sentences)


_DENSE_SHAPE = re.compile(r"shape \w+ is a (?:small|large) (\w+) (\w+) in the")


def parse_dense_caption(text: str) -> Counter:
    """Multiset of (kind, colour) pairs named in a dense caption."""
    return Counter((kind, color) for color, kind in _DENSE_SHAPE.findall(text))


def random_scene(rng: np.random.Generator, min_shapes: int = 1, max_shapes: int = 4) -> SceneSpec:
    n = int(rng.integers(min_shapes, max_shapes + 1))
    background = COLORS[int(rng.integers(len(COLORS)))]
    foreground = [c for c in COLORS if c != background]
    cells = sorted(int(c) for c in rng.choice(GRID * GRID, size=n, replace=False))
    shapes = tuple(
        Shape(
            (c // GRID, c % GRID),
            KINDS[int(rng.integers(len(KINDS)))],
            foreground[int(rng.integers(len(foreground)))],
            SIZES[int(rng.integers(len(SIZES)))],
        )
        for c in cells
    )
    return SceneSpec(shapes, background)


def format_single_turn(image_ref: str, caption: str, source_tag: str) -> InstructionSample:
    """Wrap an image/caption pair as one instruction turn and one response turn."""
    if not caption or not caption.strip():
        raise InputError("caption must be non-empty")
    if source_tag not in SOURCES:
        raise InputError(f"unknown source tag {source_tag!r}")
    digest = hashlib.sha256(f"{image_ref}\n{caption}".encode("utf-8")).digest()
    prompt = PROMPTS[int.from_bytes(digest[:8], "big") % len(PROMPTS)]
    return InstructionSample(image_ref, prompt, caption, source_tag)


def synthesize_scenes(seed: int, n: int) -> list[SceneSpec]:
    """``n`` distinct random scenes, deterministic in ``seed``."""
    if n <= 0:
        raise InputError("n must be positive")
    rng = np.random.default_rng(seed)
    seen, specs = set(), []
    while len(specs) < n:
        spec = random_scene(rng)
        if spec in seen:
            continue
        seen.add(spec)
        specs.append(spec)
    return specs


def synthesize_dataset(
    seed: int,
    n: int,
    style: str = "dense",
    out_dir=None,
    resolution: int = 32,
    source: str | None = None,
) -> DatasetManifest:
    """Synthetic (image, caption) pairs in single-turn format.

    With ``out_dir`` the images are written as PPM files next to a
    ``manifest.jsonl``; otherwise images are inline ``scene:`` references.
    """
    source = source or ("dense_caption" if style == "dense" else "alignment")
    specs = synthesize_scenes(seed, n)
    root = Path(out_dir) if out_dir is not None else Path(".")
    if out_dir is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, spec in enumerate(specs):
        if out_dir is not None:
            ref = f"images/{i:05d}.ppm"
            write_ppm(root / ref, render_scene(spec, resolution))
        else:
            ref = "scene:" + spec.to_json()
        samples.append(format_single_turn(ref, describe_scene(spec, style), source))
    manifest = DatasetManifest(samples, root=root)
    if out_dir is not None:
        write_manifest(manifest, root / "manifest.jsonl")
    return manifest


def corpus_words() -> list[str]:
    """Every word the synthetic captions and prompt pool can produce."""
    from .language import split_words

    words = set()
    for text in PROMPTS:
        words.update(split_words(text))
    for fixed in ("a an plain background with no shapes on and", *_NUMBERS, *_ORDINALS, *COLORS, *KINDS, *SIZES,
                  "shape shapes is in the above below left right of top middle bottom center . ,"):
        words.update(fixed.split())
    return sorted(words)


def preprocess_manifest(manifest: DatasetManifest, image_size: int, indices: Sequence[int] | None = None):
    """Preprocessed image array ``[n, S, S, 3]`` for the given samples."""
    from .vision import preprocess_image

    idx = range(len(manifest)) if indices is None else indices
    return np.stack([preprocess_image(manifest.resolve(manifest[i], image_size), image_size) for i in idx])
