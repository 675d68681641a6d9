"""Grid quantization, box<->text templating, and the closed prompt vocabulary."""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"

SPECIAL_TOKENS = (BOS, EOS, PAD)
PUNCT_TOKENS = ("[", "]", ",")
PROMPT_WORDS = (
    "in", "the", "image", "is", "a", "located", "at",
    "photo", "of", "and", "on", "left", "right", "top", "bottom",
)

_BOX_RE = re.compile(r"^\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]$")


class CodecError(ValueError):
    pass


class BoxParseError(CodecError):
    """Structured parse failure; evaluation scores it as IoU 0."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, min-corner inclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    quantized: bool = False

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise CodecError(f"degenerate box {self.as_tuple()}")
        if self.x_min < 0 or self.y_min < 0:
            raise CodecError(f"negative coordinates {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class GridSpec:
    """Quantization grid: grid_n cells per axis over a square image."""

    image_side: int
    grid_n: int

    def __post_init__(self):
        if self.image_side % self.grid_n != 0:
            raise CodecError(
                f"image_side {self.image_side} not divisible by grid_n {self.grid_n}")

    @property
    def cell(self) -> int:
        return self.image_side // self.grid_n

    def values(self) -> list[int]:
        """All representable coordinate values: multiples of cell in [0, side]."""
        return [i * self.cell for i in range(self.grid_n + 1)]


def _snap(value: float, cell: int) -> int:
    # round half up
    return int((value / cell) + 0.5) * cell


def quantize_box(box: BBox, grid: GridSpec) -> BBox:
    """Snap coordinates to the nearest grid multiple; repair degenerate results.

    A coordinate pair that collapses (min == max) is expanded by one cell on
    the max side, shifted back in-bounds if needed.
    """
    cell = grid.cell
    side = grid.image_side
    if box.x_max > side or box.y_max > side:
        raise CodecError(f"box {box.as_tuple()} outside image side {side}")

    def snap_pair(lo: float, hi: float) -> tuple[int, int]:
        qlo, qhi = _snap(lo, cell), _snap(hi, cell)
        if qlo == qhi:
            qhi += cell
            if qhi > side:
                qhi = side
                qlo = side - cell
        return qlo, qhi

    x0, x1 = snap_pair(box.x_min, box.x_max)
    y0, y1 = snap_pair(box.y_min, box.y_max)
    return BBox(x0, y0, x1, y1, quantized=True)


def box_to_text(box: BBox) -> str:
    """Render a quantized box as "[x_min, y_min, x_max, y_max]"."""
    if not box.quantized:
        raise CodecError("box_to_text requires a quantized box")
    return f"[{box.x_min}, {box.y_min}, {box.x_max}, {box.y_max}]"


def text_to_box(text: str, grid: GridSpec) -> BBox:
    """Parse box text; raises BoxParseError on any malformation."""
    m = _BOX_RE.match(text.strip())
    if m is None:
        raise BoxParseError(f"not a box template: {text!r}")
    x0, y0, x1, y1 = (int(v) for v in m.groups())
    side = grid.image_side
    if max(x0, y0, x1, y1) > side:
        raise BoxParseError(f"coordinate out of range in {text!r}")
    if not (x0 < x1 and y0 < y1):
        raise BoxParseError(f"coordinate ordering violated in {text!r}")
    cell = grid.cell
    aligned = all(v % cell == 0 for v in (x0, y0, x1, y1))
    return BBox(x0, y0, x1, y1, quantized=aligned)


def try_parse_box(text: str, grid: GridSpec) -> BBox | None:
    try:
        return text_to_box(text, grid)
    except BoxParseError:
        return None


PROMPT_TEMPLATE = "in the image is a {obj} located at"
PROMPT_TEMPLATE_REFERRAL_PREFIX = "in the image is a {word} {obj} located at"
PROMPT_TEMPLATE_REFERRAL_SUFFIX = "in the image is a {obj} on {word} located at"

REFERRAL_WORDS = ("left", "right", "top", "bottom")


def build_prompt(category: str, referral: tuple[str, str] | None = None) -> str:
    """Localisation prompt for a category, optionally with a positional referral.

    `referral` is (word, style) with style "prefix" ("left circle") or
    "suffix" ("circle on left").
    """
    if referral is None:
        return PROMPT_TEMPLATE.format(obj=category)
    word, style = referral
    if word not in REFERRAL_WORDS:
        raise CodecError(f"unknown referral word {word!r}")
    if style == "prefix":
        return PROMPT_TEMPLATE_REFERRAL_PREFIX.format(word=word, obj=category)
    if style == "suffix":
        return PROMPT_TEMPLATE_REFERRAL_SUFFIX.format(word=word, obj=category)
    raise CodecError(f"unknown referral style {style!r}")


class Vocabulary:
    """Closed, ordered token set shared by prompts and answers.

    Order: specials, punctuation, prompt words, category names, coordinate
    values ascending. Index = position in the ordered list.
    """

    def __init__(self, categories: list[str], grid: GridSpec):
        coord_tokens = tuple(str(v) for v in grid.values())
        cats = tuple(categories)
        if len(set(cats)) != len(cats):
            raise CodecError("duplicate category names")
        overlap = set(cats) & (set(SPECIAL_TOKENS) | set(PUNCT_TOKENS)
                               | set(PROMPT_WORDS) | set(coord_tokens))
        if overlap:
            raise CodecError(f"category names collide with reserved tokens: {overlap}")
        self.grid = grid
        self.categories = cats
        self.tokens: tuple[str, ...] = (
            SPECIAL_TOKENS + PUNCT_TOKENS + PROMPT_WORDS + cats + coord_tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.pad_id = self.index[PAD]
        self.coordinate_ids = frozenset(self.index[t] for t in coord_tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def split_units(self, text: str) -> list[str]:
        for ch in PUNCT_TOKENS:
            text = text.replace(ch, f" {ch} ")
        return text.lower().split()

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for unit in self.split_units(text):
            if unit not in self.index:
                raise CodecError(f"out-of-vocabulary unit {unit!r}")
            ids.append(self.index[unit])
        return ids

    def detokenize(self, ids: list[int]) -> str:
        parts: list[str] = []
        prev = None
        for i in ids:
            tok = self.tokens[i]
            if not parts:
                parts.append(tok)
            elif tok in ("]", ","):
                parts[-1] += tok
            elif prev == "[":
                parts[-1] += tok
            else:
                parts.append(tok)
            prev = tok
        return " ".join(parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path, grid: GridSpec) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        n_fixed = len(SPECIAL_TOKENS) + len(PUNCT_TOKENS) + len(PROMPT_WORDS)
        n_coord = grid.grid_n + 1
        cats = tokens[n_fixed:len(tokens) - n_coord]
        vocab = cls(cats, grid)
        if list(vocab.tokens) != tokens:
            raise CodecError("vocabulary file does not match reconstruction")
        return vocab


def scale_box(box: BBox, factor: int) -> BBox:
    """Scale all coordinates by an integer factor (resolution changes)."""
    return replace(box, x_min=box.x_min * factor, y_min=box.y_min * factor,
                   x_max=box.x_max * factor, y_max=box.y_max * factor)


def downscale_box(box: BBox, factor: int) -> BBox:
    """Exact inverse of scale_box; coordinates must divide evenly."""
    coords = box.as_tuple()
    if any(c % factor for c in coords):
        raise CodecError(f"box {coords} not divisible by factor {factor}")
    return replace(box, x_min=box.x_min // factor, y_min=box.y_min // factor,
                   x_max=box.x_max // factor, y_max=box.y_max // factor)
