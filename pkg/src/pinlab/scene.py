"""Copy-paste scene composition: procedural sprites on noise backgrounds.

Every sample is a pure function of (asset bank, config, 64-bit seed), which
makes dataset generation embarrassingly parallel and byte-reproducible.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import BBox, GridSpec, box_to_text, build_prompt, downscale_box, quantize_box

SHAPES = ("circle", "square", "triangle", "star", "ring", "cross", "crescent", "diamond")
COLORS = {
    "red": (220, 50, 47),
    "blue": (38, 89, 211),
    "green": (46, 168, 67),
    "yellow": (226, 208, 61),
    "orange": (236, 136, 36),
    "violet": (142, 68, 199),
    "teal": (42, 176, 172),
    "pink": (233, 110, 173),
}


class CompositionError(RuntimeError):
    """No object could be placed; caller regenerates with the next seed."""


class RegistryError(ValueError):
    pass


def category_registry() -> list[str]:
    return [f"{color}-{shape}" for shape in SHAPES for color in COLORS]


@dataclass(frozen=True)
class ObjectAsset:
    category_name: str
    sprite: np.ndarray  # uint8 [h, w, 4], hard alpha
    native_size: tuple[int, int]  # (width, height)
    aspect_ratio: float  # width / height


@dataclass(frozen=True)
class CompositionConstraints:
    a_max: int = 3
    s_min: tuple[float, ...] = (0.3, 0.2, 0.1)
    s_max: tuple[float, ...] = (1.0, 1.0, 1.0)
    o_max: float = 0.5
    keep_aspect: bool = True

    def __post_init__(self):
        if self.a_max < 1:
            raise ValueError("a_max must be >= 1")
        if len(self.s_min) != self.a_max or len(self.s_max) != self.a_max:
            raise ValueError("s_min/s_max must have length a_max")
        for lo, hi in zip(self.s_min, self.s_max):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("scale bounds must satisfy 0 < s_min <= s_max <= 1")
        if not (0.0 <= self.o_max <= 1.0):
            raise ValueError("o_max must lie in [0, 1]")


def constraints_for(a_max: int, o_max: float = 0.5) -> CompositionConstraints:
    """Paper-style scale buckets, extended past three objects by repetition."""
    base_min = [0.3, 0.2, 0.1]
    s_min = tuple((base_min + [0.1] * a_max)[:a_max])
    return CompositionConstraints(a_max=a_max, s_min=s_min,
                                  s_max=(1.0,) * a_max, o_max=o_max)


@dataclass(frozen=True)
class CompositeSample:
    image: np.ndarray  # uint8 [H, W, 3]
    objects: tuple[tuple[str, BBox], ...]
    target_index: int
    prompt: str
    answer: str
    referral: str | None  # "word:style" or None
    seed: int


# --- sprites -----------------------------------------------------------

def _shape_mask(shape: str, n: int, angle: float) -> np.ndarray:
    """Boolean mask of a centered shape on an n x n canvas, rotated by angle."""
    ax = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    u, v = np.meshgrid(ax, ax)
    c, s = np.cos(angle), np.sin(angle)
    x = c * u - s * v
    y = s * u + c * v
    rho = np.sqrt(x * x + y * y)
    if shape == "circle":
        return rho <= 0.92
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.78
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= 1.05
    if shape == "ring":
        return (rho <= 0.92) & (rho >= 0.5)
    if shape == "cross":
        return ((np.abs(x) <= 0.3) & (np.abs(y) <= 0.95)) | \
               ((np.abs(y) <= 0.3) & (np.abs(x) <= 0.95))
    if shape == "crescent":
        bite = np.sqrt((x - 0.55) ** 2 + y * y)
        return (rho <= 0.92) & (bite > 0.62)
    if shape == "triangle":
        phi = np.arctan2(y, x) - np.pi / 2.0
        step = 2.0 * np.pi / 3.0
        local = np.mod(phi, step) - step / 2.0
        bound = 0.95 * np.cos(step / 2.0) / np.cos(local)
        return rho <= bound
    if shape == "star":
        phi = np.arctan2(y, x) - np.pi / 2.0
        step = 2.0 * np.pi / 5.0
        t = np.mod(phi, step) / step
        bound = 0.42 + (1.0 - 0.42) * np.abs(2.0 * t - 1.0)
        return rho <= bound
    raise RegistryError(f"unknown shape {shape!r}")


def _render_sprite(category: str, rng: np.random.Generator) -> ObjectAsset:
    color_name, shape = category.split("-", 1)
    base = np.array(COLORS[color_name], dtype=np.float64)
    n = int(rng.integers(40, 57))
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    mask = _shape_mask(shape, n, angle)
    # aspect jitter: resample the square canvas to a rectangle
    ratio = float(rng.uniform(0.7, 1.4))
    h = max(8, round(n * ratio))
    mask = _resize_nearest(mask.astype(np.uint8), h, n).astype(bool)
    shade = float(rng.uniform(0.85, 1.15))
    rgb = np.clip(base * shade, 0, 255).astype(np.uint8)
    sprite = np.zeros((mask.shape[0], mask.shape[1], 4), dtype=np.uint8)
    sprite[..., :3] = rgb
    sprite[..., 3] = np.where(mask, 255, 0)
    # crop to the alpha-tight bounding box so pasted extents hug the shape
    ys, xs = np.nonzero(mask)
    sprite = sprite[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    hh, ww = sprite.shape[:2]
    return ObjectAsset(category_name=category, sprite=sprite,
                       native_size=(ww, hh), aspect_ratio=ww / hh)


@dataclass(frozen=True)
class AssetBank:
    train_categories: tuple[str, ...]
    heldout_categories: tuple[str, ...]
    assets: dict[str, tuple[ObjectAsset, ...]] = field(repr=False)
    seed: int = 0

    @property
    def all_categories(self) -> tuple[str, ...]:
        return self.train_categories + self.heldout_categories

    def categories(self, which: str) -> tuple[str, ...]:
        if which == "train":
            return self.train_categories
        if which == "heldout":
            return self.heldout_categories
        if which == "all":
            return self.all_categories
        raise RegistryError(f"unknown category selector {which!r}")


def build_asset_bank(n_train_categories: int, n_heldout_categories: int,
                     seed: int, variants_per_category: int = 24) -> AssetBank:
    """Deterministic sprite bank with disjoint train / held-out categories."""
    if n_train_categories < 1 or n_heldout_categories < 1:
        raise RegistryError("need at least one train and one held-out category")
    registry = category_registry()
    total = n_train_categories + n_heldout_categories
    if total > len(registry):
        raise RegistryError(f"registry exhausted: {total} > {len(registry)}")
    if variants_per_category < 20:
        raise RegistryError("each category needs at least 20 sprite variants")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    order = rng.permutation(len(registry))
    chosen = [registry[i] for i in order[:total]]
    train = tuple(sorted(chosen[:n_train_categories]))
    heldout = tuple(sorted(chosen[n_train_categories:]))
    assets = {}
    for ci, cat in enumerate(train + heldout):
        variants = []
        for vi in range(variants_per_category):
            vrng = np.random.default_rng(np.random.SeedSequence((seed, ci, vi)))
            variants.append(_render_sprite(cat, vrng))
        assets[cat] = tuple(variants)
    return AssetBank(train_categories=train, heldout_categories=heldout,
                     assets=assets, seed=seed)


# --- backgrounds -------------------------------------------------------

def _upsample_bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gy = np.linspace(0.0, grid.shape[0] - 1.0, h)
    gx = np.linspace(0.0, grid.shape[1] - 1.0, w)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, grid.shape[0] - 1)
    x1 = np.minimum(x0 + 1, grid.shape[1] - 1)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def sample_background(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded multi-octave value noise + color gradient, or plain white."""
    if kind == "plain-white":
        return np.full((h, w, 3), 255, dtype=np.uint8)
    if kind != "textured":
        raise ValueError(f"unknown background kind {kind!r}")
    noise = np.zeros((h, w), dtype=np.float64)
    weight = 1.0
    for cells in (4, 8, 16, 32):
        coarse = rng.random((cells + 1, cells + 1))
        noise += weight * _upsample_bilinear(coarse, h, w)
        weight *= 0.5
    noise -= noise.min()
    peak = noise.max()
    if peak > 0:
        noise /= peak
    c0 = rng.uniform(30, 225, size=3)
    c1 = rng.uniform(30, 225, size=3)
    axis = rng.integers(3)
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    t = {0: np.broadcast_to(xx, (h, w)), 1: np.broadcast_to(yy, (h, w)),
         2: (xx + yy) / 2.0}[int(axis)]
    base = c0[None, None, :] * (1.0 - t[..., None]) + c1[None, None, :] * t[..., None]
    img = base * (0.55 + 0.45 * noise[..., None])
    return np.clip(img, 0, 255).astype(np.uint8)


# --- composition -------------------------------------------------------

def overlap_fraction(a: BBox, b: BBox) -> float:
    """Intersection area over the smaller box's area."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / min(a.area, b.area)


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = img.shape[:2]
    ys = np.clip(((np.arange(h) + 0.5) * src_h / h).astype(int), 0, src_h - 1)
    xs = np.clip(((np.arange(w) + 0.5) * src_w / w).astype(int), 0, src_w - 1)
    return img[np.ix_(ys, xs)]


_MAX_PLACE_RETRIES = 64


def _answer_text(box: BBox, grid: GridSpec, coord_factor: int) -> str:
    """Quantized box text, optionally expressed at a smaller base resolution."""
    q = quantize_box(box, grid)
    if coord_factor > 1:
        q = downscale_box(q, coord_factor)
    return box_to_text(q)


def compose(background: np.ndarray, bank: AssetBank,
            constraints: CompositionConstraints, grid: GridSpec,
            rng: np.random.Generator, categories: str = "train",
            duplicate_prob: float = 0.0, min_objects: int = 1,
            seed: int = 0, coord_factor: int = 1) -> CompositeSample:
    """Paste k ~ U{min..a_max} sprites under scale / overlap constraints."""
    side = background.shape[0]
    if background.shape[0] != background.shape[1]:
        raise ValueError("compose expects a square background")
    pool = bank.categories(categories)
    k = int(rng.integers(min_objects, constraints.a_max + 1))
    s_lo = constraints.s_min[k - 1]
    s_hi = constraints.s_max[k - 1]
    placed: list[tuple[str, ObjectAsset, BBox]] = []
    for _ in range(k):
        if placed and rng.random() < duplicate_prob:
            cat = placed[int(rng.integers(len(placed)))][0]
        else:
            cat = pool[int(rng.integers(len(pool)))]
        asset = bank.assets[cat][int(rng.integers(len(bank.assets[cat])))]
        frac = float(rng.uniform(s_lo, s_hi))
        long_side = max(asset.native_size)
        target_long = max(2, round(frac * side))
        f = target_long / long_side
        w = min(side, max(1, round(asset.native_size[0] * f)))
        h = min(side, max(1, round(asset.native_size[1] * f)))
        for _attempt in range(_MAX_PLACE_RETRIES):
            x0 = int(rng.integers(0, side - w + 1))
            y0 = int(rng.integers(0, side - h + 1))
            box = BBox(x0, y0, x0 + w, y0 + h)
            if all(overlap_fraction(box, pb) <= constraints.o_max
                   for _, _, pb in placed):
                placed.append((cat, asset, box))
                break
    if not placed:
        raise CompositionError("no object placed within retry budget")

    canvas = background.copy()
    for cat, asset, box in placed:
        sprite = _resize_nearest(asset.sprite, box.height, box.width)
        alpha = sprite[..., 3] == 255
        region = canvas[box.y_min:box.y_max, box.x_min:box.x_max]
        region[alpha] = sprite[..., :3][alpha]

    target_index = int(rng.integers(len(placed)))
    objects = tuple((cat, box) for cat, _, box in placed)
    target_cat, target_box = objects[target_index]
    prompt = build_prompt(target_cat)
    answer = _answer_text(target_box, grid, coord_factor)
    return CompositeSample(image=canvas, objects=objects,
                           target_index=target_index, prompt=prompt,
                           answer=answer, referral=None, seed=seed)


def _referral_axis_word(sample: CompositeSample, target_index: int) -> str:
    cat = sample.objects[target_index][0]
    centers = [((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0)
               for c, b in sample.objects if c == cat]
    if len(centers) < 2:
        raise CompositionError("referral needs >= 2 instances of the target category")
    xs = [c[0] for c in centers]
    ys = [c[1] for c in centers]
    tb = sample.objects[target_index][1]
    tcx, tcy = (tb.x_min + tb.x_max) / 2.0, (tb.y_min + tb.y_max) / 2.0
    if (max(xs) - min(xs)) >= (max(ys) - min(ys)):
        mid = (max(xs) + min(xs)) / 2.0
        return "left" if tcx <= mid else "right"
    mid = (max(ys) + min(ys)) / 2.0
    return "top" if tcy <= mid else "bottom"


def make_referral(sample: CompositeSample, rng: np.random.Generator) -> CompositeSample:
    """Attach a positional referral along the axis of largest center spread."""
    word = _referral_axis_word(sample, sample.target_index)
    style = "prefix" if rng.random() < 0.5 else "suffix"
    cat = sample.objects[sample.target_index][0]
    return replace(sample, prompt=build_prompt(cat, (word, style)),
                   referral=f"{word}:{style}")


def _retarget_for_referral(sample: CompositeSample,
                           rng: np.random.Generator,
                           grid: GridSpec, coord_factor: int = 1) -> CompositeSample:
    """Move the target onto an extreme instance of a duplicated category."""
    from collections import Counter
    counts = Counter(cat for cat, _ in sample.objects)
    dup_cats = sorted(c for c, n in counts.items() if n >= 2)
    if not dup_cats:
        raise CompositionError("no duplicated category for referral")
    cat = dup_cats[int(rng.integers(len(dup_cats)))]
    idxs = [i for i, (c, _) in enumerate(sample.objects) if c == cat]
    centers = [((sample.objects[i][1].x_min + sample.objects[i][1].x_max) / 2.0,
                (sample.objects[i][1].y_min + sample.objects[i][1].y_max) / 2.0)
               for i in idxs]
    xs = [c[0] for c in centers]
    ys = [c[1] for c in centers]
    axis = 0 if (max(xs) - min(xs)) >= (max(ys) - min(ys)) else 1
    vals = xs if axis == 0 else ys
    extreme = idxs[vals.index(min(vals))] if rng.random() < 0.5 \
        else idxs[vals.index(max(vals))]
    tcat, tbox = sample.objects[extreme]
    return replace(sample, target_index=extreme, prompt=build_prompt(tcat),
                   answer=_answer_text(tbox, grid, coord_factor))


CAPTION_TEMPLATES = ("a photo of a {objs}", "in the image is a {objs}")


def caption_for(sample: CompositeSample, rng: np.random.Generator) -> str:
    objs = " and a ".join(cat for cat, _ in sample.objects)
    template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
    return template.format(objs=objs)


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int
    seed: int
    image_side: int = 64
    grid_n: int = 16
    constraints: CompositionConstraints = CompositionConstraints()
    background: str = "textured"
    categories: str = "train"  # train | heldout | all
    duplicate_prob: float = 0.0
    referral: bool = False
    captions: bool = False
    min_objects: int = 1
    coord_factor: int = 1  # express answer coordinates at image_side / factor

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.image_side, self.grid_n)


def build_sample(bank: AssetBank, cfg: DatasetConfig, seed64: int) -> CompositeSample:
    """One composition attempt, fully determined by a single 64-bit seed."""
    rng = np.random.default_rng(seed64)
    background = sample_background(cfg.background, cfg.image_side, cfg.image_side, rng)
    sample = compose(background, bank, cfg.constraints, cfg.grid, rng,
                     categories=cfg.categories, duplicate_prob=cfg.duplicate_prob,
                     min_objects=cfg.min_objects, seed=seed64,
                     coord_factor=cfg.coord_factor)
    if cfg.referral:
        sample = _retarget_for_referral(sample, rng, cfg.grid, cfg.coord_factor)
        sample = make_referral(sample, rng)
    if cfg.captions:
        sample = replace(sample, prompt="", answer=caption_for(sample, rng))
    return sample


def _sample_seed(dataset_seed: int, index: int, attempt: int) -> int:
    ss = np.random.SeedSequence((dataset_seed, index, attempt))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(bank: AssetBank, cfg: DatasetConfig) -> list[CompositeSample]:
    samples = []
    for i in range(cfg.n_samples):
        for attempt in range(64):
            try:
                samples.append(build_sample(bank, cfg, _sample_seed(cfg.seed, i, attempt)))
                break
            except CompositionError:
                continue
        else:
            raise CompositionError(f"sample {i}: no valid composition in 64 attempts")
    return samples


# --- serialization -----------------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6, maxval 255, row-major RGB."""
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 pixmap")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


@dataclass(frozen=True)
class ManifestRecord:
    seed: int
    image_path: str
    objects: tuple[tuple[str, BBox], ...]
    target_index: int
    prompt: str
    answer: str
    referral: str | None

    @property
    def target_box(self) -> BBox:
        return self.objects[self.target_index][1]

    @property
    def target_category(self) -> str:
        return self.objects[self.target_index][0]


def write_dataset(samples: list[CompositeSample], directory: str, name: str) -> str:
    """One P6 file per sample plus a tab-separated manifest; returns manifest path."""
    img_dir = os.path.join(directory, name)
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(directory, f"manifest_{name}.tsv")
    lines = []
    for i, s in enumerate(samples):
        rel = f"{name}/{i:05d}.ppm"
        write_ppm(os.path.join(directory, rel), s.image)
        obj_fields = [f"{cat}:{b.x_min},{b.y_min},{b.x_max},{b.y_max}"
                      for cat, b in s.objects]
        fields = [str(s.seed), rel, str(len(s.objects)), *obj_fields,
                  str(s.target_index), s.prompt, s.answer, s.referral or "-"]
        lines.append("\t".join(fields))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path


def read_manifest(manifest_path: str) -> list[ManifestRecord]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            seed, rel, k = int(fields[0]), fields[1], int(fields[2])
            objects = []
            for spec_field in fields[3:3 + k]:
                cat, coords = spec_field.split(":")
                x0, y0, x1, y1 = (int(v) for v in coords.split(","))
                objects.append((cat, BBox(x0, y0, x1, y1)))
            target_index = int(fields[3 + k])
            prompt = fields[4 + k]
            answer = fields[5 + k]
            referral = fields[6 + k]
            records.append(ManifestRecord(
                seed=seed, image_path=os.path.join(base, rel),
                objects=tuple(objects), target_index=target_index,
                prompt=prompt, answer=answer,
                referral=None if referral == "-" else referral))
    return records
