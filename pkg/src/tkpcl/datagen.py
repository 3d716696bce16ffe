"""Synthetic shapes benchmark: images, image-level labels, pixel masks.

Each image holds one to three non-overlapping shapes on a textured
background.  The shape *type* is the class; every class also has its own
hue (jittered per instance).  Class 0 is background and never appears in an
image-level label set.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import netpbm

SHAPE_KINDS = ("circle", "square", "triangle", "diamond", "cross", "ring")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 5
    n_train: int = 200
    n_val: int = 50
    h: int = 64
    w: int = 64
    d: int = 8
    seed: int = 0
    noise_level: float = 0.08
    min_size: float = 10.0
    max_size: float = 15.0
    max_shapes: int = 3
    max_attempts: int = 200

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if self.n_train < 0 or self.n_val < 0:
            raise DatasetError("sample counts must be non-negative")
        if self.d < 1 or self.h % self.d or self.w % self.d:
            raise DatasetError(f"patch side {self.d} must divide h={self.h} and w={self.w}")
        if not 0 < self.min_size <= self.max_size:
            raise DatasetError("need 0 < min_size <= max_size")
        if self.max_shapes < 1:
            raise DatasetError("max_shapes must be >= 1")
        if self.noise_level < 0:
            raise DatasetError("noise_level must be >= 0")


@dataclass
class ImageSample:
    pixels: np.ndarray  # (h, w, 3) float64 in [0, 1], multiples of 1/255
    labels: frozenset[int]
    gt_mask: np.ndarray  # (h, w) int64, 0 = background
    sample_id: int


@dataclass
class PatchGrid:
    patches: np.ndarray  # (s, d*d*3), row-major over the grid
    rows: int
    cols: int
    d: int

    @property
    def s(self) -> int:
        return self.rows * self.cols


# ---------------------------------------------------------------------------
# shape rasterisation
# ---------------------------------------------------------------------------

# radius of the circle enclosing each kind, in units of its size parameter
_BOUNDING = {"circle": 1.0, "square": 1.21, "triangle": 1.0, "diamond": 1.0, "cross": 1.06, "ring": 1.0}


def shape_kind(class_id: int) -> str:
    return SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]


def _shape_mask(kind: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        a = 0.85 * r
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "triangle":
        # apex up; base at cy + 0.8r
        top, base = -r, 0.8 * r
        half = 0.95 * r * (dy - top) / (base - top)
        return (dy >= top) & (dy <= base) & (np.abs(dx) <= half)
    raise DatasetError(f"unknown shape kind {kind!r}")


def class_color(class_id: int, n_classes: int) -> np.ndarray:
    hue = (class_id - 1) / n_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))


def _background(rng: np.random.Generator, h: int, w: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.25, 0.55) + rng.uniform(-0.06, 0.06, size=3)
    # smooth texture: coarse random field upsampled by block repetition, plus pixel noise
    coarse = rng.normal(0.0, noise, size=(h // 8 + 1, w // 8 + 1, 3))
    texture = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:h, :w]
    return base + texture + rng.normal(0.0, noise * 0.5, size=(h, w, 3))


def _make_sample(config: DatasetConfig, sample_id: int, forced_class: int | None) -> ImageSample:
    h, w, n = config.h, config.w, config.n_classes
    rng = np.random.default_rng([config.seed, sample_id])

    n_shapes = int(rng.integers(1, min(config.max_shapes, n) + 1))
    classes = [int(c) for c in rng.permutation(np.arange(1, n + 1))[:n_shapes]]
    if forced_class is not None and forced_class not in classes:
        classes[0] = forced_class

    for _ in range(config.max_attempts):
        placed: list[tuple[int, float, float, float]] = []
        for c in classes:
            r = rng.uniform(config.min_size, config.max_size)
            br = r * _BOUNDING[shape_kind(c)]
            if 2 * br > min(h, w):
                raise DatasetError(f"shape of size {r:.1f} cannot fit in a {h}x{w} image")
            for _ in range(config.max_attempts):
                cy = rng.uniform(br, h - br)
                cx = rng.uniform(br, w - br)
                if all((cy - py) ** 2 + (cx - px) ** 2 >= (br + pr + 1.0) ** 2 for _, py, px, pr in placed):
                    placed.append((c, cy, cx, br))
                    break
            else:
                break
        if len(placed) == len(classes):
            break
    else:
        raise DatasetError(
            f"sample {sample_id}: could not place {len(classes)} shapes in "
            f"{config.max_attempts} layout attempts"
        )

    pixels = _background(rng, h, w, config.noise_level)
    mask = np.zeros((h, w), dtype=np.int64)
    for c, cy, cx, br in placed:
        r = br / _BOUNDING[shape_kind(c)]
        region = _shape_mask(shape_kind(c), cy, cx, r, h, w)
        color = class_color(c, n) + rng.uniform(-0.06, 0.06, size=3)
        pixels[region] = color + rng.normal(0.0, config.noise_level * 0.5, size=(int(region.sum()), 3))
        mask[region] = c

    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    labels = frozenset(int(c) for c in np.unique(mask) if c != 0)
    return ImageSample(pixels=pixels, labels=labels, gt_mask=mask, sample_id=sample_id)


def generate(config: DatasetConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    """Build (train, val); train ids are 0..n_train-1, val ids follow on.

    Each sample draws from its own generator keyed on (seed, sample_id), so
    any subset can be regenerated independently.
    """
    config.validate()
    train = []
    for i in range(config.n_train):
        # the first n_classes train images each carry a distinct class
        forced = (i % config.n_classes) + 1 if i < config.n_classes else None
        train.append(_make_sample(config, i, forced))
    val = [_make_sample(config, config.n_train + i, None) for i in range(config.n_val)]
    return train, val


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(sample: ImageSample | np.ndarray, d: int) -> PatchGrid:
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    h, w, ch = pixels.shape
    if d < 1 or h % d or w % d:
        raise DatasetError(f"patch side {d} does not divide image {h}x{w}")
    rows, cols = h // d, w // d
    blocks = pixels.reshape(rows, d, cols, d, ch).transpose(0, 2, 1, 3, 4)
    return PatchGrid(patches=blocks.reshape(rows * cols, d * d * ch).copy(), rows=rows, cols=cols, d=d)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    d = grid.d
    ch = grid.patches.shape[1] // (d * d)
    blocks = grid.patches.reshape(grid.rows, grid.cols, d, d, ch).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid.rows * d, grid.cols * d, ch).copy()


def patch_majority_labels(sample: ImageSample | np.ndarray, d: int) -> np.ndarray:
    """Majority class per d x d block; ties go to the smaller class id."""
    mask = sample.gt_mask if isinstance(sample, ImageSample) else np.asarray(sample)
    h, w = mask.shape
    if d < 1 or h % d or w % d:
        raise DatasetError(f"patch side {d} does not divide mask {h}x{w}")
    rows, cols = h // d, w // d
    blocks = mask.reshape(rows, d, cols, d).transpose(0, 2, 1, 3).reshape(rows * cols, d * d)
    n_ids = int(mask.max()) + 1
    counts = np.zeros((rows * cols, n_ids), dtype=np.int64)
    np.add.at(counts, (np.arange(rows * cols)[:, None], blocks), 1)
    return counts.argmax(axis=1)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _write_split(root: Path, samples: list[ImageSample]) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img = np.round(s.pixels * 255.0).astype(np.uint8)
        netpbm.write(root / "images" / f"{s.sample_id}.ppm", img)
        netpbm.write(root / "masks" / f"{s.sample_id}.pgm", s.gt_mask.astype(np.uint8))
        lines.append(json.dumps({"sample_id": s.sample_id, "labels": sorted(s.labels)}))
    tmp = root / "labels.jsonl.tmp"
    tmp.write_text("".join(line + "\n" for line in lines))
    os.replace(tmp, root / "labels.jsonl")


def export_dataset(directory: str | os.PathLike, train: list[ImageSample], val: list[ImageSample],
                   config: DatasetConfig | None = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    _write_split(root / "train", train)
    _write_split(root / "val", val)
    manifest = {"n_train": len(train), "n_val": len(val)}
    if config is not None:
        manifest["seed"] = config.seed
        manifest["config"] = asdict(config)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / "manifest.json")
    return root


def _read_split(root: Path) -> list[ImageSample]:
    samples = []
    for line in (root / "labels.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        sid = int(rec["sample_id"])
        pixels = netpbm.read(root / "images" / f"{sid}.ppm").astype(np.float64) / 255.0
        mask = netpbm.read(root / "masks" / f"{sid}.pgm").astype(np.int64)
        samples.append(ImageSample(pixels=pixels, labels=frozenset(rec["labels"]), gt_mask=mask, sample_id=sid))
    return samples


def import_dataset(directory: str | os.PathLike) -> tuple[list[ImageSample], list[ImageSample]]:
    root = Path(directory)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    return _read_split(root / "train"), _read_split(root / "val")
