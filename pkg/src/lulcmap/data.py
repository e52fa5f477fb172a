"""EuroSAT-style dataset ingestion, splitting, augmentation, normalization.

Datasets live on disk as one directory per class name containing PNG/PPM
files; items are decoded lazily.  The ten-class map (names, ids, display
colors) is fixed for the LULC task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .imgio import SUPPORTED_EXTENSIONS, bilinear_resize, read_image
from .tensor import Tensor


@dataclass(frozen=True)
class ClassDef:
    name: str
    id: int
    color: tuple[int, int, int]


class ClassMap:
    """Ordered label set: contiguous ids, unique names, unique display colors."""

    def __init__(self, classes: list[ClassDef]):
        names = [c.name for c in classes]
        colors = [c.color for c in classes]
        if len(set(names)) != len(names):
            raise ValueError(f"class names not unique: {names}")
        if len(set(colors)) != len(colors):
            raise ValueError("class colors must be unique (the palette is inverted for tests)")
        if [c.id for c in classes] != list(range(len(classes))):
            raise ValueError("class ids must be contiguous starting at 0")
        self.classes = list(classes)
        self._by_name = {c.name: c for c in classes}

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __getitem__(self, class_id: int) -> ClassDef:
        return self.classes[class_id]

    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def by_name(self, name: str) -> ClassDef:
        if name not in self._by_name:
            raise DataError(f"unknown class name {name!r}; known: {self.names()}")
        return self._by_name[name]

    def color_to_id(self) -> dict[tuple[int, int, int], int]:
        return {c.color: c.id for c in self.classes}


# The ten scene classes, in fixed id order, with distinct display colors.
EUROSAT_CLASSES = ClassMap([
    ClassDef("AnnualCrop", 0, (230, 196, 60)),
    ClassDef("Forest", 1, (22, 110, 50)),
    ClassDef("HerbaceousVegetation", 2, (120, 200, 120)),
    ClassDef("Highway", 3, (90, 90, 90)),
    ClassDef("Industrial", 4, (160, 60, 160)),
    ClassDef("Pasture", 5, (200, 250, 130)),
    ClassDef("PermanentCrop", 6, (150, 110, 40)),
    ClassDef("Residential", 7, (220, 60, 50)),
    ClassDef("River", 8, (60, 120, 230)),
    ClassDef("SeaLake", 9, (20, 40, 150)),
])

ImageSource = Path | np.ndarray


@dataclass
class LabeledDataset:
    """Images with class labels.

    `items` holds (source, class id) pairs where a source is either a file
    path (decoded lazily) or an in-memory uint8 [H, W, 3] array.  Directory
    structure is validated at load time; pixel dimensions are validated
    when an image is first accessed.
    """

    items: list[tuple[ImageSource, int]]
    class_map: ClassMap = field(default_factory=lambda: EUROSAT_CLASSES)
    image_size: int = 64

    def __post_init__(self):
        for i, (_, label) in enumerate(self.items):
            if not 0 <= label < len(self.class_map):
                raise DataError(f"item {i} has class id {label} outside [0, {len(self.class_map)})")

    def __len__(self) -> int:
        return len(self.items)

    def label(self, i: int) -> int:
        return self.items[i][1]

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def image(self, i: int) -> np.ndarray:
        source = self.items[i][0]
        pixels = read_image(source) if isinstance(source, Path) else np.asarray(source)
        if pixels.shape != (self.image_size, self.image_size, 3):
            name = source if isinstance(source, Path) else f"item {i}"
            raise DataError(
                f"{name}: expected {self.image_size}x{self.image_size}x3 pixels, got {pixels.shape}"
            )
        if pixels.dtype != np.uint8:
            raise DataError(f"item {i}: expected 8-bit pixels, got {pixels.dtype}")
        return pixels

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset(items=[self.items[int(i)] for i in indices],
                              class_map=self.class_map, image_size=self.image_size)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = False  # per-class split; not claimed by the recipe, offered as an option

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def load_dataset(root: str | Path, class_map: ClassMap = EUROSAT_CLASSES,
                 image_size: int = 64) -> LabeledDataset:
    """Scan `<root>/<ClassName>/<file>.png|.ppm` into a dataset.

    Item order is the lexicographic sort of file paths, so repeated loads
    of the same tree enumerate identically.  Unknown class directories are
    an error; non-directory entries at the top level are ignored.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    known = set(class_map.names())
    items: list[tuple[ImageSource, int]] = []
    seen_any = False
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if class_dir.name not in known:
            raise DataError(f"unknown class directory {class_dir} (known classes: {sorted(known)})")
        class_id = class_map.by_name(class_dir.name).id
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in SUPPORTED_EXTENSIONS)
        seen_any = seen_any or bool(files)
        items.extend((path, class_id) for path in files)
    if not seen_any:
        raise DataError(f"no images found under {root}")
    return LabeledDataset(items=items, class_map=class_map, image_size=image_size)


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded uniform shuffle then prefix split into (train, test).

    |train| = round(train_fraction * N); the partition is disjoint and
    exhaustive, and identical for identical seeds.  With `stratified`,
    the same rule is applied within each class.
    """
    n = len(dataset)
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        train_idx: list[int] = []
        test_idx: list[int] = []
        labels = dataset.labels()
        for class_id in range(len(dataset.class_map)):
            members = np.flatnonzero(labels == class_id)
            members = members[rng.permutation(len(members))]
            cut = int(round(spec.train_fraction * len(members)))
            train_idx.extend(members[:cut])
            test_idx.extend(members[cut:])
        train_idx, test_idx = np.array(sorted(train_idx)), np.array(sorted(test_idx))
    else:
        order = rng.permutation(n)
        cut = int(round(spec.train_fraction * n))
        train_idx, test_idx = order[:cut], order[cut:]
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DataError(f"degenerate split: N={n} with fraction {spec.train_fraction} "
                        f"leaves an empty side ({len(train_idx)}/{len(test_idx)})")
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

CROP_PAD = 4


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror columns; an involution."""
    return np.ascontiguousarray(image[:, ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    """Mirror rows; an involution."""
    return np.ascontiguousarray(image[::-1])


def random_crop(image: np.ndarray, rng: np.random.Generator, pad: int = CROP_PAD) -> np.ndarray:
    """Reflect-pad by `pad` then crop back to the original size at a random offset."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return np.ascontiguousarray(padded[top:top + h, left:left + w])


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Train-time augmentation: random crop, then horizontal and vertical
    flips each with probability 0.5.  Output dimensions always equal input
    dimensions; the label is untouched by contract.

    Draw order is fixed (crop offsets, hflip coin, vflip coin) so a seeded
    generator reproduces the exact transformation.
    """
    out = random_crop(image, rng)
    if rng.random() < 0.5:
        out = hflip(out)
    if rng.random() < 0.5:
        out = vflip(out)
    return out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_array(image: np.ndarray, mean, std) -> np.ndarray:
    """[H, W, 3] pixels in [0, 255] -> float32 [3, H, W]: scale to [0, 1],
    then per-channel (x - mean) / std.  Statistics are in [0, 1] units."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if mean.shape != (3,) or std.shape != (3,):
        raise ValueError(f"per-channel statistics must have shape (3,), got {mean.shape}/{std.shape}")
    if (std <= 0).any():
        raise ValueError(f"std must be positive, got {std.tolist()}")
    scaled = np.asarray(image, dtype=np.float32) / 255.0
    return ((scaled - mean) / std).transpose(2, 0, 1)


def normalize(image: np.ndarray, mean, std) -> Tensor:
    """Tensor-returning wrapper around `normalize_array`."""
    return Tensor(normalize_array(image, mean, std))


def dataset_statistics(dataset: LabeledDataset, max_items: int | None = None) -> dict:
    """Per-channel mean/std of the dataset in [0, 1] units.

    The variance is accumulated channel-wise over every pixel; `max_items`
    caps the scan for very large datasets (items are taken in order).
    """
    n = len(dataset) if max_items is None else min(max_items, len(dataset))
    if n == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    count = 0
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    for i in range(n):
        pixels = dataset.image(i).astype(np.float64) / 255.0
        total += pixels.sum(axis=(0, 1))
        total_sq += (pixels * pixels).sum(axis=(0, 1))
        count += pixels.shape[0] * pixels.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 1e-12)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in np.sqrt(var)]}


def write_statistics(stats: dict, path: str | Path) -> None:
    """Emit `{mean: [r,g,b], std: [r,g,b]}` (in [0, 1] units) as JSON."""
    if set(stats) != {"mean", "std"} or any(len(stats[k]) != 3 for k in stats):
        raise ValueError(f"statistics must be {{mean: [r,g,b], std: [r,g,b]}}, got {stats}")
    Path(path).write_text(json.dumps(stats, indent=1, sort_keys=True))


@dataclass(frozen=True)
class Preprocessor:
    """The image -> model-input path shared by training, evaluation and mapping.

    Optional augmentation (train only), optional bilinear resize to the
    model's input resolution, then normalization to the configured
    statistics.  Returns a float32 [3, H, W] array ready for batching.
    """

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    resize_to: int | None = None

    def __call__(self, image: np.ndarray, rng: np.random.Generator | None = None,
                 train: bool = False, augment_enabled: bool = False) -> np.ndarray:
        out = np.asarray(image)
        if train and augment_enabled:
            if rng is None:
                raise ValueError("augmentation requires an rng")
            out = augment(out, rng)
        if self.resize_to is not None and out.shape[0] != self.resize_to:
            out = bilinear_resize(out, (self.resize_to, self.resize_to))
        return normalize_array(out, self.mean, self.std)

    def output_size(self, input_size: int) -> int:
        return self.resize_to if self.resize_to is not None else input_size
