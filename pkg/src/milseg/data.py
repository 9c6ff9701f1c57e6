"""Bag labels, synthetic colony images, augmentation, splits and on-disk layout.

A dataset directory looks like::

    images/<id>.pgm     8-bit grayscale (P5)
    masks/<id>.pgm      optional ground-truth colony mask, 0 or 255
    labels.csv          id,label   with label in {good, bad}
    folds.csv           id,fold    (written by cross-validation)
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ImageFormatError, InputError

logger = logging.getLogger(__name__)

GOOD = 1
BAD = -1
LABEL_NAMES = {GOOD: "good", BAD: "bad"}
LABEL_VALUES = {"good": GOOD, "bad": BAD}


def mil_bag_label(instance_labels: Sequence[int]) -> int:
    """+1 if any instance is +1, otherwise -1."""
    labels = list(instance_labels)
    if not labels:
        raise InputError("a bag needs at least one instance")
    for y in labels:
        if y not in (GOOD, BAD):
            raise InputError(f"instance labels must be +1 or -1, got {y!r}")
    return GOOD if GOOD in labels else BAD


def class_index(label: int) -> int:
    """Softmax column for a bag label: 1 for good (+1), 0 for bad (-1)."""
    return 1 if label == GOOD else 0


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray
    label: int
    truth_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise InputError(f"{self.id}: pixels must be a 2-D grid, got shape {self.pixels.shape}")
        if self.label not in (GOOD, BAD):
            raise InputError(f"{self.id}: label must be +1 or -1, got {self.label!r}")
        if self.truth_mask is not None and self.truth_mask.shape != self.pixels.shape:
            raise InputError(f"{self.id}: truth_mask shape {self.truth_mask.shape} != pixels {self.pixels.shape}")


@dataclass
class Dataset:
    items: list[LabeledImage]

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise InputError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {GOOD: 0, BAD: 0}
        for it in self.items:
            counts[it.label] += 1
        return counts

    def by_id(self) -> dict[str, LabeledImage]:
        return {it.id: it for it in self.items}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        lookup = self.by_id()
        return Dataset([lookup[i] for i in ids])


# -- synthetic colonies -------------------------------------------------------


@dataclass
class SyntheticParams:
    """Generator settings; lengths are fractions of the image side so they scale with size."""

    image_size: int = 64
    background: tuple[float, float] = (0.15, 0.40)
    noise_std: float = 0.04
    # good: one or two dense colonies packed with small cells
    colonies: tuple[int, int] = (1, 2)
    colony_radius: tuple[float, float] = (0.17, 0.28)
    colony_cell_radius: float = 0.03
    colony_intensity: tuple[float, float] = (0.55, 0.75)
    # bad: a few isolated, larger and brighter cells
    sparse_cells: tuple[int, int] = (4, 8)
    sparse_cell_radius: tuple[float, float] = (0.045, 0.055)
    sparse_intensity: tuple[float, float] = (0.75, 0.95)
    seed: int = 0

    def validate(self) -> None:
        for name in ("background", "colonies", "colony_radius", "colony_intensity", "sparse_cells",
                     "sparse_cell_radius", "sparse_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: lower bound exceeds upper bound")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")
        if self.colonies[0] < 1 or self.sparse_cells[0] < 1:
            raise ConfigurationError("need at least one colony / cell per image")


def _disk(yy, xx, cy, cx, r) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _render_good(rng: np.random.Generator, p: SyntheticParams):
    n = p.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    bg = rng.uniform(*p.background)
    img = np.full((n, n), bg)
    mask = np.zeros((n, n), bool)
    for _ in range(rng.integers(p.colonies[0], p.colonies[1] + 1)):
        r = rng.uniform(*p.colony_radius) * n
        aspect = rng.uniform(0.75, 1.0)
        theta = rng.uniform(0, math.pi)
        margin = r + 1
        cy, cx = rng.uniform(margin, n - margin, size=2)
        # ragged ellipse: radius modulated by a few low harmonics
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / aspect
        ang = np.arctan2(v, u)
        wobble = 1 + sum(rng.uniform(-0.08, 0.08) * np.cos(k * ang + rng.uniform(0, 2 * math.pi)) for k in (2, 3, 5))
        blob = np.hypot(u, v) <= r * wobble
        mask |= blob
        # densely packed cells on a jittered hexagonal lattice
        cr = max(p.colony_cell_radius * n, 1.0)
        level = rng.uniform(*p.colony_intensity)
        texture = np.full((n, n), level * 0.8)
        step = 2 * cr
        for row, y0 in enumerate(np.arange(cy - r * 1.3, cy + r * 1.3, step * 0.87)):
            for x0 in np.arange(cx - r * 1.3 + (row % 2) * cr, cx + r * 1.3, step):
                jy, jx = rng.normal(0, 0.2 * cr, size=2)
                cell = _disk(yy, xx, y0 + jy, x0 + jx, cr * 0.9)
                texture[cell] = level * rng.uniform(0.95, 1.15)
        img[blob] = texture[blob]
    return img, mask


def _render_bad(rng: np.random.Generator, p: SyntheticParams):
    n = p.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    bg = rng.uniform(*p.background)
    img = np.full((n, n), bg)
    mask = np.zeros((n, n), bool)
    count = rng.integers(p.sparse_cells[0], p.sparse_cells[1] + 1)
    placed: list[tuple[float, float, float]] = []
    attempts = 0
    while len(placed) < count and attempts < 1000:
        attempts += 1
        r = rng.uniform(*p.sparse_cell_radius) * n
        cy, cx = rng.uniform(r + 1, n - r - 1, size=2)
        # sparse: keep at least two diameters between neighbours
        if any(math.hypot(cy - y, cx - x) < 2 * (r + q) for y, x, q in placed):
            continue
        placed.append((cy, cx, r))
        cell = _disk(yy, xx, cy, cx, r)
        img[cell] = rng.uniform(*p.sparse_intensity)
        mask |= cell
    return img, mask


def generate_synthetic(params: SyntheticParams, n_good: int, n_bad: int) -> Dataset:
    """Render ``n_good`` dense-colony and ``n_bad`` sparse-cell images, deterministic in ``params.seed``."""
    params.validate()
    if n_good < 0 or n_bad < 0 or n_good + n_bad == 0:
        raise ConfigurationError("image counts must be non-negative and not both zero")
    seeds = np.random.SeedSequence(params.seed).spawn(n_good + n_bad)
    items = []
    for i in range(n_good + n_bad):
        rng = np.random.default_rng(seeds[i])
        good = i < n_good
        img, mask = (_render_good if good else _render_bad)(rng, params)
        img = img + rng.normal(0, params.noise_std, img.shape)
        ident = f"good_{i:03d}" if good else f"bad_{i - n_good:03d}"
        items.append(LabeledImage(ident, np.clip(img, 0, 1), GOOD if good else BAD, mask))
    return Dataset(items)


# -- augmentation -------------------------------------------------------------

# Rotations are counter-clockwise with the row index read as the upward y axis,
# so rot90 moves pixel (H-1, 0) to (0, 0).
TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def apply_transform(grid: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        return grid.copy()
    if name == "hflip":
        return grid[:, ::-1].copy()
    if name == "vflip":
        return grid[::-1, :].copy()
    if name in ("rot90", "rot180", "rot270"):
        if grid.shape[0] != grid.shape[1]:
            raise InputError(f"rotation needs a square grid, got {grid.shape}")
        return np.rot90(grid, k=-{"rot90": 1, "rot180": 2, "rot270": 3}[name]).copy()
    raise InputError(f"unknown transform {name!r}")


def augment(img: LabeledImage) -> list[LabeledImage]:
    """The six flip/rotation variants of ``img``, identity first."""
    if img.pixels.shape[0] != img.pixels.shape[1]:
        raise InputError(f"{img.id}: augmentation needs a square image, got {img.pixels.shape}")
    out = []
    for name in TRANSFORMS:
        mask = None if img.truth_mask is None else apply_transform(img.truth_mask, name)
        ident = img.id if name == "identity" else f"{img.id}@{name}"
        out.append(LabeledImage(ident, apply_transform(img.pixels, name), img.label, mask))
    return out


# -- splits ---------------------------------------------------------------------


@dataclass
class FoldSplit:
    folds: dict[str, int]
    k: int

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.folds.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.folds.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.test_ids(f)) for f in range(self.k)]


def _shuffled_by_class(dataset: Dataset, seed: int) -> dict[int, list[str]]:
    rng = np.random.default_rng(seed)
    out = {}
    for label in (GOOD, BAD):
        ids = sorted(it.id for it in dataset if it.label == label)
        out[label] = [ids[j] for j in rng.permutation(len(ids))]
    return out


def kfold_split(dataset: Dataset, k: int, seed: int) -> FoldSplit:
    """Stratified partition into ``k`` folds.

    Each class is shuffled, then good and bad ids are dealt round-robin in one
    pass, so fold sizes differ by at most one overall and per class.
    """
    counts = dataset.class_counts
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if k > min(counts.values()):
        raise ConfigurationError(f"k={k} exceeds the smallest class count {min(counts.values())}")
    by_class = _shuffled_by_class(dataset, seed)
    ordered = by_class[GOOD] + by_class[BAD]
    return FoldSplit({ident: pos % k for pos, ident in enumerate(ordered)}, k)


def holdout_split(dataset: Dataset, n_train_good: int, n_train_bad: int, seed: int) -> tuple[Dataset, Dataset]:
    counts = dataset.class_counts
    if not (0 <= n_train_good <= counts[GOOD] and 0 <= n_train_bad <= counts[BAD]):
        raise ConfigurationError(
            f"cannot take {n_train_good} good / {n_train_bad} bad for training from "
            f"{counts[GOOD]} good / {counts[BAD]} bad"
        )
    by_class = _shuffled_by_class(dataset, seed)
    train = set(by_class[GOOD][:n_train_good] + by_class[BAD][:n_train_bad])
    return (
        Dataset([it for it in dataset if it.id in train]),
        Dataset([it for it in dataset if it.id not in train]),
    )


# -- PGM I/O ----------------------------------------------------------------------


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes with round-half-up, so 0.5 becomes 128."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, pixels: np.ndarray) -> None:
    """Write a 2-D grid as binary PGM (P5). Boolean grids become 0/255."""
    grid = np.asarray(pixels)
    if grid.ndim != 2:
        raise InputError(f"expected a 2-D grid, got shape {grid.shape}")
    data = grid.astype(np.uint8) * 255 if grid.dtype == bool else quantize(grid)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_image(path) -> np.ndarray:
    """Read a P5 PGM into a float grid in [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after PGM header")
    pos += 1
    body = raw[pos:]
    if len(body) != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def load_mask(path) -> np.ndarray:
    return load_image(path) >= 0.5


# -- dataset directories ------------------------------------------------------------


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if any(it.truth_mask is not None for it in dataset):
        (root / "masks").mkdir(exist_ok=True)
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for it in dataset:
            save_image(root / "images" / f"{it.id}.pgm", it.pixels)
            if it.truth_mask is not None:
                save_image(root / "masks" / f"{it.id}.pgm", it.truth_mask.astype(bool))
            writer.writerow([it.id, LABEL_NAMES[it.label]])


def load_dataset(root) -> Dataset:
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise FileNotFoundError(f"{labels_path} not found")
    items = []
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label"]:
            raise InputError(f"{labels_path}: header must be id,label")
        for row in reader:
            if row["label"] not in LABEL_VALUES:
                raise InputError(f"{labels_path}: label {row['label']!r} not in good/bad")
            ident = row["id"]
            mask_path = root / "masks" / f"{ident}.pgm"
            mask = load_mask(mask_path) if mask_path.is_file() else None
            items.append(LabeledImage(ident, load_image(root / "images" / f"{ident}.pgm"), LABEL_VALUES[row["label"]], mask))
    return Dataset(items)


def write_folds(split: FoldSplit, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "fold"])
        for ident, fold in split.folds.items():
            writer.writerow([ident, fold])


def read_folds(path) -> FoldSplit:
    with open(path, newline="", encoding="utf-8") as fh:
        folds = {row["id"]: int(row["fold"]) for row in csv.DictReader(fh)}
    return FoldSplit(folds, max(folds.values()) + 1 if folds else 0)


def to_batch(images: Sequence[LabeledImage], dtype=np.float32) -> np.ndarray:
    """Stack images into an N x 1 x H x W array."""
    return np.stack([it.pixels for it in images])[:, None].astype(dtype)
