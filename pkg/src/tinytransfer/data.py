"""Dataset ingestion, synthetic corpus generation, folds, and batches.

Images are C,H,W float64 arrays in [0,1]. Every random choice here is a
pure function of explicit seeds plus structural indices (class, sample,
epoch), so datasets, folds, shuffles, and augmentation streams reproduce
bit-for-bit and are safe to parallelize.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .report_io import write_atomic_bytes, write_csv

_SHUFFLE_SALT = 101
_AUGMENT_SALT = 202
_SOURCE_SALT = 11
_TARGET_SALT = 22


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    id: str


@dataclass
class ChannelStats:
    """Per-channel mean/std; zero std falls back to 1 (constant channel)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise DataError("channel stats must be finite")
        if (self.std == 0).any():
            warnings.warn("constant channel: substituting std=1 for standardization")
            self.std = np.where(self.std == 0, 1.0, self.std)

    def apply(self, images):
        """Standardize a C,H,W image or an N,C,H,W batch."""
        shape = (-1, 1, 1) if images.ndim == 3 else (1, -1, 1, 1)
        return (images - self.mean.reshape(shape)) / self.std.reshape(shape)


@dataclass
class LabeledDataset:
    samples: list
    class_names: list
    channel_stats: ChannelStats | None = None

    def __post_init__(self):
        ids = set()
        counts = [0] * len(self.class_names)
        for s in self.samples:
            if s.id in ids:
                raise DataError(f"duplicate sample id {s.id!r}")
            ids.add(s.id)
            if not 0 <= s.label < len(self.class_names):
                raise DataError(f"sample {s.id!r}: label {s.label} out of range")
            counts[s.label] += 1
        for name, n in zip(self.class_names, counts):
            if n == 0:
                raise DataError(f"class {name!r} has no samples")

    def __len__(self):
        return len(self.samples)

    @property
    def class_count(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return self.samples[0].image.shape

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def ids(self):
        return [s.id for s in self.samples]


@dataclass
class TransferSetting:
    """Source and target corpora sharing one input space."""

    source: LabeledDataset
    target: LabeledDataset

    def __post_init__(self):
        if self.source.image_shape != self.target.image_shape:
            raise ConfigurationError(
                f"source input shape {self.source.image_shape} != target "
                f"{self.target.image_shape}")

    @property
    def input_shape(self):
        return self.source.image_shape


@dataclass
class AugmentPolicy:
    flip_h: float = 0.0
    flip_v: float = 0.0
    max_rotate: float = 0.0
    max_zoom: float = 1.0
    max_lighting: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.flip_h <= 1.0 and 0.0 <= self.flip_v <= 1.0):
            raise ConfigurationError("flip probabilities must lie in [0, 1]")
        if self.max_zoom < 1.0:
            raise ConfigurationError(f"max_zoom must be >= 1, got {self.max_zoom}")
        if self.max_rotate < 0.0 or self.max_lighting < 0.0:
            raise ConfigurationError("max_rotate and max_lighting must be >= 0")


# ---------------------------------------------------------------------------
# PGM (P5) files

def read_pgm(path):
    """Decode an 8-bit binary PGM into a H,W uint8 array."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: unreadable ({exc})")
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        ch = raw[i:i + 1]
        if ch == b"#":
            i = raw.find(b"\n", i)
            if i < 0:
                break
            continue
        if ch.isspace():
            i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        tokens.append(raw[i:j])
        i = j
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header")
    if maxval > 255 or maxval < 1 or width < 1 or height < 1:
        raise DataError(f"{path}: unsupported PGM header (maxval {maxval})")
    pixels = raw[i + 1:i + 1 + width * height]
    if len(pixels) != width * height:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def write_pgm(path, image):
    """Write a H,W uint8 array as binary PGM."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    write_atomic_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


# ---------------------------------------------------------------------------
# Bilinear resampling

def _bilinear_sample(image, ys, xs, fill="edge"):
    """Sample C,H,W ``image`` at float coords; ``fill`` handles out-of-range."""
    c, h, w = image.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0

    def gather(yi, xi):
        if fill == "edge":
            return image[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = image[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return vals * inside

    top = gather(y0, x0) * (1 - wx) + gather(y0, x0 + 1) * wx
    bottom = gather(y0 + 1, x0) * (1 - wx) + gather(y0 + 1, x0 + 1) * wx
    return top * (1 - wy) + bottom * wy


def resize(image, out_h, out_w):
    """Bilinear resize of a C,H,W image (edge-clamped sampling)."""
    c, h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return _bilinear_sample(image, ys[:, None] + np.zeros(out_w), np.zeros((out_h, 1)) + xs)


def rotate(image, degrees):
    """Rotate about the image center; corners uncovered by the source are zero."""
    c, h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    # inverse mapping: output pixel pulls from the pre-rotation location
    ys = cy + np.cos(theta) * dy + np.sin(theta) * dx
    xs = cx - np.sin(theta) * dy + np.cos(theta) * dx
    return _bilinear_sample(image, ys, xs, fill="zero")


def center_zoom(image, factor):
    """Zoom in by cropping the central 1/factor window and resizing back."""
    c, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = cy + ((np.arange(h) - cy) / factor)[:, None] + np.zeros(w)
    xs = cx + np.zeros((h, 1)) + (np.arange(w) - cx) / factor
    return _bilinear_sample(image, ys, xs)


# ---------------------------------------------------------------------------
# Directory loading

def load_directory(root, image_size=None):
    """Load `root/<class>/*.pgm` into a dataset, scaled to [0,1].

    Class names are the sorted subdirectory names; samples are ordered by
    (class, filename). ``image_size`` triggers a bilinear resize.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    class_names = [d.name for d in class_dirs]
    samples = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.pgm"))
        if not files:
            raise DataError(f"{class_dir}: empty class directory")
        for path in files:
            image = read_pgm(path).astype(np.float64) / 255.0
            image = image[None, :, :]
            if image_size is not None and image.shape[1:] != (image_size, image_size):
                image = resize(image, image_size, image_size)
            samples.append(LabeledSample(image, label, f"{class_dir.name}/{path.stem}"))
    return LabeledDataset(samples, class_names)


def save_dataset(dataset, root):
    """Write a dataset back out as `root/<class>/<id>.pgm` (8-bit quantized)."""
    root = Path(root)
    for s in dataset.samples:
        class_name = dataset.class_names[s.label]
        stem = s.id.split("/")[-1]
        img = np.clip(np.round(s.image[0] * 255.0), 0, 255).astype(np.uint8)
        write_pgm(root / class_name / f"{stem}.pgm", img)


# ---------------------------------------------------------------------------
# Synthetic shape corpus

_SHAPE_KINDS = ["ellipse", "rect", "annulus", "cross", "blobs", "stripes", "triangle", "dots"]


def _family_mask(family, u, v, rng):
    """Foreground mask for shape family ``family`` at unit coords (u, v)."""
    kind = _SHAPE_KINDS[family % len(_SHAPE_KINDS)]
    variant = family // len(_SHAPE_KINDS)
    pick = lambda opts: opts[variant % len(opts)]
    if kind == "ellipse":
        aspect = pick([0.95, 0.45, 0.65])
        return (u ** 2 + (v / aspect) ** 2) <= 1.0
    if kind == "rect":
        aspect = pick([0.9, 0.4, 0.6])
        return (np.abs(u) <= 1.0) & (np.abs(v) <= aspect)
    if kind == "annulus":
        inner = pick([0.55, 0.35, 0.7])
        r = np.sqrt(u ** 2 + v ** 2)
        return (r >= inner) & (r <= 1.0)
    if kind == "cross":
        width = pick([0.3, 0.18, 0.45])
        return ((np.abs(u) <= width) & (np.abs(v) <= 1.0)) | \
               ((np.abs(v) <= width) & (np.abs(u) <= 1.0))
    if kind == "blobs":
        count = pick([2, 3, 4])
        centers = rng.uniform(-0.6, 0.6, size=(count, 2))
        mask = np.zeros_like(u, dtype=bool)
        for cy, cx in centers:
            mask |= ((u - cx) ** 2 + (v - cy) ** 2) <= 0.35 ** 2
        return mask
    if kind == "stripes":
        freq = pick([1.5, 2.5, 3.5])
        box = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        return box & (np.floor((u + 1.0) * freq).astype(int) % 2 == 0)
    if kind == "triangle":
        slope = pick([2.0, 1.2, 3.0])
        return (v >= -0.8) & (v <= slope * u + 0.8) & (v <= -slope * u + 0.8)
    # dots
    freq = pick([2.0, 3.0, 2.5])
    box = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    gu = (u + 1.0) * freq % 1.0 - 0.5
    gv = (v + 1.0) * freq % 1.0 - 0.5
    return box & ((gu ** 2 + gv ** 2) <= 0.3 ** 2)


def _render_shape(family, size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    span = (size - 1) / 2.0
    y = (yy - span) / span
    x = (xx - span) / span
    cx, cy = rng.uniform(-0.18, 0.18, size=2)
    scale = rng.uniform(0.5, 0.78)
    theta = rng.uniform(-0.35, 0.35)
    u = (np.cos(theta) * (x - cx) + np.sin(theta) * (y - cy)) / scale
    v = (-np.sin(theta) * (x - cx) + np.cos(theta) * (y - cy)) / scale
    mask = _family_mask(family, u, v, rng)
    background = rng.uniform(0.03, 0.12)
    foreground = rng.uniform(0.55, 0.95)
    img = background + (foreground - background) * mask
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None, :, :]


def family_class_name(family):
    kind = _SHAPE_KINDS[family % len(_SHAPE_KINDS)]
    variant = family // len(_SHAPE_KINDS)
    return f"c{family:02d}_{kind}{variant}"


def synthetic_dataset(seed, families, counts, image_size, domain_salt=0):
    """Render one dataset: ``counts[i]`` samples of shape family ``families[i]``."""
    if image_size < 16:
        raise ConfigurationError(f"image_size must be >= 16, got {image_size}")
    if len(families) != len(counts):
        raise ConfigurationError("families and counts must align")
    class_names = [family_class_name(f) for f in families]
    samples = []
    for label, (family, count) in enumerate(zip(families, counts)):
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence((seed, domain_salt, family, i)))
            image = _render_shape(family, image_size, rng)
            samples.append(LabeledSample(image, label, f"{class_names[label]}/{i:04d}"))
    return LabeledDataset(samples, class_names)


def make_synthetic_transfer_task(seed, source_classes, target_classes, samples_per_class,
                                 image_size, target_samples_per_class=None):
    """Build a source corpus plus a held-out-family target corpus.

    Target classes use shape families the source never saw, so low-level
    statistics transfer while the tasks stay distinct.
    """
    if source_classes < 2 or target_classes < 2:
        raise ConfigurationError("need at least 2 source and 2 target classes")
    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be positive")
    if target_samples_per_class is None:
        target_samples_per_class = samples_per_class
    source = synthetic_dataset(seed, list(range(source_classes)),
                               [samples_per_class] * source_classes,
                               image_size, domain_salt=_SOURCE_SALT)
    target_families = list(range(source_classes, source_classes + target_classes))
    target = synthetic_dataset(seed, target_families,
                               [target_samples_per_class] * target_classes,
                               image_size, domain_salt=_TARGET_SALT)
    return TransferSetting(source, target)


# ---------------------------------------------------------------------------
# Standardization

def compute_channel_stats(dataset, sample_indices=None):
    """Per-channel mean/std over the given subset (default: all samples)."""
    if sample_indices is None:
        sample_indices = range(len(dataset))
    stack = np.stack([dataset.samples[i].image for i in sample_indices])
    return ChannelStats(stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3)))


def standardize(dataset, stats):
    """New dataset with every image shifted/scaled by the given stats."""
    samples = [LabeledSample(stats.apply(s.image), s.label, s.id) for s in dataset.samples]
    return LabeledDataset(samples, list(dataset.class_names), channel_stats=stats)


# ---------------------------------------------------------------------------
# Augmentation

def augment(sample, policy, rng):
    """Apply flip -> rotate -> zoom -> lighting; the label never changes.

    An all-identity policy returns the image bit-for-bit unchanged.
    """
    img = sample.image
    if rng.random() < policy.flip_h:
        img = img[:, :, ::-1]
    if rng.random() < policy.flip_v:
        img = img[:, ::-1, :]
    if policy.max_rotate > 0:
        angle = rng.uniform(-policy.max_rotate, policy.max_rotate)
        if angle != 0.0:
            img = rotate(img, angle)
    if policy.max_zoom > 1.0:
        factor = rng.uniform(1.0, policy.max_zoom)
        if factor != 1.0:
            img = center_zoom(img, factor)
    if policy.max_lighting > 0:
        brightness = rng.uniform(-policy.max_lighting, policy.max_lighting)
        contrast = 1.0 + rng.uniform(-policy.max_lighting, policy.max_lighting)
        img = np.clip((img - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    return LabeledSample(np.ascontiguousarray(img), sample.label, sample.id)


# ---------------------------------------------------------------------------
# Stratified folds and batch streams

@dataclass
class FoldPlan:
    k: int
    assignments: dict
    seed: int = 0

    def fold_of(self, sample_id):
        return self.assignments[sample_id]

    def save_csv(self, path):
        rows = sorted(self.assignments.items())
        write_csv(path, ["sample_id", "fold"], rows)


def stratified_kfold(dataset, k, seed):
    """Per-class round-robin assignment after a seeded per-class shuffle.

    Per-class fold counts differ by at most one; classes with fewer than
    k samples simply skip some folds.
    """
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > len(dataset):
        raise ConfigurationError(f"k={k} exceeds dataset size {len(dataset)}")
    assignments = {}
    labels = dataset.labels()
    for label in range(dataset.class_count):
        members = [i for i in range(len(dataset)) if labels[i] == label]
        rng = np.random.default_rng(np.random.SeedSequence((seed, label)))
        order = rng.permutation(len(members))
        for j, pos in enumerate(order):
            assignments[dataset.samples[members[pos]].id] = j % k
    return FoldPlan(k, assignments, seed)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    ids: list


def batches(dataset, plan, fold, split, batch_size, policy=None, seed=0, epoch=0, stats=None):
    """Assemble the batch list for one epoch of one fold.

    Train split: every fold but ``fold``, shuffled per (seed, epoch),
    augmented per-sample with an independent (epoch, sample-index) RNG
    stream. Valid split: fold ``fold`` in dataset order, never augmented.
    The final partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if not 0 <= fold < plan.k:
        raise ConfigurationError(f"fold {fold} outside [0, {plan.k})")
    if split not in ("train", "valid"):
        raise ConfigurationError(f"split must be 'train' or 'valid', got {split!r}")
    in_valid = np.array([plan.fold_of(s.id) == fold for s in dataset.samples])
    indices = np.flatnonzero(~in_valid if split == "train" else in_valid)
    if split == "train":
        rng = np.random.default_rng(np.random.SeedSequence((seed, epoch, _SHUFFLE_SALT)))
        indices = indices[rng.permutation(len(indices))]
    out = []
    policy_seed = policy.seed if policy is not None else 0
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        images, labels, ids = [], [], []
        for idx in chunk:
            sample = dataset.samples[idx]
            if split == "train" and policy is not None:
                stream = np.random.default_rng(
                    np.random.SeedSequence((seed, policy_seed, epoch, int(idx), _AUGMENT_SALT)))
                sample = augment(sample, policy, stream)
            images.append(sample.image)
            labels.append(sample.label)
            ids.append(sample.id)
        x = np.stack(images)
        if stats is not None:
            x = stats.apply(x)
        out.append(Batch(x, np.array(labels, dtype=np.int64), ids))
    return out
