"""Datasets, augmentation, and the three batch samplers.

Two sources: the CIFAR-10 binary files (zero-padded from 32x32 to a 40x40
canvas, standardized per channel with training-split statistics) and a
synthetic Gaussian-blob set (one random template per class plus per-image
noise) that stands in for large sampled datasets at desk scale.

Sampler kinds:

* random             -- fresh permutation each epoch, fixed-size slices,
                        last partial batch dropped.
* balanced           -- one image per class per batch, batch size = class
                        count; per-class lists reshuffled every epoch and
                        class order shuffled inside each batch.
* shuffled-balanced  -- same epoch mechanics as balanced; the distinction
                        matters at evaluation time, where groupings are
                        re-randomized across repeated passes.

With unequal class counts a balanced epoch is max(class count) batches long
and smaller classes fill their slot by sampling with replacement.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import require_finite

RANDOM = "random"
BALANCED = "balanced"
SHUFFLED_BALANCED = "shuffled-balanced"
PLAN_KINDS = (RANDOM, BALANCED, SHUFFLED_BALANCED)

CIFAR_CLASSES = 10
CIFAR_SIZE = 32
CIFAR_CANVAS = 40
_CIFAR_RECORD = 1 + 3 * CIFAR_SIZE * CIFAR_SIZE
_CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    index: int


@dataclass
class Dataset:
    """Immutable labeled image store with per-class index lists.

    images is an (N, C, canvas, canvas) float32 array; crop is the network
    input size taken from the canvas (equal to the canvas when no padding
    was applied).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    crop: int
    name: str = "dataset"
    templates: np.ndarray = None
    class_indices: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("datasets need at least 2 classes")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("labels out of range")
        require_finite(self.images, f"{self.name} images")
        self.class_indices = [np.flatnonzero(self.labels == c)
                              for c in range(self.class_count)]

    def __len__(self):
        return len(self.images)

    def image(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]), i)


def channel_stats(pixels):
    mean = pixels.mean(axis=(0, 2, 3), dtype=np.float64)
    std = pixels.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(std, 1e-6)  # constant channels normalize to zero
    return mean.astype(np.float32), std.astype(np.float32)


def _parse_cifar_file(path):
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing CIFAR-10 file: {path}") from None
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise ValueError(f"bad record count in {path}: {raw.size} bytes is not a "
                         f"multiple of {_CIFAR_RECORD}")
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"label byte > 9 in {path}")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIZE, CIFAR_SIZE)
    return pixels.astype(np.float32) / 255.0, labels


def _pad_canvas(pixels, canvas):
    n, c, h, w = pixels.shape
    off = (canvas - h) // 2
    out = np.zeros((n, c, canvas, canvas), dtype=np.float32)
    out[:, :, off:off + h, off:off + w] = pixels
    return out


def load_cifar10(data_dir, canvas=CIFAR_CANVAS):
    """Parse the CIFAR-10 binary files under data_dir.

    Each record is 1 label byte followed by 3072 pixel bytes (three 32x32
    channel planes, R then G then B). Images are zero-padded onto the
    canvas and standardized with per-channel mean/std computed from the
    training pixels before padding.
    """
    base = data_dir
    if not os.path.exists(os.path.join(base, _CIFAR_TRAIN_FILES[0])):
        nested = os.path.join(base, "cifar-10-batches-bin")
        if os.path.exists(os.path.join(nested, _CIFAR_TRAIN_FILES[0])):
            base = nested
    train_parts = [_parse_cifar_file(os.path.join(base, f)) for f in _CIFAR_TRAIN_FILES]
    train_pixels = np.concatenate([p for p, _ in train_parts])
    train_labels = np.concatenate([l for _, l in train_parts])
    test_pixels, test_labels = _parse_cifar_file(os.path.join(base, _CIFAR_TEST_FILE))
    mean, std = channel_stats(train_pixels)
    mean = mean.reshape(1, -1, 1, 1)
    std = std.reshape(1, -1, 1, 1)

    def finish(pixels, labels, name):
        images = (_pad_canvas(pixels, canvas) - mean) / std
        return Dataset(images, labels, CIFAR_CLASSES, CIFAR_SIZE, name=name)

    return (finish(train_pixels, train_labels, "cifar10-train"),
            finish(test_pixels, test_labels, "cifar10-test"))


def make_synthetic(classes, n_per_class, size, rng, noise, crop=None,
                   sign_symmetric=False):
    """Gaussian-blob dataset: class k = fixed random template_k plus
    per-image Gaussian noise of the given scale. Deterministic under rng.

    crop < canvas leaves headroom for translation augmentation. With
    sign_symmetric each image flips its template by a random +-1 factor, so
    a class is an axis rather than a direction: class evidence then carries
    no first-order signature in batch statistics, which keeps balanced-batch
    structure from being readable by normalization arithmetic alone.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    c, h, w = size
    templates = rng.split(0).gaussian((classes, c, h, w)).astype(np.float32)
    return _synthetic_from_templates(templates, n_per_class, rng.split(1), noise,
                                     name="synthetic", crop=crop,
                                     sign_symmetric=sign_symmetric)


def make_synthetic_split(classes, n_train, n_test, size, rng, noise, crop=None,
                         sign_symmetric=False):
    """Train/test pair drawn around one shared set of class templates."""
    c, h, w = size
    templates = rng.split(0).gaussian((classes, c, h, w)).astype(np.float32)
    train = _synthetic_from_templates(templates, n_train, rng.split(1), noise,
                                      name="synthetic-train", crop=crop,
                                      sign_symmetric=sign_symmetric)
    test = _synthetic_from_templates(templates, n_test, rng.split(2), noise,
                                     name="synthetic-test", crop=crop,
                                     sign_symmetric=sign_symmetric)
    return train, test


def _synthetic_from_templates(templates, n_per_class, rng, noise, name, crop=None,
                              sign_symmetric=False):
    classes = templates.shape[0]
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    images = templates[labels]
    if sign_symmetric:
        signs = (rng.uniform(size=len(labels)) < 0.5).astype(np.float32) * 2 - 1
        images = images * signs[:, None, None, None]
    if noise:
        images = images + noise * rng.gaussian(images.shape)
    images = np.ascontiguousarray(images, dtype=np.float32)
    return Dataset(images, labels, classes, crop or templates.shape[-1], name=name,
                   templates=templates)


@dataclass(frozen=True)
class BatchPlan:
    kind: str
    batch_size: int = 0  # ignored for balanced kinds (forced to class count)

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")


class Sampler:
    """Deterministic batch index stream for one (dataset, plan, rng)."""

    def __init__(self, dataset, plan, rng):
        self.dataset = dataset
        self.plan = plan
        self.rng = rng
        self.epoch = 0
        self._pending = []
        if plan.kind == RANDOM:
            if plan.batch_size < 1:
                raise ValueError("random plan needs batch_size >= 1")
            self.batch_size = plan.batch_size
        else:
            c = dataset.class_count
            if plan.batch_size not in (0, c):
                raise ValueError(f"balanced batch size is always the class count "
                                 f"({c}), got {plan.batch_size}")
            for k, idx in enumerate(dataset.class_indices):
                if len(idx) == 0:
                    raise ValueError(f"balanced plan impossible: class {k} is empty")
            self.batch_size = c

    def batches_per_epoch(self):
        if self.plan.kind == RANDOM:
            return len(self.dataset) // self.batch_size
        return max(len(idx) for idx in self.dataset.class_indices)

    def _plan_epoch(self):
        n = len(self.dataset)
        if self.plan.kind == RANDOM:
            perm = self.rng.permutation(n)
            count = n // self.batch_size
            batches = [perm[t * self.batch_size:(t + 1) * self.batch_size]
                       for t in range(count)]
        else:
            lists = [self.rng.shuffle(idx.copy()) for idx in self.dataset.class_indices]
            count = max(len(lst) for lst in lists)
            batches = []
            for t in range(count):
                picks = np.array([lst[t] if t < len(lst) else self.rng.choice(lst)
                                  for lst in lists])
                self.rng.shuffle(picks)
                batches.append(picks)
        self.epoch += 1
        self._pending = list(reversed(batches))

    def next_batch(self):
        """Returns (images, labels, indices); images are canvas-sized copies."""
        if not self._pending:
            self._plan_epoch()
        indices = self._pending.pop()
        images = self.dataset.images[indices].copy()
        labels = self.dataset.labels[indices].copy()
        return images, labels, indices


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    crop: int = CIFAR_SIZE
    flip: bool = True
    brightness: float = 0.0


def flip_horizontal(images):
    return np.ascontiguousarray(images[:, :, :, ::-1])


def center_crop(images, crop):
    canvas = images.shape[-1]
    if crop > canvas:
        raise ValueError(f"crop {crop} larger than canvas {canvas}")
    off = (canvas - crop) // 2
    return np.ascontiguousarray(images[:, :, off:off + crop, off:off + crop])


def augment(images, rng, config):
    """Training-time augmentation: random crop to config.crop, horizontal
    flip with p=0.5, optional per-channel brightness jitter. Disabled ->
    identity (the caller center-crops instead)."""
    if not config.enabled:
        return images
    m, c, canvas, _ = images.shape
    crop = config.crop
    if crop > canvas:
        raise ValueError(f"crop {crop} larger than canvas {canvas}")
    span = canvas - crop
    offs = rng.integers(0, span + 1, size=(m, 2))
    out = np.empty((m, c, crop, crop), dtype=images.dtype)
    for i in range(m):
        r, col = offs[i]
        out[i] = images[i, :, r:r + crop, col:col + crop]
    if config.flip:
        mask = rng.uniform(size=m) < 0.5
        out[mask] = out[mask][:, :, :, ::-1]
    if config.brightness:
        jitter = rng.uniform(size=(m, c), low=-config.brightness,
                             high=config.brightness).astype(images.dtype)
        out = out + jitter[:, :, None, None]
    return out
