"""
Domain-shift datasets, IDX ingestion, sample weighting and batching.

Target labels live on ``DomainDataset`` for accuracy reporting only. Training
code receives a ``TrainingView``, which has no attribute holding them.
"""
import csv
import enum
import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from sklearn.datasets import make_blobs, make_moons

from .exceptions import DataError, IdxFormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TrainingView:
    """What training code may see: everything except target labels."""

    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    num_classes: int

    @property
    def n_s(self):
        return self.source_features.shape[0]

    @property
    def n_t(self):
        return self.target_features.shape[0]


@dataclass(frozen=True, eq=False)
class DomainDataset:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    num_classes: int
    target_labels: Optional[np.ndarray] = None
    name: str = 'dataset'

    def __post_init__(self):
        object.__setattr__(self, 'source_features', _frozen(self.source_features, np.float64))
        object.__setattr__(self, 'source_labels', _frozen(self.source_labels, np.int64))
        object.__setattr__(self, 'target_features', _frozen(self.target_features, np.float64))
        if self.target_labels is not None:
            object.__setattr__(self, 'target_labels', _frozen(self.target_labels, np.int64))
        self._validate()

    def _validate(self):
        xs, ys, xt = self.source_features, self.source_labels, self.target_features
        if xs.ndim != 2 or xt.ndim != 2:
            raise DataError('features must be 2-D matrices')
        if xs.shape[0] < 1 or xt.shape[0] < 1:
            raise DataError('both domains need at least one sample')
        if xs.shape[1] != xt.shape[1]:
            raise DataError(f"feature width mismatch: source {xs.shape[1]}, target {xt.shape[1]}")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(xt))):
            raise DataError('features must be finite')
        if ys.shape != (xs.shape[0],):
            raise DataError(f"expected {xs.shape[0]} source labels, got {ys.shape[0]}")
        if self.num_classes < 1:
            raise DataError('num_classes must be positive')
        labels = [ys] if self.target_labels is None else [ys, self.target_labels]
        for y in labels:
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.target_labels is not None and self.target_labels.shape != (xt.shape[0],):
            raise DataError(f"expected {xt.shape[0]} target labels, got {self.target_labels.shape[0]}")

    @property
    def n_s(self):
        return self.source_features.shape[0]

    @property
    def n_t(self):
        return self.target_features.shape[0]

    @property
    def input_dim(self):
        return self.source_features.shape[1]

    def training_view(self):
        return TrainingView(
            source_features=self.source_features,
            source_labels=self.source_labels,
            target_features=self.target_features,
            num_classes=self.num_classes,
        )


# Synthetic generators

def rotate_and_translate(points, rotation_degrees, translation=(0.0, 0.0)):
    """Rotate 2-D points about the origin, then translate them."""
    theta = math.radians(rotation_degrees)
    rotation = np.array([[math.cos(theta), -math.sin(theta)],
                         [math.sin(theta), math.cos(theta)]])
    return np.asarray(points, dtype=np.float64) @ rotation.T + np.asarray(translation, dtype=np.float64)


def make_two_moons_shift(n_source, n_target, rotation_degrees=30.0, translation=(0.0, 0.0),
                         noise_std=0.1, seed=0):
    """Two-moons source; target drawn from the same generator then rotated and translated."""
    if n_source < 4 or n_target < 4:
        raise DataError('two-moons needs at least 2 samples per class in each domain')
    if noise_std < 0:
        raise DataError('noise_std must be non-negative')
    if len(translation) != 2:
        raise DataError('translation must be a 2-vector')

    source_seed, target_seed = np.random.SeedSequence(seed).generate_state(2)
    xs, ys = make_moons(n_samples=n_source, noise=noise_std, random_state=int(source_seed))
    xt, yt = make_moons(n_samples=n_target, noise=noise_std, random_state=int(target_seed))
    xt = rotate_and_translate(xt, rotation_degrees, translation)

    return DomainDataset(xs, ys, xt, num_classes=2, target_labels=yt,
                         name=f'two-moons-rot{rotation_degrees:g}')


def make_blobs_shift(n_source, n_target, num_classes=3, num_features=2, shift=None,
                     noise_std=1.0, seed=0):
    """Gaussian blobs sharing centers; the target domain is translated by ``shift``."""
    if num_classes < 2:
        raise DataError('blobs need at least two classes')
    if n_source < 2 * num_classes or n_target < 2 * num_classes:
        raise DataError('blobs need at least 2 samples per class in each domain')
    if noise_std < 0:
        raise DataError('noise_std must be non-negative')
    shift = np.zeros(num_features) if shift is None else np.asarray(shift, dtype=np.float64)
    if shift.shape != (num_features,):
        raise DataError(f"shift must have {num_features} entries")

    center_seed, source_seed, target_seed = np.random.SeedSequence(seed).generate_state(3)
    centers = np.random.default_rng(int(center_seed)).uniform(-5.0, 5.0, size=(num_classes, num_features))
    xs, ys = make_blobs(n_samples=n_source, centers=centers, cluster_std=noise_std,
                        random_state=int(source_seed))
    xt, yt = make_blobs(n_samples=n_target, centers=centers, cluster_std=noise_std,
                        random_state=int(target_seed))

    return DomainDataset(xs, ys, xt + shift, num_classes=num_classes, target_labels=yt,
                         name=f'blobs-k{num_classes}')


# IDX ingestion

def _open_binary(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    return gzip.open(path, 'rb') if path.suffix == '.gz' else open(path, 'rb')


def _read_header(handle, path, expected_magic, fields):
    size = 4 * (1 + fields)
    header = handle.read(size)
    if len(header) < size:
        raise IdxFormatError(f"{path}: truncated header")
    magic, *dims = struct.unpack(f'>{1 + fields}I', header)
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return dims


def _unsigned_bytes(buffer, count):
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.frombuffer(buffer, dtype=np.uint8, count=count)


def load_idx(images_path, labels_path, max_count=None, image_size=None):
    """Read an IDX image/label pair into a [count x rows*cols] matrix in [0, 1].

    ``image_size`` as (rows, cols) resizes every image with bilinear
    resampling before flattening.
    """
    with _open_binary(images_path) as handle:
        count, rows, cols = _read_header(handle, images_path, IDX_IMAGE_MAGIC, 3)
        image_bytes = handle.read()
    with _open_binary(labels_path) as handle:
        (label_count,) = _read_header(handle, labels_path, IDX_LABEL_MAGIC, 1)
        label_bytes = handle.read()

    if count != label_count:
        raise IdxFormatError(f"{count} images but {label_count} labels")
    if len(image_bytes) < count * rows * cols:
        raise IdxFormatError(f"{images_path}: truncated pixel data")
    if len(label_bytes) < label_count:
        raise IdxFormatError(f"{labels_path}: truncated label data")

    if max_count is not None:
        count = min(count, int(max_count))

    images = _unsigned_bytes(image_bytes, count * rows * cols).reshape(count, rows, cols)
    labels = _unsigned_bytes(label_bytes, count).astype(np.int64)

    if image_size is not None and tuple(image_size) != (rows, cols):
        out_rows, out_cols = image_size
        images = np.stack([
            np.asarray(Image.fromarray(img).resize((out_cols, out_rows), Image.BILINEAR))
            for img in images
        ]) if count else np.zeros((0, out_rows, out_cols), dtype=np.uint8)
        rows, cols = out_rows, out_cols

    features = images.reshape(count, rows * cols).astype(np.float64) / 255.0
    logger.info("Loaded %d images (%dx%d) from %s", count, rows, cols, images_path)
    return features, labels


def make_idx_domains(source_images, source_labels, target_images, target_labels,
                     max_source=None, max_target=None, image_size=(28, 28), num_classes=10):
    """Digit-style domain pair from two IDX pairs resized to a common size."""
    xs, ys = load_idx(source_images, source_labels, max_source, image_size)
    xt, yt = load_idx(target_images, target_labels, max_target, image_size)
    return DomainDataset(xs, ys, xt, num_classes=num_classes, target_labels=yt,
                         name=f'{Path(source_images).stem}->{Path(target_images).stem}')


# Sample weighting

@dataclass(frozen=True)
class SampleWeights:
    source: float
    target: float


def weight_samples(dataset, a=0.5):
    """Domain-size rebalancing coefficients w_s = a(1 + n_t/n_s), w_t = a(1 + n_s/n_t)."""
    if not 0.0 < a <= 1.0:
        raise DataError(f"sample weighting strength a must lie in (0, 1], got {a}")
    n_s, n_t = dataset.n_s, dataset.n_t
    if n_s < 1 or n_t < 1:
        raise DataError('both domains need at least one sample')
    return SampleWeights(source=a * (1.0 + n_t / n_s), target=a * (1.0 + n_s / n_t))


def weighted_mass_ratio(dataset, weights):
    """Source share of the total weighted mass."""
    source_mass = weights.source * dataset.n_s
    return source_mass / (source_mass + weights.target * dataset.n_t)


@dataclass(frozen=True, eq=False)
class WeightedBatch:
    source_inputs: np.ndarray
    source_labels: np.ndarray
    target_inputs: np.ndarray
    w_s: float
    w_t: float


class WeightingScheme(str, enum.Enum):
    """How the rebalancing coefficients reach training.

    ``sampling`` draws equal-sized source and target halves per batch, so
    each domain carries half the mass exactly as the weighted sum would.
    ``input`` multiplies every input row by its domain coefficient.
    """

    SAMPLING = 'sampling'
    INPUT = 'input'


class BatchIterator:
    """Yields paired source and target mini-batches.

    With weighting on (or under the ``input`` scheme) both halves hold
    ``batch_size`` rows and an epoch covers the larger domain once, reshuffling
    and reusing the smaller one. With weighting off under ``sampling`` the
    halves follow the natural domain proportions of ``2 * batch_size`` rows.
    """

    def __init__(self, view, batch_size, a=0.5, seed=0, weighting=True,
                 scheme=WeightingScheme.SAMPLING):
        if batch_size < 2:
            raise DataError(f"batch_size must be at least 2, got {batch_size}")
        scheme = WeightingScheme(scheme)
        self.view = view
        self.scheme = scheme
        self.weights = weight_samples(view, a) if weighting else SampleWeights(1.0, 1.0)
        self.input_scale = self.weights if scheme is WeightingScheme.INPUT else SampleWeights(1.0, 1.0)
        self.batch_size = min(batch_size, view.n_s, view.n_t)
        if self.batch_size < batch_size:
            logger.warning("Batch size %d exceeds a domain size; using %d", batch_size, self.batch_size)

        if weighting or scheme is WeightingScheme.INPUT:
            self.source_batch = self.target_batch = self.batch_size
        else:
            pair = 2 * self.batch_size
            share = round(pair * view.n_s / (view.n_s + view.n_t))
            self.source_batch = min(max(1, share), pair - 1)
            self.target_batch = pair - self.source_batch
        self._rng = np.random.default_rng(seed)
        self._source = view.source_features * self.input_scale.source
        self._target = view.target_features * self.input_scale.target

    @property
    def paired(self):
        return self.source_batch == self.target_batch

    def __len__(self):
        if self.paired:
            return math.ceil(max(self.view.n_s, self.view.n_t) / self.batch_size)
        return max(math.ceil(self.view.n_s / self.source_batch),
                   math.ceil(self.view.n_t / self.target_batch))

    def _order(self, n, rows):
        reps = math.ceil(rows / n)
        return np.concatenate([self._rng.permutation(n) for _ in range(reps)])[:rows]

    def epoch(self):
        """Yield one epoch of batches; each call reshuffles both domains."""
        count = len(self)
        if self.paired:
            rows = max(self.view.n_s, self.view.n_t)
            source_order = self._order(self.view.n_s, rows)
            target_order = self._order(self.view.n_t, rows)
        else:
            source_order = self._order(self.view.n_s, count * self.source_batch)
            target_order = self._order(self.view.n_t, count * self.target_batch)
        for i in range(count):
            s_idx = source_order[i * self.source_batch:(i + 1) * self.source_batch]
            t_idx = target_order[i * self.target_batch:(i + 1) * self.target_batch]
            yield WeightedBatch(
                source_inputs=self._source[s_idx],
                source_labels=self.view.source_labels[s_idx],
                target_inputs=self._target[t_idx],
                w_s=self.weights.source,
                w_t=self.weights.target,
            )

    def __iter__(self):
        return self.epoch()


def batch_iter(view, batch_size, a=0.5, seed=0, weighting=True, scheme=WeightingScheme.SAMPLING):
    return BatchIterator(view, batch_size, a=a, seed=seed, weighting=weighting, scheme=scheme)


def export_dataset(dataset, path, training_view=True):
    """CSV with header ``domain,label,f0..fd-1``; target labels blank in the training view."""
    width = dataset.input_dim
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['domain', 'label'] + [f'f{i}' for i in range(width)])
        for row, label in zip(dataset.source_features, dataset.source_labels):
            writer.writerow(['source', int(label)] + [repr(float(v)) for v in row])
        for i, row in enumerate(dataset.target_features):
            if training_view or dataset.target_labels is None:
                label = ''
            else:
                label = int(dataset.target_labels[i])
            writer.writerow(['target', label] + [repr(float(v)) for v in row])
