"""Dataset ingestion and generation: IDX image/label files (big-endian
headers, unsigned-byte payloads), a sparse-teacher regression generator,
a deterministic synthetic image-classification generator for offline runs,
and seeded batch iteration.

No network access happens here; scripts/fetch_mnist.py documents where the
standard IDX files live.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Seed-stream tags for the generators below.
_TEACHER_WEIGHTS = 0
_TEACHER_INPUTS = 1
_TEACHER_NOISE = 2
_IMAGE_PROTOS = 0
_IMAGE_SAMPLES = 1


class IdxFormatError(ValueError):
    """File is not an IDX image/label file (bad or unsupported magic)."""


class IdxTruncatedError(IdxFormatError):
    """Payload size disagrees with the declared dimensions."""


@dataclass
class Dataset:
    """Input rows paired with class indices or regression targets."""

    inputs: Tensor
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )

    @property
    def num_examples(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return int(np.prod(self.inputs.shape[1:]))

    def arrays(self):
        x = self.inputs.to_array().reshape(self.num_examples, -1)
        return x, self.targets


def load_idx(path):
    """Parse one IDX file into an array.

    Image files (magic 0x00000803, dims count x rows x cols) come back as
    float32 (count, rows*cols) scaled to [0, 1]; label files (magic
    0x00000801) as int64 (count,).
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: too short for a magic number")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"{path}: unrecognized magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    expected = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size != expected:
        raise IdxTruncatedError(
            f"{path}: dims {dims} need {expected} bytes, payload has {payload.size}"
        )
    if magic == IDX_LABEL_MAGIC:
        return payload.astype(np.int64)
    images = payload.reshape(dims[0], dims[1] * dims[2])
    return (images.astype(np.float32) / np.float32(255.0))


def save_idx(path, array):
    """Write an IDX file: uint8 images (num, rows, cols) or labels (num,)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim == 3:
        header = struct.pack(">i3i", IDX_IMAGE_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        header = struct.pack(">ii", IDX_LABEL_MAGIC, arr.shape[0])
    else:
        raise ValueError("expected (num, rows, cols) images or (num,) labels")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def load_idx_dataset(images_path, labels_path, split="train"):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 2:
        raise IdxFormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a label file")
    return Dataset(Tensor.from_array(images), labels, split=split)


@dataclass(frozen=True)
class TeacherSpec:
    """Sparse random teacher MLP that labels the regression task."""

    layer_sizes: tuple = (64, 64, 32, 1)
    teacher_sparsity: float = 0.8
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.teacher_sparsity < 1.0:
            raise ValueError("teacher_sparsity must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def teacher_params(spec):
    """Deterministic sparse teacher weights (float64, biases zero)."""
    weights = []
    for i in range(len(spec.layer_sizes) - 1):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        rng = np.random.default_rng([spec.seed, _TEACHER_WEIGHTS, i])
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        n_zero = int(np.floor(spec.teacher_sparsity * w.size + 0.5))
        zero_at = rng.permutation(w.size)[:n_zero]
        flat = w.reshape(-1)
        flat[zero_at] = 0.0
        weights.append(w)
    return weights


def teacher_forward(weights, x):
    h = x
    for i, w in enumerate(weights):
        h = h @ w
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h


def synth_teacher_student(spec, num_examples, split="train", example_offset=0):
    """Standard-normal inputs labeled by the sparse teacher plus noise.

    Fully seeded: the same spec and offsets reproduce identical datasets.
    example_offset shifts the input/noise streams so train and test splits
    draw disjoint examples from one deterministic sequence.
    """
    weights = teacher_params(spec)
    rng_x = np.random.default_rng([spec.seed, _TEACHER_INPUTS])
    rng_n = np.random.default_rng([spec.seed, _TEACHER_NOISE])
    total = example_offset + num_examples
    x = rng_x.normal(size=(total, spec.layer_sizes[0]))[example_offset:]
    y = teacher_forward(weights, x)
    if spec.noise_sigma > 0:
        y = y + spec.noise_sigma * rng_n.normal(size=(total, y.shape[1]))[example_offset:]
    return Dataset(Tensor.from_array(x), y, split=split)


def make_image_classes(num_examples, seed, num_classes=10, image_shape=(10, 10),
                       support_frac=0.35, noise=0.55, example_offset=0):
    """Deterministic synthetic image-classification data in IDX range.

    Each class is a fixed sparse prototype (a random subset of pixels with
    random intensities); samples scale the prototype by a random brightness
    and add Gaussian pixel noise before quantizing to uint8. Difficulty is
    set by the noise level and prototype overlap. Returns uint8 images
    (num, rows, cols) and int labels, ready for save_idx.
    """
    rows, cols = image_shape
    npix = rows * cols
    proto_rng = np.random.default_rng([seed, _IMAGE_PROTOS])
    protos = np.zeros((num_classes, npix))
    for c in range(num_classes):
        support = proto_rng.choice(npix, size=max(1, int(support_frac * npix)), replace=False)
        protos[c, support] = proto_rng.uniform(0.45, 1.0, size=support.size)
    rng = np.random.default_rng([seed, _IMAGE_SAMPLES])
    total = example_offset + num_examples
    labels = rng.integers(0, num_classes, size=total)
    brightness = rng.uniform(0.75, 1.25, size=(total, 1))
    pixels = protos[labels] * brightness + rng.normal(0.0, noise, size=(total, npix))
    images = np.clip(pixels, 0.0, 1.0)
    images = np.round(images * 255.0).astype(np.uint8)
    images = images[example_offset:].reshape(-1, rows, cols)
    return images, labels[example_offset:].astype(np.int64)


class BatchCursor:
    """Deterministic random-access batching over a dataset.

    Each epoch visits every example exactly once under a shuffle keyed by
    (seed, epoch), so the batch for any global step is a pure function of
    (dataset, batch_size, seed, step). That property is what makes resumed
    runs replay the identical batch sequence.
    """

    def __init__(self, dataset, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.x, self.y = dataset.arrays()
        self.n = dataset.num_examples
        self.batch_size = batch_size
        self.seed_key = list(seed) if isinstance(seed, (list, tuple)) else [seed]
        self.batches_per_epoch = (self.n + batch_size - 1) // batch_size
        self._epoch = None
        self._perm = None

    def _permutation(self, epoch):
        if epoch != self._epoch:
            rng = np.random.default_rng(self.seed_key + [epoch])
            self._perm = rng.permutation(self.n)
            self._epoch = epoch
        return self._perm

    def batch_for_step(self, step):
        epoch, slot = divmod(step, self.batches_per_epoch)
        perm = self._permutation(epoch)
        idx = perm[slot * self.batch_size : (slot + 1) * self.batch_size]
        return self.x[idx], self.y[idx]
