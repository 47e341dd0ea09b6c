import math
from pathlib import Path

import attrs
import numpy as np
import numpy.typing as npt
from attrs import define

from risotto.linalg import Array, RngStream, frozen_array, haar_orthogonal


CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
CIFAR_IMAGE_SHAPE = (3, 32, 32)


class DatasetError(ValueError):
    pass


class FormatError(DatasetError):
    pass


def _labels(value: npt.ArrayLike) -> npt.NDArray[np.int64]:
    result = np.array(value, dtype=np.int64)
    result.flags.writeable = False
    return result


@define(frozen=True)
class Dataset:
    features: Array = attrs.field(converter=frozen_array)
    labels: npt.NDArray[np.int64] = attrs.field(converter=_labels)
    n_classes: int

    def __attrs_post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DatasetError(
                f"Expected an n x d feature matrix and n labels, got shapes "
                f"{self.features.shape} and {self.labels.shape}"
            )
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"Labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("Features contain NaN or Inf entries")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: npt.ArrayLike) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)

    def split(self, test_fraction: float, rng: RngStream) -> tuple["Dataset", "Dataset"]:
        """A shuffled ``(train, test)`` split with ``round(test_fraction * n)``
        test samples."""
        if not 0 < test_fraction < 1:
            raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
        order = rng.generator().permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(order[n_test:]), self.subset(order[:n_test])


def synth_blobs(
    n_classes: int, dim: int, n_per_class: int, spread: float, rng: RngStream
) -> Dataset:
    """Gaussian clusters around orthogonal class means, with every feature
    vector scaled to unit norm.

    The means are ``r`` times the columns of a random orthogonal frame,
    so any two sit ``r * sqrt(2)`` apart, with ``r`` chosen to make that at
    least ``4 * spread``. Each coordinate of the noise has standard
    deviation ``spread / sqrt(dim)``.
    """
    if n_classes < 2:
        raise DatasetError(f"Need at least two classes, got {n_classes}")
    if dim < n_classes:
        raise DatasetError(f"Need dim >= n_classes for orthogonal means, got {dim} < {n_classes}")
    if n_per_class < 1 or spread < 0:
        raise DatasetError(f"Invalid blob parameters n_per_class={n_per_class}, spread={spread}")
    radius = max(1.0, 4 * spread / math.sqrt(2))
    frame = haar_orthogonal(dim, n_classes, rng.substream(0))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.substream(1).generator().normal(
        0.0, spread / math.sqrt(dim), size=(labels.size, dim)
    )
    features = radius * frame.T[labels] + noise
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    order = rng.substream(2).generator().permutation(labels.size)
    return Dataset(features[order], labels[order], n_classes)


def cifar10_load(path: Path | str, limit: int | None = None) -> Dataset:
    """Reads a CIFAR-10 binary batch: each record is one label byte and
    3072 pixel bytes (the red, green and blue planes of a 32x32 image).
    Features are the raw planes scaled to ``[0, 1]``."""
    if limit is not None and limit < 1:
        raise DatasetError(f"limit must be positive, got {limit}")
    raw = Path(path).read_bytes()
    if not raw or len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{path} holds {len(raw)} bytes, not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise FormatError(f"{path} has label {labels.max()}, expected at most 9")
    features = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(features, labels, CIFAR_CLASSES)


def as_images(data: Dataset) -> Array:
    """The features of a CIFAR-10 dataset as ``(n, 3, 32, 32)`` maps."""
    return data.features.reshape((-1,) + CIFAR_IMAGE_SHAPE)
