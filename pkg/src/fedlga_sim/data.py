"""Datasets, IDX ingestion, non-i.i.d. partitioning and seeded minibatch sampling."""

import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import numpy.typing as npt

from fedlga_sim.errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    TruncatedFileError,
)
from fedlga_sim.model import Batch

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled samples for a C-class problem.

    Args:
        features: Matrix with one row per sample
        labels: Class index per row, each in ``[0, num_classes)``
        num_classes: Number of classes C; every class must be present
        image_shape: ``(rows, cols)`` when the rows are flattened images
    """

    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    num_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            msg = (
                f"features {self.features.shape} and labels {self.labels.shape} "
                "do not describe the same samples"
            )
            raise ValueError(msg)
        if self.features.shape[0] == 0:
            msg = "a dataset needs at least one sample"
            raise EmptyDatasetError(msg)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            msg = f"labels must lie in [0, {self.num_classes})"
            raise ValueError(msg)
        missing = sorted(set(range(self.num_classes)) - set(np.unique(self.labels).tolist()))
        if missing:
            msg = f"classes {missing} have no samples"
            raise ValueError(msg)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        """Number of features per sample."""
        return int(self.features.shape[1])

    def class_counts(self) -> npt.NDArray[np.int64]:
        """Number of samples per class, indexed by class."""
        return np.bincount(self.labels, minlength=self.num_classes)

    def as_batch(self) -> Batch:
        """The whole dataset as a single batch."""
        return Batch(self.features, self.labels)


@dataclass(frozen=True, eq=False)
class Shard:
    """One device's private slice of the training data."""

    device_id: int
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    class_set: frozenset[int]

    def __post_init__(self) -> None:
        if self.features.shape[0] == 0:
            msg = f"shard of device {self.device_id} is empty"
            raise EmptyDatasetError(msg)
        if not set(np.unique(self.labels).tolist()) <= self.class_set:
            msg = f"shard of device {self.device_id} holds labels outside {sorted(self.class_set)}"
            raise ValueError(msg)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def as_batch(self) -> Batch:
        """The whole shard as a single batch."""
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class PartitionSpec:
    """Layout of the non-i.i.d. split.

    Args:
        num_devices: Device count N
        classes_per_device: Classes per shard P
        seed: Seed of the chunk dealing
    """

    num_devices: int
    classes_per_device: int
    seed: int = 0

    def chunks_per_class(self, num_classes: int) -> int:
        """Number of contiguous chunks each class is cut into (N*P/C)."""
        self.validate(num_classes)
        return self.num_devices * self.classes_per_device // num_classes

    def validate(self, num_classes: int) -> None:
        """Raise :class:`PartitionError` if the layout is impossible for C classes."""
        if self.num_devices < 1 or self.classes_per_device < 1:
            msg = "num_devices and classes_per_device must be positive"
            raise PartitionError(msg)
        if self.classes_per_device > num_classes:
            msg = f"classes_per_device={self.classes_per_device} exceeds {num_classes} classes"
            raise PartitionError(msg)
        if (self.num_devices * self.classes_per_device) % num_classes:
            msg = (
                f"num_devices*classes_per_device={self.num_devices * self.classes_per_device} "
                f"is not divisible by num_classes={num_classes}"
            )
            raise PartitionError(msg)


@dataclass(frozen=True)
class SamplerState:
    """Explicit position in a shard's shuffled batch stream.

    The stream is a sequence of passes; pass ``p`` visits the shard in the order given by a
    permutation seeded by ``(*key, p)``.
    """

    key: tuple[int, ...]
    pass_index: int = 0
    cursor: int = 0

    @classmethod
    def from_seed(cls, seed: int) -> "SamplerState":
        return cls(key=(seed,))


# ========== Generation and loading ==========


def synth_dataset(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    class_sep: float,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs with class means on a sphere.

    Class means are drawn uniformly on the sphere of radius ``class_sep``; samples add
    isotropic noise of scale ``noise_sigma``. Samples are ordered class by class.

    Args:
        num_classes: Number of classes C (>= 2)
        input_dim: Feature dimension
        samples_per_class: Samples drawn per class (>= 1)
        class_sep: Radius of the sphere holding the class means
        noise_sigma: Standard deviation of the per-sample noise
        seed: Seed; the means depend only on it, not on the noise scale

    Returns:
        Deterministic dataset for the given arguments
    """
    if num_classes < 2 or samples_per_class < 1 or input_dim < 1:
        msg = "synth_dataset needs num_classes >= 2, samples_per_class >= 1, input_dim >= 1"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_sep * directions
    noise = rng.standard_normal((num_classes, samples_per_class, input_dim))
    features = (means[:, None, :] + noise_sigma * noise).reshape(-1, input_dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return Dataset(features=features, labels=labels, num_classes=num_classes)


def split_dataset(dataset: Dataset, test_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``test_per_class`` random samples of every class.

    Returns:
        ``(train, test)``; both keep the original class order
    """
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) <= test_per_class:
            msg = f"class {cls} has {len(members)} samples, cannot hold out {test_per_class}"
            raise ValueError(msg)
        test_idx.append(np.sort(rng.choice(members, size=test_per_class, replace=False)))
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return (
        _subset(dataset, np.flatnonzero(~test_mask)),
        _subset(dataset, np.flatnonzero(test_mask)),
    )


def _subset(dataset: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(
        features=dataset.features[indices],
        labels=dataset.labels[indices],
        num_classes=dataset.num_classes,
        image_shape=dataset.image_shape,
    )


def _read_header(raw: bytes, path: Path, magic: int, fields: int) -> tuple[int, ...]:
    size = 4 * (fields + 1)
    if len(raw) < size:
        msg = f"{path}: file too short for an IDX header ({len(raw)} bytes)"
        raise TruncatedFileError(msg)
    found, *values = struct.unpack(f">{fields + 1}I", raw[:size])
    if found != magic:
        msg = f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}"
        raise BadMagicError(msg)
    return tuple(values)


def load_idx(
    images_path: str | Path, labels_path: str | Path, num_classes: int | None = None
) -> Dataset:
    """Decode an IDX image/label file pair.

    Args:
        images_path: IDX3 file (magic 0x00000803, count, rows, cols, pixels)
        labels_path: IDX1 file (magic 0x00000801, count, labels)
        num_classes: Class count; defaults to ``max(label) + 1``

    Returns:
        Dataset with pixels scaled to [0, 1] and flattened row-major

    Raises:
        BadMagicError: Either magic number is wrong
        TruncatedFileError: A header or payload is incomplete
        CountMismatchError: The files hold different item counts
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_raw = images_path.read_bytes()
    label_raw = labels_path.read_bytes()

    count, rows, cols = _read_header(image_raw, images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,) = _read_header(label_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        msg = f"{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        raise CountMismatchError(msg)

    pixels = image_raw[16:]
    if len(pixels) < count * rows * cols:
        msg = f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(pixels)}"
        raise TruncatedFileError(msg)
    if len(label_raw) - 8 < count:
        msg = f"{labels_path}: expected {count} label bytes, found {len(label_raw) - 8}"
        raise TruncatedFileError(msg)

    if count == 0:
        msg = f"{images_path} holds no images"
        raise EmptyDatasetError(msg)
    images = np.frombuffer(pixels, dtype=np.uint8, count=count * rows * cols)
    labels = np.frombuffer(label_raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    features = images.reshape(count, rows * cols).astype(np.float64) / 255.0
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    logger.info("Loaded %d IDX samples (%dx%d) from %s", count, rows, cols, images_path)
    return Dataset(features, labels, num_classes, image_shape=(rows, cols))


def encode_idx(images: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    """Encode ``uint8`` images ``(n, rows, cols)`` and labels as IDX byte strings."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    if labels.shape != (count,):
        msg = f"{count} images but labels of shape {labels.shape}"
        raise CountMismatchError(msg)
    image_bytes = struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes()
    label_bytes = struct.pack(">2I", IDX_LABELS_MAGIC, count) + labels.tobytes()
    return image_bytes, label_bytes


def dataset_to_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    """Re-encode an image dataset (pixels in [0, 1]) as IDX byte strings."""
    if dataset.image_shape is None:
        msg = "dataset has no image shape to encode"
        raise ValueError(msg)
    rows, cols = dataset.image_shape
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8).reshape(-1, rows, cols)
    return encode_idx(pixels, dataset.labels)


def write_idx(
    images_path: str | Path, labels_path: str | Path, images: np.ndarray, labels: np.ndarray
) -> None:
    """Write an IDX image/label file pair."""
    image_bytes, label_bytes = encode_idx(images, labels)
    Path(images_path).write_bytes(image_bytes)
    Path(labels_path).write_bytes(label_bytes)


# ========== Partitioning ==========


def partition_noniid(dataset: Dataset, spec: PartitionSpec) -> list[Shard]:
    """Split the dataset into N disjoint shards holding exactly P classes each.

    Each class is shuffled and cut into ``N*P/C`` contiguous chunks (the remainder joins the
    last chunk). Chunks are listed class by class in a seeded class order and dealt to a
    seeded device permutation round-robin, so the ``P`` chunks of one device always come
    from ``P`` different classes.

    Raises:
        PartitionError: ``N*P`` is not divisible by C, ``P > C``, or a class is too small
    """
    num_classes = dataset.num_classes
    per_class = spec.chunks_per_class(num_classes)
    rng = np.random.default_rng(spec.seed)
    class_order = rng.permutation(num_classes)
    device_order = rng.permutation(spec.num_devices)

    chunks: list[tuple[int, np.ndarray]] = []
    for cls in class_order:
        members = rng.permutation(np.flatnonzero(dataset.labels == cls))
        if len(members) < per_class:
            msg = f"class {cls} has {len(members)} samples, fewer than {per_class} chunks"
            raise PartitionError(msg)
        size = len(members) // per_class
        for piece in range(per_class):
            stop = len(members) if piece == per_class - 1 else (piece + 1) * size
            chunks.append((int(cls), members[piece * size : stop]))

    assigned: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(spec.num_devices)]
    for position, chunk in enumerate(chunks):
        assigned[device_order[position % spec.num_devices]].append(chunk)

    shards = []
    for device_id, owned in enumerate(assigned):
        indices = np.sort(np.concatenate([members for _, members in owned]))
        shards.append(
            Shard(
                device_id=device_id,
                features=dataset.features[indices],
                labels=dataset.labels[indices],
                class_set=frozenset(cls for cls, _ in owned),
            )
        )
    logger.debug(
        "Partitioned %d samples into %d shards of %d classes",
        len(dataset),
        spec.num_devices,
        spec.classes_per_device,
    )
    return shards


# ========== Batch sampling ==========


@lru_cache(maxsize=4096)
def _pass_order(key: tuple[int, ...], pass_index: int, size: int) -> np.ndarray:
    order = np.random.default_rng([*key, pass_index]).permutation(size)
    order.setflags(write=False)
    return order


def sample_batch(
    shard: Shard, batch_size: int, rng_state: SamplerState
) -> tuple[Batch, SamplerState]:
    """Draw the next minibatch without replacement from the shard's pass stream.

    A batch holds ``min(batch_size, len(shard))`` samples. When the current pass runs out,
    the batch continues in the next pass, which is a fresh permutation.

    Returns:
        ``(batch, next_state)``; the input state is not modified
    """
    if batch_size < 1:
        msg = f"batch_size must be at least 1, got {batch_size}"
        raise ValueError(msg)
    size = len(shard)
    if size == 0:
        msg = f"cannot sample from the empty shard of device {shard.device_id}"
        raise EmptyDatasetError(msg)

    needed = min(batch_size, size)
    pass_index, cursor = rng_state.pass_index, rng_state.cursor
    parts = []
    while needed:
        order = _pass_order(rng_state.key, pass_index, size)
        take = min(needed, size - cursor)
        parts.append(order[cursor : cursor + take])
        cursor += take
        needed -= take
        if cursor == size:
            pass_index, cursor = pass_index + 1, 0

    indices = parts[0] if len(parts) == 1 else np.concatenate(parts)
    batch = Batch(shard.features[indices], shard.labels[indices])
    return batch, SamplerState(rng_state.key, pass_index, cursor)


@dataclass
class ShardSummary:
    """Printable description of a shard (used by ``partition-info``)."""

    device_id: int
    size: int
    class_set: list[int]
    class_counts: dict[int, int] = field(default_factory=dict)

    @classmethod
    def of(cls, shard: Shard) -> "ShardSummary":
        values, counts = np.unique(shard.labels, return_counts=True)
        return cls(
            device_id=shard.device_id,
            size=len(shard),
            class_set=sorted(shard.class_set),
            class_counts={int(v): int(c) for v, c in zip(values, counts, strict=True)},
        )

    def to_dict(self) -> dict[str, object]:
        """Convert to dictionary representation."""
        return {
            "device_id": self.device_id,
            "size": self.size,
            "class_set": self.class_set,
            "class_counts": self.class_counts,
        }
