"""Tests for dataset generation, IDX ingestion, partitioning and batch sampling."""

import struct

import numpy as np
import pytest

from fedlga_sim.data import (
    Dataset,
    PartitionSpec,
    SamplerState,
    Shard,
    ShardSummary,
    dataset_to_idx,
    load_idx,
    partition_noniid,
    sample_batch,
    split_dataset,
    synth_dataset,
    write_idx,
)
from fedlga_sim.errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    TruncatedFileError,
)


def _index_dataset(num_classes, per_class):
    """Dataset whose single feature is the sample's own index."""
    n = num_classes * per_class
    return Dataset(
        features=np.arange(n, dtype=np.float64).reshape(n, 1),
        labels=np.repeat(np.arange(num_classes, dtype=np.int64), per_class),
        num_classes=num_classes,
    )


@pytest.fixture
def shard():
    """Ten-sample shard whose features are the sample indices."""
    return Shard(
        device_id=3,
        features=np.arange(10, dtype=np.float64).reshape(10, 1),
        labels=np.array([0] * 5 + [1] * 5, dtype=np.int64),
        class_set=frozenset({0, 1}),
    )


class TestDataset:
    """Validation and helpers of Dataset."""

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError, match="no samples"):
            Dataset(np.zeros((2, 1)), np.array([0, 0]), num_classes=2)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="labels must lie"):
            Dataset(np.zeros((2, 1)), np.array([0, 2]), num_classes=2)

    def test_empty_rejected(self):
        with pytest.raises(EmptyDatasetError):
            Dataset(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), num_classes=2)

    def test_class_counts(self):
        data = _index_dataset(3, 4)
        assert data.class_counts().tolist() == [4, 4, 4]
        assert data.input_dim == 1
        assert len(data) == 12


class TestSynthDataset:
    """Gaussian blob generation."""

    def test_deterministic(self):
        a = synth_dataset(4, 6, 10, 3.0, 1.0, seed=9)
        b = synth_dataset(4, 6, 10, 3.0, 1.0, seed=9)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_shape_and_class_order(self):
        data = synth_dataset(3, 5, 7, 3.0, 1.0, seed=0)
        assert data.features.shape == (21, 5)
        assert data.labels.tolist() == [0] * 7 + [1] * 7 + [2] * 7

    def test_noise_free_samples_sit_on_sphere(self):
        data = synth_dataset(3, 5, 4, class_sep=2.5, noise_sigma=0.0, seed=1)
        np.testing.assert_allclose(np.linalg.norm(data.features, axis=1), 2.5)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 5, 4, 3.0, 1.0, seed=0)


class TestSplitDataset:
    """Per-class hold-out split."""

    def test_split_sizes_and_disjointness(self):
        data = _index_dataset(4, 10)
        train, test = split_dataset(data, test_per_class=3, seed=2)
        assert train.class_counts().tolist() == [7] * 4
        assert test.class_counts().tolist() == [3] * 4
        train_ids = set(train.features[:, 0].tolist())
        test_ids = set(test.features[:, 0].tolist())
        assert not train_ids & test_ids
        assert len(train_ids | test_ids) == 40

    def test_holding_out_whole_class_rejected(self):
        with pytest.raises(ValueError, match="cannot hold out"):
            split_dataset(_index_dataset(2, 3), test_per_class=3, seed=0)


class TestPartition:
    """Non-i.i.d. partitioning into shards of P classes."""

    @pytest.mark.parametrize(
        "num_devices,classes_per_device,num_classes,per_class",
        [(50, 2, 10, 60), (10, 2, 4, 30), (6, 3, 3, 12), (4, 1, 2, 9)],
    )
    def test_shards_cover_dataset_disjointly(
        self, num_devices, classes_per_device, num_classes, per_class
    ):
        data = _index_dataset(num_classes, per_class)
        spec = PartitionSpec(num_devices, classes_per_device, seed=5)
        shards = partition_noniid(data, spec)

        assert len(shards) == num_devices
        seen = np.concatenate([s.features[:, 0] for s in shards])
        assert sorted(seen.tolist()) == list(range(len(data)))
        for s in shards:
            assert len(s.class_set) == classes_per_device
            assert set(np.unique(s.labels).tolist()) == s.class_set

    def test_deterministic_in_seed(self):
        data = _index_dataset(4, 30)
        first = partition_noniid(data, PartitionSpec(10, 2, seed=1))
        second = partition_noniid(data, PartitionSpec(10, 2, seed=1))
        other = partition_noniid(data, PartitionSpec(10, 2, seed=2))
        pairs = zip(first, second, strict=True)
        assert all(np.array_equal(a.features, b.features) for a, b in pairs)
        pairs = zip(first, other, strict=True)
        assert any(not np.array_equal(a.features, b.features) for a, b in pairs)

    def test_indivisible_layout_rejected(self):
        with pytest.raises(PartitionError, match="not divisible"):
            partition_noniid(_index_dataset(3, 10), PartitionSpec(5, 2))

    def test_too_many_classes_per_device_rejected(self):
        with pytest.raises(PartitionError, match="exceeds"):
            PartitionSpec(4, 3).validate(2)

    def test_class_too_small_for_chunks_rejected(self):
        with pytest.raises(PartitionError, match="fewer than"):
            partition_noniid(_index_dataset(2, 3), PartitionSpec(8, 1))

    def test_chunks_per_class(self):
        assert PartitionSpec(50, 2).chunks_per_class(10) == 10

    def test_shard_summary(self, shard):
        summary = ShardSummary.of(shard)
        assert summary.to_dict() == {
            "device_id": 3,
            "size": 10,
            "class_set": [0, 1],
            "class_counts": {0: 5, 1: 5},
        }


class TestSampleBatch:
    """Seeded without-replacement batch stream."""

    def test_pass_visits_every_sample_once(self, shard):
        state = SamplerState.from_seed(4)
        seen = []
        for _ in range(5):
            batch, state = sample_batch(shard, 2, state)
            seen.extend(batch.features[:, 0].tolist())
        assert sorted(seen) == list(range(10))
        assert (state.pass_index, state.cursor) == (1, 0)

    def test_batch_capped_at_shard_size(self, shard):
        batch, state = sample_batch(shard, 25, SamplerState.from_seed(0))
        assert len(batch) == 10
        assert sorted(batch.features[:, 0].tolist()) == list(range(10))
        assert state.pass_index == 1

    def test_batch_straddles_passes(self, shard):
        batch, state = sample_batch(shard, 4, SamplerState((7,), pass_index=0, cursor=8))
        assert len(batch) == 4
        assert (state.pass_index, state.cursor) == (1, 2)

    def test_same_state_same_batch(self, shard):
        state = SamplerState.from_seed(11)
        first, next_a = sample_batch(shard, 3, state)
        second, next_b = sample_batch(shard, 3, state)
        assert np.array_equal(first.features, second.features)
        assert next_a == next_b

    def test_input_state_unchanged(self, shard):
        state = SamplerState.from_seed(1)
        sample_batch(shard, 3, state)
        assert (state.pass_index, state.cursor) == (0, 0)

    def test_non_positive_batch_size_rejected(self, shard):
        with pytest.raises(ValueError, match="batch_size"):
            sample_batch(shard, 0, SamplerState.from_seed(0))


class TestIdx:
    """IDX decoding and encoding."""

    @pytest.fixture
    def pixels(self):
        return np.array(
            [[[0, 255], [51, 102]], [[153, 0], [0, 255]], [[1, 2], [3, 4]]], dtype=np.uint8
        )

    def test_write_then_load(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels, np.array([0, 1, 1]))
        data = load_idx(images, labels)

        assert data.image_shape == (2, 2)
        assert data.num_classes == 2
        np.testing.assert_allclose(data.features[0], [0.0, 1.0, 0.2, 0.4])
        np.testing.assert_allclose(data.features[1], [0.6, 0.0, 0.0, 1.0])
        assert data.labels.tolist() == [0, 1, 1]

    def test_dataset_reencodes_to_same_bytes(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels, np.array([0, 1, 1]))
        image_bytes, label_bytes = dataset_to_idx(load_idx(images, labels))
        assert image_bytes == images.read_bytes()
        assert label_bytes == labels.read_bytes()

    def test_num_classes_override(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels[:2], np.array([0, 1]))
        assert load_idx(images, labels, num_classes=2).num_classes == 2

    def test_bad_magic(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels, np.array([0, 1, 1]))
        raw = bytearray(images.read_bytes())
        raw[3] = 0x01
        images.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_idx(images, labels)

    def test_truncated_pixels(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels, np.array([0, 1, 1]))
        images.write_bytes(images.read_bytes()[:-1])
        with pytest.raises(TruncatedFileError):
            load_idx(images, labels)

    def test_truncated_header(self, tmp_path):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        images.write_bytes(struct.pack(">2I", 0x00000803, 1))
        labels.write_bytes(struct.pack(">2I", 0x00000801, 1) + b"\x00")
        with pytest.raises(TruncatedFileError):
            load_idx(images, labels)

    def test_count_mismatch(self, tmp_path, pixels):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, pixels, np.array([0, 1, 1]))
        labels.write_bytes(struct.pack(">2I", 0x00000801, 2) + bytes([0, 1]))
        with pytest.raises(CountMismatchError):
            load_idx(images, labels)

    def test_zero_items(self, tmp_path):
        images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
        write_idx(images, labels, np.zeros((0, 2, 2), dtype=np.uint8), np.zeros(0))
        with pytest.raises(EmptyDatasetError):
            load_idx(images, labels)
