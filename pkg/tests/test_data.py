"""CIFAR binary decoding, the synthetic motif set, and batching."""

import numpy as np
import pytest

from paca.data import (
    CifarFormatError,
    Dataset,
    batch_iter,
    load_cifar,
    normalize_images,
    synth_dataset,
    write_cifar,
)


def make_c100_file(path, records):
    """records: list of (coarse, fine, image (32,32,3) uint8)."""
    with open(path, "wb") as f:
        for coarse, fine, img in records:
            f.write(bytes([coarse, fine]))
            f.write(img.transpose(2, 0, 1).tobytes())  # planar R, G, B


class TestCifarLoader:
    def test_two_record_fixture_decodes_exactly(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(2)]
        make_c100_file(tmp_path / "train.bin", [(1, 42, imgs[0]), (0, 7, imgs[1])])
        ds = load_cifar(str(tmp_path), "c100", "train")
        assert len(ds) == 2 and ds.class_count == 100
        assert ds.labels.tolist() == [42, 7]
        assert np.array_equal(ds.images[0], imgs[0])
        assert np.array_equal(ds.images[1], imgs[1])

    def test_truncated_file_reports_offset(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        make_c100_file(tmp_path / "train.bin", [(0, 3, img)])
        with open(tmp_path / "train.bin", "ab") as f:
            f.write(b"\0" * 100)  # partial second record
        with pytest.raises(CifarFormatError, match="byte 3174"):
            load_cifar(str(tmp_path), "c100", "train")

    def test_label_out_of_range(self, tmp_path):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        with open(tmp_path / "data_batch_1.bin", "wb") as f:
            f.write(bytes([250]))
            f.write(img.tobytes())
        with pytest.raises(CifarFormatError, match="label"):
            load_cifar(str(tmp_path), "c10", "train")

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar(str(tmp_path), "c100", "test")

    def test_write_load_round_trip(self, tmp_path):
        ds = synth_dataset(3, 40, 10, geometry=(32, 32))
        write_cifar(ds, str(tmp_path), "c100", "train")
        back = load_cifar(str(tmp_path), "c100", "train")
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)

    def test_c10_round_trip_splits_into_batches(self, tmp_path):
        ds = synth_dataset(4, 25, 5, geometry=(32, 32))
        write_cifar(ds, str(tmp_path), "c10", "train")
        back = load_cifar(str(tmp_path), "c10", "train")
        assert len(back) == 25 and back.class_count == 10
        assert np.array_equal(back.images, ds.images)


class TestSynthDataset:
    def test_bitwise_deterministic(self):
        a = synth_dataset(9, 64, 4)
        b = synth_dataset(9, 64, 4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        c = synth_dataset(10, 64, 4)
        assert not np.array_equal(a.images, c.images)

    def test_round_robin_balance(self):
        ds = synth_dataset(0, 100, 4)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.tolist() == [25, 25, 25, 25]

    def test_nearest_centroid_oracle(self):
        train = synth_dataset(1, 200, 4)
        test = synth_dataset(2, 100, 4)
        centroids = np.stack([
            train.images[train.labels == c].astype(np.float64).mean(axis=0) for c in range(4)
        ])
        correct = 0
        for img, label in zip(test.images, test.labels):
            dists = ((centroids - img.astype(np.float64)) ** 2).sum(axis=(1, 2, 3))
            correct += int(np.argmin(dists) == label)
        assert correct / len(test) >= 0.90

    def test_many_classes_stay_learnable(self):
        train = synth_dataset(1, 400, 100, geometry=(32, 32))
        test = synth_dataset(2, 200, 100, geometry=(32, 32))
        centroids = np.stack([
            train.images[train.labels == c].astype(np.float64).mean(axis=0) for c in range(100)
        ])
        correct = 0
        for img, label in zip(test.images, test.labels):
            dists = ((centroids - img.astype(np.float64)) ** 2).sum(axis=(1, 2, 3))
            correct += int(np.argmin(dists) == label)
        assert correct / len(test) >= 0.90

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            synth_dataset(0, 10, 1)


class TestBatchIter:
    def test_epoch_permutation_deterministic(self):
        ds = synth_dataset(0, 50, 4)
        a = [b.labels.tolist() for b in batch_iter(ds, 16, seed=3, epoch=1)]
        b = [b.labels.tolist() for b in batch_iter(ds, 16, seed=3, epoch=1)]
        c = [b.labels.tolist() for b in batch_iter(ds, 16, seed=3, epoch=2)]
        assert a == b
        assert a != c

    def test_covers_dataset_exactly_once(self):
        ds = synth_dataset(0, 53, 4)  # deliberately not a multiple of the batch size
        seen = []
        sizes = []
        for batch in batch_iter(ds, 16, seed=0):
            sizes.append(len(batch.labels))
            seen.extend(batch.images.data.reshape(len(batch.labels), -1).sum(axis=1).tolist())
        assert sizes == [16, 16, 16, 5]  # last partial batch kept
        all_sums = sorted(normalize_images(ds.images).reshape(53, -1).sum(axis=1).tolist())
        assert np.allclose(sorted(seen), all_sums)

    def test_normalization_arithmetic(self):
        img = np.full((1, 4, 4, 3), 255, dtype=np.uint8)
        ds = Dataset(img, np.zeros(1, dtype=np.int64), 2, "synth")
        batch = next(batch_iter(ds, 1, seed=0))
        assert np.allclose(batch.images.data, 1.0)

    def test_zero_batch_size_rejected(self):
        ds = synth_dataset(0, 4, 2)
        with pytest.raises(ValueError):
            next(batch_iter(ds, 0, seed=0))

    def test_augment_deterministic_and_same_shape(self):
        ds = synth_dataset(0, 20, 4)
        a = np.concatenate([b.images.data for b in batch_iter(ds, 8, seed=1, augment=True)])
        b = np.concatenate([b.images.data for b in batch_iter(ds, 8, seed=1, augment=True)])
        plain = np.concatenate([b.images.data for b in batch_iter(ds, 8, seed=1)])
        assert np.array_equal(a, b)
        assert a.shape == plain.shape
        assert not np.array_equal(a, plain)
