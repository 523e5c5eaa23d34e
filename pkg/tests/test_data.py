import numpy as np
import pytest

from mbcliquenet.data import (CIFAR_RECORD, DatasetError, batches, load_cifar10_bin, load_cifar_dir,
                              load_mnist_dir, load_mnist_idx, synthetic_dataset)


def write_idx(path, magic, dims, payload):
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in dims)
    path.write_bytes(header + bytes(payload))
    return path


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.zeros(3 * 28 * 28, np.uint8)
    pixels[0], pixels[1] = 255, 128
    img = write_idx(tmp_path / "img", 2051, [3, 28, 28], pixels)
    lab = write_idx(tmp_path / "lab", 2049, [3], [1, 7, 9])
    return img, lab


class TestMnist:
    def test_crafted_pair(self, idx_pair):
        ds = load_mnist_idx(*idx_pair)
        assert ds.images.shape == (3, 1, 28, 28)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 0, 0, 2] == 0.0
        assert ds.images[0, 0, 0, 1] == np.float32(128 / 255)
        assert ds.labels.tolist() == [1, 7, 9]

    def test_bad_label_magic(self, idx_pair, tmp_path):
        lab = write_idx(tmp_path / "lab2", 2051, [3], [1, 2, 3])
        with pytest.raises(DatasetError, match="bad magic"):
            load_mnist_idx(idx_pair[0], lab)

    def test_truncated(self, idx_pair, tmp_path):
        img = tmp_path / "short"
        img.write_bytes(idx_pair[0].read_bytes()[:-10])
        with pytest.raises(DatasetError, match="truncated"):
            load_mnist_idx(img, idx_pair[1])

    def test_count_mismatch(self, idx_pair, tmp_path):
        lab = write_idx(tmp_path / "lab3", 2049, [2], [1, 2])
        with pytest.raises(DatasetError, match="2 labels for 3 images"):
            load_mnist_idx(idx_pair[0], lab)

    def test_official_files(self, mnist_dir):
        ds = load_mnist_dir(mnist_dir, "train")
        assert ds.n == 60000 and ds.images.shape[1:] == (1, 28, 28)
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0
        assert load_mnist_dir(mnist_dir, "test").n == 10000


def cifar_bytes(labels, rng):
    recs = rng.integers(0, 256, size=(len(labels), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    return recs.tobytes()


class TestCifar:
    def test_label_and_layout(self, tmp_path, rng):
        raw = cifar_bytes([7, 0], rng)
        (tmp_path / "b.bin").write_bytes(raw)
        ds = load_cifar10_bin(tmp_path / "b.bin", stats=(np.zeros(3), np.ones(3)))
        assert ds.labels.tolist() == [7, 0]
        # channel-planar: the second red byte is pixel (0, 1) of channel 0
        assert ds.images[0, 0, 0, 1] == np.float32(raw[2] / 255)
        assert ds.images[0, 1, 0, 0] == np.float32(raw[1 + 1024] / 255)

    def test_bad_length(self, tmp_path, rng):
        (tmp_path / "b.bin").write_bytes(cifar_bytes([1, 2], rng) + b"\x00")
        with pytest.raises(DatasetError, match="multiple"):
            load_cifar10_bin(tmp_path / "b.bin")

    def test_bad_label(self, tmp_path, rng):
        (tmp_path / "b.bin").write_bytes(cifar_bytes([1, 12], rng))
        with pytest.raises(DatasetError, match=f"offset {CIFAR_RECORD}"):
            load_cifar10_bin(tmp_path / "b.bin")

    def test_normalization_statistics(self, tmp_path, rng):
        (tmp_path / "b.bin").write_bytes(cifar_bytes(list(range(10)) * 5, rng))
        ds = load_cifar10_bin(tmp_path / "b.bin")
        x = ds.images.astype(np.float64)
        assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-3
        assert np.abs(x.std(axis=(0, 2, 3)) - 1).max() < 1e-3
        assert ds.channel_mean.shape == (3,)

    def test_official_files(self, cifar_dir):
        train = load_cifar_dir(cifar_dir, "train")
        assert train.n == 50000
        test = load_cifar_dir(cifar_dir, "test", stats=(train.channel_mean, train.channel_std))
        assert test.n == 10000
        assert np.array_equal(test.channel_mean, train.channel_mean)


class TestSynthetic:
    def test_deterministic(self):
        a, b = synthetic_dataset(20, 1, 4, 4, 3, seed=5), synthetic_dataset(20, 1, 4, 4, 3, seed=5)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_balanced(self):
        counts = np.bincount(synthetic_dataset(23, 1, 2, 2, 4).labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_separable(self):
        ds = synthetic_dataset(200, 1, 4, 4, 2, separation=5.0, noise=0.5)
        flat = ds.images.reshape(ds.n, -1)
        mu = [flat[ds.labels == c].mean(axis=0) for c in (0, 1)]
        pred = (np.linalg.norm(flat - mu[1], axis=1) < np.linalg.norm(flat - mu[0], axis=1))
        assert (pred == ds.labels).all()

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            synthetic_dataset(0, 1, 1, 1, 1)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(10, 3, 0, 0)] == [3, 3, 3, 1]

    def test_every_index_once(self):
        assert sorted(np.concatenate(batches(97, 8, 1, 2)).tolist()) == list(range(97))

    def test_reproducible_and_epoch_dependent(self):
        a = np.concatenate(batches(50, 7, 3, 0))
        assert np.array_equal(a, np.concatenate(batches(50, 7, 3, 0)))
        assert not np.array_equal(a, np.concatenate(batches(50, 7, 3, 1)))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            batches(5, 0, 0, 0)
