import gzip

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from jafr.data import (DataError, Dataset, FormatError, load_cifar_bin, load_dataset, load_digits16, load_idx,
                       natural_patches, split_dataset, synth_blobs, to_uint8, write_cifar_bin, write_idx)


def test_idx_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 5)
    write_idx(tmp_path / "img.idx", tmp_path / "lbl.idx", pixels, labels)
    ds = load_idx(tmp_path / "img.idx", tmp_path / "lbl.idx")
    assert ds.images.shape == (5, 1, 28, 28)
    assert np.array_equal(to_uint8(ds.images)[:, 0], pixels)
    assert np.array_equal(ds.labels, labels)
    np.testing.assert_array_equal(ds.images[:, 0] * 255.0, pixels.astype(np.float64))


def test_idx_gzip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(2, 4, 4), dtype=np.uint8)
    write_idx(tmp_path / "img.idx", None, pixels)
    (tmp_path / "img.idx.gz").write_bytes(gzip.compress((tmp_path / "img.idx").read_bytes()))
    assert np.array_equal(load_idx(tmp_path / "img.idx.gz").images, load_idx(tmp_path / "img.idx").images)


def test_idx_errors(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
    write_idx(tmp_path / "img.idx", tmp_path / "lbl.idx", pixels, [0, 1, 2])
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "trunc.idx").write_bytes(raw[:-1])
    with pytest.raises(FormatError) as err:
        load_idx(tmp_path / "trunc.idx")
    assert err.value.offset == len(raw) - 1
    (tmp_path / "magic.idx").write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(FormatError, match="magic") as err:
        load_idx(tmp_path / "magic.idx")
    assert err.value.offset == 0
    # swapping image and label files is a magic mismatch too
    with pytest.raises(FormatError):
        load_idx(tmp_path / "lbl.idx")
    write_idx(tmp_path / "img2.idx", tmp_path / "lbl2.idx", pixels, [0, 1, 12])
    with pytest.raises(DataError, match="label out of range"):
        load_idx(tmp_path / "img2.idx", tmp_path / "lbl2.idx")


def test_cifar_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(4, 3, 32, 32)).astype(np.float64) / 255.0
    labels = np.array([3, 0, 9, 1])
    write_cifar_bin(tmp_path / "a.bin", pixels, labels)
    assert (tmp_path / "a.bin").stat().st_size == 4 * 3073
    ds = load_cifar_bin(tmp_path / "a.bin")
    assert np.array_equal(ds.images, pixels)
    assert np.array_equal(ds.labels, labels)
    both = load_cifar_bin([tmp_path / "a.bin", tmp_path / "a.bin"])
    assert len(both) == 8
    # R plane comes first in each record
    raw = np.frombuffer((tmp_path / "a.bin").read_bytes(), dtype=np.uint8)
    assert raw[1] == round(pixels[0, 0, 0, 0] * 255)
    assert raw[1 + 1024] == round(pixels[0, 1, 0, 0] * 255)


def test_cifar_errors(tmp_path, rng):
    write_cifar_bin(tmp_path / "a.bin", rng.random((2, 3, 32, 32)), [0, 1])
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-100])
    with pytest.raises(FormatError) as err:
        load_cifar_bin(tmp_path / "t.bin")
    assert err.value.offset == 3073
    with pytest.raises(ValueError):
        write_cifar_bin(tmp_path / "b.bin", rng.random((2, 1, 32, 32)), [0, 1])


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.full((2, 1, 2, 2), 1.5), [0, 1], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 2], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2, 2)), [0, 1], 2)


def test_blobs_determinism_balance_shape():
    a, b = synth_blobs(101, 3, seed=5), synth_blobs(101, 3, seed=5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_blobs(101, 3, seed=6).images)
    assert a.images.shape == (101, 1, 16, 16)
    counts = np.bincount(a.labels, minlength=3)
    assert counts.max() - counts.min() <= 1
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0


@pytest.mark.parametrize("k", [2, 4])
def test_blobs_linear_probe(k):
    tr = synth_blobs(600, k, seed=0)
    te = synth_blobs(600, k, seed=0).subset(np.arange(400, 600))
    tr = tr.subset(np.arange(400))
    probe = LogisticRegression(max_iter=5000).fit(tr.images.reshape(len(tr), -1), tr.labels)
    assert probe.score(te.images.reshape(len(te), -1), te.labels) >= 0.95


def test_split_and_take():
    ds = synth_blobs(50, 2, seed=0)
    tr, te = split_dataset(ds, 10, seed=1)
    assert len(tr) == 40 and len(te) == 10 and te.split == "test"
    assert not set(map(bytes, tr.images.reshape(40, -1))) & set(map(bytes, te.images.reshape(10, -1)))
    assert np.array_equal(ds.take(20, seed=3).images, ds.take(20, seed=3).images)
    assert ds.take(100) is ds


def test_bundled_datasets():
    d = load_digits16()
    assert d.images.shape == (1797, 1, 16, 16) and d.num_classes == 10
    nat = natural_patches(40, size=16, seed=2)
    assert nat.images.shape == (40, 3, 16, 16)
    assert np.array_equal(nat.images, natural_patches(40, size=16, seed=2).images)


def test_load_dataset_references(tmp_path, rng):
    assert len(load_dataset("blobs:3", n=30)) == 30
    assert len(load_dataset("digits", n=25)) == 25
    assert load_dataset("natural:16", n=12).image_shape == (3, 16, 16)
    write_cifar_bin(tmp_path / "c.bin", rng.random((3, 3, 32, 32)), [0, 1, 2])
    assert len(load_dataset(f"cifar:{tmp_path / 'c.bin'}")) == 3
    with pytest.raises(ValueError):
        load_dataset("imagenet")
