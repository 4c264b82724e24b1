import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptune.dataio import (DatasetError, LabeledDataset, batches, load_csv, load_idx, make_synthetic,
                             parse_dataset_uri, stratified_split, write_csv, write_idx)
from adaptune.losses import cross_entropy
from adaptune.modelcore import SeededRng, build_model


def test_csv_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1,0\n-2,3.25,1\n1e-3,0,1\n")
    ds = load_csv(p)
    assert len(ds) == 3 and ds.class_count == 2 and ds.sample_shape == (2,)
    assert ds.features[1].tolist() == [-2.0, 3.25]


@pytest.mark.parametrize("body, match", [
    ("a,b,target\n1,2,0\n", "label"),
    ("a,label\n1,0\n2\n", "row 3"),
    ("a,label\n1,0\nx,1\n", "row 3"),
    ("a,label\n1,0\n1,1.5\n", "row 3"),
])
def test_csv_rejections(tmp_path, body, match):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DatasetError, match=match):
        load_csv(p)


def test_csv_declared_class_count(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\n2,1\n3,2\n")
    with pytest.raises(DatasetError, match="row 4"):
        load_csv(p, class_count=2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5), st.integers(1, 4))
def test_csv_round_trip(tmp_path_factory, seed, c, dims):
    ds = make_synthetic("gaussian_blobs", c, dims, 3, seed=seed)
    p = tmp_path_factory.mktemp("csv") / "rt.csv"
    write_csv(ds, p)
    back = load_csv(p)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.class_count == c


def idx_fixture(tmp_path, images, labels, img_magic=0x803, lab_magic=0x801):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", img_magic, *images.shape) + images.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">II", lab_magic, len(labels)) + bytes(labels))
    return ip, lp


def test_idx_fixture(tmp_path):
    images = np.zeros((2, 4, 4), dtype=np.uint8)
    images[1] = 255
    images[1, 0, 0] = 51
    ds = load_idx(*idx_fixture(tmp_path, images, [0, 1]))
    assert ds.features.shape == (2, 4, 4)
    assert not ds.features[0].any()
    assert ds.features[1, 0, 0] == pytest.approx(0.2) and ds.features[1, 3, 3] == 1.0


def test_idx_rejections(tmp_path):
    images = np.zeros((2, 4, 4), dtype=np.uint8)
    with pytest.raises(DatasetError, match="2 images vs 3 labels"):
        load_idx(*idx_fixture(tmp_path, images, [0, 1, 1]))
    with pytest.raises(DatasetError, match="magic"):
        load_idx(*idx_fixture(tmp_path, images, [0, 1], img_magic=0x801))
    with pytest.raises(DatasetError, match="magic"):
        load_idx(*idx_fixture(tmp_path, images, [0, 1], lab_magic=0x803))


def test_idx_write_read(tmp_path):
    x = SeededRng(0).random((6, 3, 5))
    labels = np.array([0, 1, 2, 0, 1, 2])
    write_idx(x, labels, tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.abs(ds.features - x).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(ds.labels, labels)


def test_synthetic_shape_and_determinism():
    ds = make_synthetic("gaussian_blobs", 3, 2, 100, seed=1)
    assert len(ds) == 300 and np.bincount(ds.labels).tolist() == [100] * 3
    again = make_synthetic("gaussian_blobs", 3, 2, 100, seed=1)
    np.testing.assert_array_equal(ds.features, again.features)
    other = make_synthetic("gaussian_blobs", 3, 2, 100, seed=2)
    assert not np.array_equal(ds.features, other.features)
    ring = make_synthetic("ring_classes", 4, 3, 10, 0.5, seed=0)
    assert ring.class_count == 4
    with pytest.raises(DatasetError):
        make_synthetic("gaussian_blobs", 3, 2, 1)
    with pytest.raises(DatasetError):
        make_synthetic("spirals", 3, 2, 10)


def test_noise_zero_is_identity_and_rate_flips():
    a = make_synthetic("noisy_blobs", 4, 3, 50, seed=7, label_noise_rate=0.0)
    b = make_synthetic("gaussian_blobs", 4, 3, 50, seed=7)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    noisy = make_synthetic("noisy_blobs", 4, 3, 2500, seed=7, label_noise_rate=0.2)
    clean = make_synthetic("gaussian_blobs", 4, 3, 2500, seed=7)
    rate = float(np.mean(noisy.labels != clean.labels))
    assert abs(rate - 0.2) < 0.02


def test_far_means_are_linearly_separable():
    ds = make_synthetic("gaussian_blobs", 4, 5, 50, difficulty=30.0, seed=3)
    model = build_model("softmax", (5,), 4, rng=SeededRng(0))
    for _ in range(300):
        logits, _, cache = model.forward(ds.features)
        out = cross_entropy(logits, ds.labels)
        grads = model.backward(cache, out.dlogits)
        for k, g in grads.items():
            model.params[k] -= 0.01 * g
    assert np.mean(model.forward(ds.features)[0].argmax(1) == ds.labels) == 1.0


def test_uri_parsing():
    ds = parse_dataset_uri("synthetic:gaussian_blobs?C=3&dims=2&n=100&seed=1")
    np.testing.assert_array_equal(ds.features, make_synthetic("gaussian_blobs", 3, 2, 100, seed=1).features)
    img = parse_dataset_uri("synthetic:gaussian_blobs?C=2&dims=16&n=5&image=4")
    assert img.sample_shape == (4, 4)
    for bad in ("synthetic:gaussian_blobs?bogus=1", "ftp://x", "idx:only_one"):
        with pytest.raises(DatasetError):
            parse_dataset_uri(bad)


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 1)), [0, 3], 3)
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 1)), [0, 1], 3)
    with pytest.raises(DatasetError, match="3 samples but 2 labels"):
        LabeledDataset(np.zeros((3, 1)), [0, 1], 2)


def test_stratified_split_within_one_sample():
    r = SeededRng(5)
    for seed in range(200):
        counts = r.integers(2, 40, size=int(r.integers(2, 6)))
        labels = np.repeat(np.arange(len(counts)), counts)
        ds = LabeledDataset(np.zeros((len(labels), 1)), labels, len(counts))
        frac = float(r.uniform(0.1, 0.9))
        tr, va = stratified_split(ds, frac, seed)
        assert len(tr) + len(va) == len(ds)
        per_class = np.bincount(tr.labels, minlength=len(counts))
        assert np.all(np.abs(per_class - frac * counts) <= 1.0)
    with pytest.raises(DatasetError):
        stratified_split(ds, 1.0)


def test_batches_examples():
    assert [len(b) for b in batches(10, 4, 0, 0)] == [4, 4, 2]
    a = np.concatenate(batches(10, 4, 3, 0))
    np.testing.assert_array_equal(a, np.concatenate(batches(10, 4, 3, 0)))
    assert not np.array_equal(a, np.concatenate(batches(10, 4, 3, 1)))
    with pytest.raises(ValueError):
        batches(10, 0, 0, 0)


def test_batches_cover_every_index_once():
    r = SeededRng(8)
    for _ in range(30):
        n = int(r.integers(1, 10_001))
        bs = int(r.integers(1, 600))
        idx = np.concatenate(batches(n, bs, int(r.integers(1000)), int(r.integers(5))))
        assert np.array_equal(np.sort(idx), np.arange(n))
