import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import mnist_available
from viciousbench import datahub
from viciousbench.datahub import (CELEBA_ATTRIBUTES, LabelSpace, compute_class_weights, load_dataset,
                                  rank_balanced, read_idx, restrict_attributes,
                                  select_balanced_attributes, split_train_valid)
from viciousbench.errors import (ArgumentError, DegenerateAttributeError, IngestionError,
                                 UnsupportedDatasetError)


def _write_idx(path, arr, compress=False):
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def _fake_mnist(root, n_train=40, n_test=10, compress=False):
    folder = root / "mnist"
    folder.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for (img, lbl), n in zip(datahub._IDX_FILES.values(), (n_train, n_test)):
        name = (lambda s: s + ".gz") if compress else (lambda s: s)
        _write_idx(folder / name(img), rng.integers(0, 256, (n, 28, 28)), compress)
        _write_idx(folder / name(lbl), rng.integers(0, 10, n), compress)
    return root


def test_synthetic_is_deterministic():
    a = load_dataset("synthetic-categorical", (8, 8), seed=7, n_train=100, n_test=20)
    b = load_dataset("synthetic-categorical", (8, 8), seed=7, n_train=100, n_test=20)
    assert a.fingerprint() == b.fingerprint()
    c = load_dataset("synthetic-categorical", (8, 8), seed=8, n_train=100, n_test=20)
    assert c.fingerprint() != a.fingerprint()


def test_synthetic_ranges_and_shapes(tiny_categorical):
    d = tiny_categorical
    assert d.shape == (8, 8, 1)
    for part in (d.train, d.valid, d.test):
        assert part.images.dtype == np.float32
        assert part.images.min() >= 0.0 and part.images.max() <= 1.0
        assert set(np.unique(part.labels)) <= set(range(4))
    assert d.label_space == LabelSpace.categorical(4)


def test_binary_labels_are_zero_one(tiny_binary):
    labels = tiny_binary.train.labels
    assert labels.shape[1] == 4
    assert set(np.unique(labels)) <= {0, 1}
    assert tiny_binary.label_space.is_binary
    assert len(tiny_binary.label_space.class_weights) == 4


def test_splits_are_disjoint_and_cover(tiny_categorical):
    d = tiny_categorical
    tr, va, te = (set(p.indices.tolist()) for p in (d.train, d.valid, d.test))
    assert not (tr & va) and not (tr & te) and not (va & te)
    assert len(tr) + len(va) + len(te) == d.meta["source_size"] == 380
    assert len(va) == 30


def test_splits_are_read_only(tiny_categorical):
    with pytest.raises(ValueError):
        tiny_categorical.train.images[0, 0, 0, 0] = 1.0


@given(st.integers(2, 500), st.integers(0, 2**31 - 1))
def test_split_train_valid_partitions(n, seed):
    tr, va = split_train_valid(n, seed)
    assert len(va) == round(n * 0.1)
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(n))


def test_class_weights_examples():
    assert compute_class_weights(np.array([[0], [0], [0], [1]]), 1) == [3.0]
    assert compute_class_weights(np.array([[0, 1], [1, 0]]), 2) == [1.0, 1.0]


@given(st.lists(st.lists(st.integers(0, 1), min_size=3, max_size=3), min_size=2, max_size=40))
def test_class_weights_balance_the_loss(rows):
    labels = np.array(rows)
    if (labels.sum(axis=0) == 0).any():
        with pytest.raises(DegenerateAttributeError):
            compute_class_weights(labels, 3)
        return
    eta = np.array(compute_class_weights(labels, 3))
    # eta_j * #ones_j equals #zeros_j
    np.testing.assert_allclose(eta * labels.sum(axis=0), (labels == 0).sum(axis=0))


def test_class_weights_wrong_width():
    with pytest.raises(ArgumentError):
        compute_class_weights(np.array([[0, 1]]), 3)


def test_rank_balanced_examples():
    assert rank_balanced([0.02, 0.49, 0.75, 0.51], 2) == [1, 3]
    assert rank_balanced([0.3, 0.9, 0.5], 3) == [0, 1, 2]
    assert rank_balanced([0.4, 0.6], 1) == [0]  # tie goes to the lower index
    with pytest.raises(ArgumentError):
        rank_balanced([0.5], 2)


def test_celeba_most_balanced_attribute():
    rates = [r / 100 for _, r in CELEBA_ATTRIBUTES]
    assert len(rates) == 40
    assert rank_balanced(rates, 1) == [21]
    assert CELEBA_ATTRIBUTES[21][0] == "MouthSlightlyOpen"


def test_restrict_attributes(tiny_binary):
    cols = select_balanced_attributes(tiny_binary.train, 2)
    sub = restrict_attributes(tiny_binary, cols)
    assert sub.label_space.n_outputs == 2
    np.testing.assert_array_equal(sub.train.labels, tiny_binary.train.labels[:, cols])
    assert sub.meta["attributes"] == cols


def test_restrict_needs_binary(tiny_categorical):
    with pytest.raises(ArgumentError):
        restrict_attributes(tiny_categorical, [0])


def test_unknown_dataset():
    with pytest.raises(UnsupportedDatasetError):
        load_dataset("imagenet")


def test_missing_files_raise(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset("mnist", (32, 32), root=tmp_path, use_cache=False)


@pytest.mark.parametrize("compress", [False, True])
def test_idx_ingestion(tmp_path, compress):
    root = _fake_mnist(tmp_path, compress=compress)
    d = load_dataset("mnist", (32, 32), seed=1, root=root, use_cache=False)
    assert (len(d.train), len(d.valid), len(d.test)) == (36, 4, 10)
    assert d.shape == (32, 32, 1)
    assert d.train.images.min() >= 0 and d.train.images.max() <= 1
    raw = read_idx(root / "mnist" / datahub._IDX_FILES["test"][1])
    np.testing.assert_array_equal(d.test.labels, raw)


def test_idx_cache_round_trip(tmp_path):
    root = _fake_mnist(tmp_path)
    a = load_dataset("mnist", (16, 16), root=root)
    assert (root / ".cache" / "mnist-16x16.vbt").exists()
    b = load_dataset("mnist", (16, 16), root=root)
    assert a.fingerprint() == b.fingerprint()


def test_malformed_idx(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">HBB", 0, 0x08, 1) + struct.pack(">I", 10) + b"\0" * 3)
    with pytest.raises(IngestionError):
        read_idx(bad)
    bad.write_bytes(b"\1\2")
    with pytest.raises(IngestionError):
        read_idx(bad)


def test_data_root_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv(datahub.DATA_ENV, str(tmp_path))
    assert datahub.data_root() == tmp_path
    assert datahub.data_root("/elsewhere").as_posix() == "/elsewhere"


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not found under $VICIOUSBENCH_DATA")
def test_mnist_split_sizes():
    d = load_dataset("mnist", (32, 32), seed=0)
    assert (len(d.train), len(d.valid), len(d.test)) == (54000, 6000, 10000)
    assert d.shape == (32, 32, 1)
