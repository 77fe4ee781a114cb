import struct

import numpy as np
import pytest

from vcae.data import (
    Binarization,
    Dataset,
    IdxParseError,
    IMAGE_MAGIC,
    LABEL_MAGIC,
    PartitionError,
    binarize_static,
    half_split,
    load_dataset_cache,
    load_synthetic_splits,
    minibatches,
    parse_idx,
    partition,
    save_dataset_cache,
    serialize_idx,
    synthetic_images,
)
from vcae.numerics import ContractViolation, RngStream


# ---------------------------------------------------------------------------
# IDX parsing
# ---------------------------------------------------------------------------


def test_parse_synthetic_header():
    payload = bytes(range(8))
    raw = struct.pack(">IIII", IMAGE_MAGIC, 2, 2, 2) + payload
    arr = parse_idx(raw)
    assert arr.shape == (2, 2, 2)
    assert arr.max() <= 1.0 and abs(arr[1, 1, 1] - 7 / 255) < 1e-12


def test_parse_labels_magic():
    raw = struct.pack(">II", LABEL_MAGIC, 3) + bytes([0, 128, 255])
    arr = parse_idx(raw)
    assert arr.shape == (3,)
    assert arr[2] == 1.0


def test_parse_bad_magic_offset():
    with pytest.raises(IdxParseError) as exc:
        parse_idx(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 8)
    assert "byte 0" in str(exc.value)


def test_parse_truncated_payload_offset():
    raw = struct.pack(">IIII", IMAGE_MAGIC, 2, 2, 2) + bytes(5)  # needs 8
    with pytest.raises(IdxParseError) as exc:
        parse_idx(raw)
    assert "expected 24" in str(exc.value)  # 20-byte header + 8 payload


def test_parse_dimension_overflow():
    raw = struct.pack(">IIII", IMAGE_MAGIC, 0xFFFFFFF0, 28, 28)
    with pytest.raises(IdxParseError) as exc:
        parse_idx(raw)
    assert "overflow" in str(exc.value)


def test_serialize_parse_round_trip():
    rng = RngStream(seed=3)
    img = (rng.uniform01((4, 5, 6)) * 255).astype(np.uint8)
    raw = serialize_idx(img)
    back = parse_idx(raw)
    assert np.array_equal(np.round(back * 255).astype(np.uint8), img)
    assert serialize_idx(back) == raw  # bit-exact round trip


def test_official_file_structure():
    # official-shape synthetic files: [60000, 28, 28] and [10000, 28, 28]
    gray = np.zeros((60000, 28, 28), dtype=np.uint8)
    assert parse_idx(serialize_idx(gray)).shape == (60000, 28, 28)
    gray_t = np.zeros((10000, 28, 28), dtype=np.uint8)
    assert parse_idx(serialize_idx(gray_t)).shape == (10000, 28, 28)


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------


def test_threshold_binarization():
    img = np.full((2, 4), 0.4)
    bits = binarize_static(img, Binarization("threshold"))
    assert np.all(bits == 0.0)
    assert np.all(binarize_static(np.full((1, 3), 0.5), Binarization("threshold")) == 1.0)


def test_sample_once_deterministic_extremes():
    img = np.array([[0.0, 1.0, 0.0, 1.0]])
    for seed in (1, 2, 3):
        bits = binarize_static(img, Binarization("sample_once", seed))
        assert np.array_equal(bits, img)


def test_sample_once_reproducible():
    img = RngStream(seed=5).uniform01((50, 20))
    a = binarize_static(img, Binarization("sample_once", 7))
    b = binarize_static(img, Binarization("sample_once", 7))
    c = binarize_static(img, Binarization("sample_once", 8))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_binarize_rejects_out_of_range():
    with pytest.raises(ContractViolation):
        binarize_static(np.array([[1.5]]), Binarization("threshold"))


# ---------------------------------------------------------------------------
# partition / batching / halves
# ---------------------------------------------------------------------------


def test_partition_counts_and_order():
    raw = np.arange(60000, dtype=float)[:, None]
    train, valid = partition(raw)
    assert train.shape[0] == 50000 and valid.shape[0] == 10000
    assert train[49999, 0] == 49999.0 and valid[0, 0] == 50000.0
    assert not set(train[:, 0]).intersection(valid[:, 0])


def test_partition_wrong_count():
    with pytest.raises(PartitionError):
        partition(np.zeros((59999, 4)))


def test_minibatches_sizes_and_coverage():
    batches = minibatches(10, 3, epoch_seed=1)
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(10))
    assert [b.tolist() for b in minibatches(10, 3, epoch_seed=1)] == [
        b.tolist() for b in batches
    ]
    assert [b.tolist() for b in minibatches(10, 3, epoch_seed=2)] != [
        b.tolist() for b in batches
    ]


def test_minibatch_contract():
    with pytest.raises(ContractViolation):
        minibatches(10, 0, epoch_seed=1)


def test_half_split():
    image = np.repeat(np.arange(28.0), 28)  # pixel value = row index
    top, bottom = half_split(image)
    assert top.max() == 13.0 and bottom.min() == 14.0
    assert np.array_equal(np.concatenate([top, bottom]), image)
    ones = np.ones(784)
    t, b = half_split(ones)
    assert t.sum() == 392.0 and b.sum() == 392.0
    with pytest.raises(ContractViolation):
        half_split(np.ones(780))


# ---------------------------------------------------------------------------
# synthetic corpus + cache
# ---------------------------------------------------------------------------


def test_synthetic_deterministic_and_ranged():
    a = synthetic_images(200, 784, seed=11)
    b = synthetic_images(200, 784, seed=11)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, synthetic_images(200, 784, seed=12))


def test_synthetic_splits_counts():
    splits = load_synthetic_splits(16, seed=3, binarization=Binarization("threshold"))
    assert len(splits["train"]) == 50000
    assert len(splits["valid"]) == 10000
    assert len(splits["test"]) == 10000
    assert splits["train"].images.shape[1] == 16


def test_binarization_static_across_reloads():
    binz = Binarization("sample_once", 9)
    a = load_synthetic_splits(16, seed=3, binarization=binz)["train"].images
    b = load_synthetic_splits(16, seed=3, binarization=binz)["train"].images
    assert np.array_equal(a, b)


def test_dataset_cache_round_trip(tmp_path):
    splits = load_synthetic_splits(16, seed=3, binarization=Binarization("sample_once", 4))
    ds = Dataset(splits["valid"].images[:100], "valid", splits["valid"].binarization)
    path = tmp_path / "valid.cache"
    save_dataset_cache(ds, path)
    back = load_dataset_cache(path)
    assert np.array_equal(back.images, ds.images)
    assert back.split == "valid"
    assert back.binarization == ds.binarization
