import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stnadapt.containers import (
    ContainerError,
    read_checkpoint,
    read_dataset,
    split_counts,
    split_indices,
    write_checkpoint,
    write_dataset,
)


def sample_pair(n=7, f=2, h=4, w=6, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, f, h, w)).astype(np.float32),
            rng.standard_normal((n, d)).astype(np.float32))


def test_dataset_roundtrip_bitwise(tmp_path):
    images, spectra = sample_pair()
    path = tmp_path / "a.utis"
    write_dataset(path, images, spectra)
    ri, rs = read_dataset(path)
    assert np.array_equal(ri, images) and ri.dtype == np.float32
    assert np.array_equal(rs, spectra)


def test_dataset_header_layout(tmp_path):
    images, spectra = sample_pair(n=3, f=1, h=2, w=2, d=4)
    path = tmp_path / "a.utis"
    write_dataset(path, images, spectra)
    raw = path.read_bytes()
    assert raw[:4] == b"UTIS"
    assert raw[4:8] == bytes([1, 0, 0, 0])
    assert np.array_equal(np.frombuffer(raw[8:28], "<u4"), [3, 1, 2, 2, 4])
    assert len(raw) == 28 + 3 * 1 * 2 * 2 * 4 + 3 * 4 * 4


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.utis"
    path.write_bytes(b"NOPE" + bytes(24))
    with pytest.raises(ContainerError):
        read_dataset(path)


def test_dataset_rejects_truncation(tmp_path):
    images, spectra = sample_pair()
    path = tmp_path / "a.utis"
    write_dataset(path, images, spectra)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ContainerError):
        read_dataset(path)


def test_dataset_rejects_count_mismatch(tmp_path):
    images, spectra = sample_pair()
    with pytest.raises(ContainerError):
        write_dataset(tmp_path / "a.utis", images, spectra[:-1])


def test_split_counts_8000():
    assert split_counts(8000) == (6800, 800, 400)


def test_split_counts_1900():
    n_train, n_val, n_test = split_counts(1900)
    assert (n_train, n_val, n_test) == (1615, 190, 95)


@settings(max_examples=50, deadline=None)
@given(st.integers(20, 100_000))
def test_split_partitions_everything(n):
    idx = split_indices(n)
    merged = np.concatenate([idx["train"], idx["val"], idx["test"]])
    assert len(merged) == n
    assert len(np.unique(merged)) == n
    assert sum(split_counts(n)) == n


def test_split_deterministic_from_count_alone():
    a = split_indices(123)
    b = split_indices(123)
    for key in ("train", "val", "test"):
        assert np.array_equal(a[key], b[key])


def test_split_differs_across_counts():
    a = split_indices(400)["train"]
    b = split_indices(401)["train"][: len(a)]
    assert not np.array_equal(a, b)


def test_checkpoint_roundtrip_preserves_order_and_bits(tmp_path):
    rng = np.random.default_rng(4)
    tensors = {
        "trunk.c1.w": rng.standard_normal((3, 1, 3, 3)).astype(np.float32),
        "trunk.c1.b": rng.standard_normal(3).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, tensors)
    back = read_checkpoint(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert np.array_equal(back[name], np.asarray(tensors[name], np.float32))
        assert back[name].shape == np.asarray(tensors[name]).shape


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ContainerError):
        read_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, {"w": np.zeros(2, np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ContainerError):
        read_checkpoint(path)
