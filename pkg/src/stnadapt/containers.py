"""Bit-exact binary containers: the UTIS dataset file and the UTIS-CKPT
parameter checkpoint, plus the deterministic train/val/test split rule.

UTIS dataset layout: magic ``UTIS``, version byte 0x01, dtype byte 0x00
(float32 little-endian), two reserved zero bytes, then five little-endian
uint32 fields (n_samples, frames_per_sample, height, width, spec_dim),
followed by all image payloads and then all spectra payloads, row-major.

UTIS-CKPT layout: magic ``UTISCKPT``, uint32 version, uint32 tensor count,
then per tensor: uint32 name length, name bytes (utf-8), uint32 rank,
uint32 dims, raw float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"UTIS"
CKPT_MAGIC = b"UTISCKPT"
_SPLIT_SEED = 851005  # fixed stream key for the 85-10-5 assignment


class ContainerError(ValueError):
    """Malformed or inconsistent container content."""


# -- dataset container ---------------------------------------------------


def write_dataset(path, images: np.ndarray, spectra: np.ndarray) -> None:
    """Write paired samples; images [N,F,H,W], spectra [N,D], float32."""
    images = np.ascontiguousarray(images, dtype="<f4")
    spectra = np.ascontiguousarray(spectra, dtype="<f4")
    if images.ndim != 4 or spectra.ndim != 2:
        raise ContainerError(
            f"expected images [N,F,H,W] and spectra [N,D], got "
            f"{images.shape} and {spectra.shape}"
        )
    if images.shape[0] != spectra.shape[0]:
        raise ContainerError(
            f"sample count mismatch: {images.shape[0]} images vs "
            f"{spectra.shape[0]} spectra"
        )
    n, fps, h, w = images.shape
    d = spectra.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(bytes([0x01, 0x00, 0x00, 0x00]))
        fh.write(struct.pack("<5I", n, fps, h, w, d))
        fh.write(images.tobytes())
        fh.write(spectra.tobytes())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset container; returns (images [N,F,H,W], spectra [N,D])."""
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype = raw[4], raw[5]
    if version != 0x01 or dtype != 0x00:
        raise ContainerError(
            f"{path}: unsupported version/dtype bytes {version}/{dtype}"
        )
    if raw[6:8] != b"\x00\x00":
        raise ContainerError(f"{path}: reserved bytes not zero")
    n, fps, h, w, d = struct.unpack("<5I", raw[8:28])
    img_bytes = n * fps * h * w * 4
    expected = 28 + img_bytes + n * d * 4
    if len(raw) != expected:
        raise ContainerError(
            f"{path}: size {len(raw)} does not match header ({expected})"
        )
    images = np.frombuffer(raw, dtype="<f4", count=n * fps * h * w, offset=28)
    spectra = np.frombuffer(raw, dtype="<f4", count=n * d, offset=28 + img_bytes)
    return images.reshape(n, fps, h, w).copy(), spectra.reshape(n, d).copy()


# -- split rule ----------------------------------------------------------


def split_counts(n: int) -> tuple[int, int, int]:
    """85-10-5 sample counts (train, val, test) with rounding to +-1."""
    n_train = int(round(0.85 * n))
    n_val = int(round(0.10 * n))
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


def split_indices(n: int) -> dict[str, np.ndarray]:
    """Deterministic random split; derivable from the sample count alone."""
    n_train, n_val, _ = split_counts(n)
    perm = np.random.default_rng([_SPLIT_SEED, n]).permutation(n)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# -- checkpoint container ------------------------------------------------


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write an ordered name->array mapping as float32 records."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<2I", 1, len(tensors)))
        for name, arr in tensors.items():
            # asarray rather than ascontiguousarray: the latter would
            # silently promote rank-0 tensors to rank 1.
            arr = np.asarray(arr, dtype="<f4", order="C")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint container back into an ordered mapping."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}")
    version, count = struct.unpack("<2I", raw[8:16])
    if version != 1:
        raise ContainerError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    off = 16
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
        off += size * 4
        tensors[name] = arr.reshape(dims).copy()
    if off != len(raw):
        raise ContainerError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors
