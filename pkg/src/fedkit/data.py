"""MNIST IDX parsing, normalization, and per-client sharding.

Files are read from a data directory, transparently gunzipped when the name
ends in .gz. A fetch helper downloads the four canonical archives and checks
the SHA-256 of the decompressed payload, so any faithful mirror works.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_ROWS = 28
IMAGE_COLS = 28

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

# SHA-256 of the decompressed IDX payloads (canonical distribution).
RAW_SHA256 = {
    TRAIN_IMAGES: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    TRAIN_LABELS: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    TEST_IMAGES: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    TEST_LABELS: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


class IdxParseError(ValueError):
    """Raised when an IDX payload is malformed; the message names the offset."""


@dataclass
class Dataset:
    """Normalized images (N, 784) in [0, 1] and integer labels in 0..9."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Shard:
    """One client's private slice of the training set."""

    client_id: int
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX image file into a (N, 784) uint8 array."""
    if len(data) < 16:
        raise IdxParseError(f"image header truncated at offset {len(data)}, need 16 bytes")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise IdxParseError(f"wrong magic 0x{magic:08x} at offset 0, expected 0x{IMAGE_MAGIC:08x}")
    if (rows, cols) != (IMAGE_ROWS, IMAGE_COLS):
        raise IdxParseError(f"unexpected dims {rows}x{cols} at offset 8, expected 28x28")
    expected = 16 + count * IMAGE_ROWS * IMAGE_COLS
    if len(data) != expected:
        raise IdxParseError(f"payload ends at offset {len(data)}, expected {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, IMAGE_ROWS * IMAGE_COLS)


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode an IDX label file into a (N,) uint8 array with values 0..9."""
    if len(data) < 8:
        raise IdxParseError(f"label header truncated at offset {len(data)}, need 8 bytes")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise IdxParseError(f"wrong magic 0x{magic:08x} at offset 0, expected 0x{LABEL_MAGIC:08x}")
    expected = 8 + count
    if len(data) != expected:
        raise IdxParseError(f"payload ends at offset {len(data)}, expected {expected}")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8)
    if count and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IdxParseError(f"label {labels[bad]} out of range at offset {8 + bad}")
    return labels


def normalize(raw_images: np.ndarray) -> np.ndarray:
    """Scale byte intensities 0..255 into float32 values in [0, 1]."""
    return raw_images.astype(np.float32) / 255.0


def _read_bytes(data_dir: Path, name: str) -> bytes:
    plain = data_dir / name
    gz = data_dir / (name + ".gz")
    if plain.exists():
        return plain.read_bytes()
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(
        f"{name}[.gz] not found in {data_dir}; run `fedkit fetch-data --data-dir {data_dir}`"
    )


def load_split(data_dir: str | Path, split: str) -> Dataset:
    """Load the train or test split from a data directory."""
    data_dir = Path(data_dir)
    if split == "train":
        image_file, label_file = TRAIN_IMAGES, TRAIN_LABELS
    elif split == "test":
        image_file, label_file = TEST_IMAGES, TEST_LABELS
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    images = normalize(parse_idx_images(_read_bytes(data_dir, image_file)))
    labels = parse_idx_labels(_read_bytes(data_dir, label_file))
    if len(images) != len(labels):
        raise IdxParseError(f"{image_file} has {len(images)} images but {label_file} has {len(labels)} labels")
    return Dataset(images=images, labels=labels)


def partition_shards(train: Dataset, n_clients: int, shard_size: int, seed: int) -> list[Shard]:
    """Cut a seeded permutation of the training set into disjoint fixed-size shards.

    Shards are numbered from 1; id 0 is reserved for the coordinator. Leftover
    samples beyond n_clients * shard_size stay unused.
    """
    demand = n_clients * shard_size
    if demand > len(train):
        raise ValueError(f"{n_clients} x {shard_size} samples requested but only {len(train)} available")
    order = np.random.default_rng(seed).permutation(len(train))
    shards = []
    for i in range(n_clients):
        idx = order[i * shard_size:(i + 1) * shard_size]
        shards.append(Shard(client_id=i + 1, images=train.images[idx], labels=train.labels[idx]))
    return shards


def fetch_dataset(data_dir: str | Path, mirrors: tuple[str, ...] = MIRRORS, timeout: float = 60.0) -> None:
    """Download the four canonical archives into data_dir, verifying content hashes.

    Files already present and verifiable are left alone.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, digest in RAW_SHA256.items():
        target = data_dir / (name + ".gz")
        if target.exists() or (data_dir / name).exists():
            raw = _read_bytes(data_dir, name)
            if hashlib.sha256(raw).hexdigest() == digest:
                log.info("%s already present and verified", name)
                continue
            raise IOError(f"existing {name} in {data_dir} fails its checksum; remove it and retry")
        blob = None
        errors = []
        for mirror in mirrors:
            url = mirror + name + ".gz"
            try:
                with urllib.request.urlopen(url, timeout=timeout) as resp:
                    blob = resp.read()
                break
            except OSError as exc:
                errors.append(f"{url}: {exc}")
        if blob is None:
            raise IOError("could not download " + name + ".gz: " + "; ".join(errors))
        raw = gzip.decompress(blob)
        actual = hashlib.sha256(raw).hexdigest()
        if actual != digest:
            raise IOError(f"checksum mismatch for {name}: got {actual}, expected {digest}")
        tmp = target.with_suffix(".gz.part")
        tmp.write_bytes(blob)
        tmp.rename(target)
        log.info("fetched %s (%d bytes)", target.name, len(blob))
