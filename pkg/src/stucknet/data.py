"""Fetching, verification and decoding of MNIST-family datasets in IDX format."""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Computed digests are logged for files whose manifest entry carries this
# sentinel, so they can be pinned after a first trusted download.
UNPINNED = "-"

MIRROR_ENV = "STUCKNET_MIRROR"

_MIRRORS = {
    "fashion-mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com",
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist",
}

_FILE_ROLES = ("train-images", "train-labels", "test-images", "test-labels")

_CANONICAL_NAMES = {
    "train-images": "train-images-idx3-ubyte",
    "train-labels": "train-labels-idx1-ubyte",
    "test-images": "t10k-images-idx3-ubyte",
    "test-labels": "t10k-labels-idx1-ubyte",
}


class DataError(Exception):
    """Raised for malformed IDX files, bad manifests or failed verification."""


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    url: str
    sha256: str
    path: str


@dataclass(frozen=True)
class DatasetManifest:
    dataset: str
    entries: dict[str, ManifestEntry]

    def __post_init__(self):
        missing = [r for r in _FILE_ROLES if r not in self.entries]
        if missing:
            raise DataError(f"manifest for {self.dataset!r} missing entries: {missing}")


@dataclass
class ImageSet:
    """Normalized images (N, 784) in [0, 1] with integer labels in 0..9."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[1] != 784:
            raise DataError(f"images must have shape (N, 784), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("image/label count mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixels outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataError("labels outside 0..9")

    def __len__(self):
        return self.images.shape[0]


def default_manifest(dataset: str, data_dir: str | os.PathLike = "data") -> DatasetManifest:
    if dataset not in _MIRRORS:
        raise DataError(f"unknown dataset {dataset!r}; expected one of {sorted(_MIRRORS)}")
    base = os.environ.get(MIRROR_ENV, _MIRRORS[dataset]).rstrip("/")
    entries = {}
    for role in _FILE_ROLES:
        fname = _CANONICAL_NAMES[role]
        entries[role] = ManifestEntry(
            name=role,
            url=f"{base}/{fname}.gz",
            sha256=UNPINNED,
            path=str(Path(data_dir) / dataset / fname),
        )
    return DatasetManifest(dataset=dataset, entries=entries)


def parse_manifest(path: str | os.PathLike, dataset: str | None = None) -> DatasetManifest:
    """Parse a line-oriented ``name url sha256 path`` manifest file."""
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'name url sha256 path'")
        name, url, sha, fpath = parts
        entries[name] = ManifestEntry(name=name, url=url, sha256=sha, path=fpath)
    return DatasetManifest(dataset=dataset or Path(path).stem, entries=entries)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify(entry: ManifestEntry, archive: Path) -> None:
    digest = _sha256(archive)
    if entry.sha256 == UNPINNED:
        log.warning("no pinned digest for %s; downloaded file has sha256 %s", entry.name, digest)
        return
    if digest != entry.sha256.lower():
        archive.unlink(missing_ok=True)
        raise DataError(
            f"checksum mismatch for {archive.name}: expected {entry.sha256}, got {digest}"
        )


def fetch_dataset(manifest: DatasetManifest, dest_dir: str | os.PathLike | None = None) -> list[Path]:
    """Ensure all four dataset files exist locally and match the manifest.

    Archives are kept beside the decompressed files for re-verification.
    Already-verified files are left untouched. Concurrent fetches of the
    same file are serialized with an exclusive file lock.
    """
    out = []
    for role in _FILE_ROLES:
        entry = manifest.entries[role]
        target = Path(entry.path)
        if dest_dir is not None:
            target = Path(dest_dir) / target.name
        archive = target.with_name(target.name + ".gz")
        target.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(target) + ".lock"):
            if archive.exists():
                _verify(entry, archive)
            else:
                log.info("downloading %s", entry.url)
                tmp = archive.with_suffix(".gz.part")
                try:
                    with urllib.request.urlopen(entry.url) as resp, open(tmp, "wb") as f:
                        while chunk := resp.read(1 << 20):
                            f.write(chunk)
                except OSError as e:
                    tmp.unlink(missing_ok=True)
                    raise DataError(f"download failed for {entry.url}: {e}") from e
                tmp.rename(archive)
                _verify(entry, archive)
            if not target.exists():
                with gzip.open(archive, "rb") as src:
                    target.write_bytes(src.read())
        out.append(target)
    return out


def load_idx_images(path: str | os.PathLike) -> np.ndarray:
    """Decode an IDX image file into a (N, 28, 28) uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != IMAGE_MAGIC:
        raise DataError(f"{path}: not an image file (magic 0x{magic:08x})")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    n, rows, cols = struct.unpack(">III", raw[4:16])
    expected = n * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path: str | os.PathLike) -> np.ndarray:
    """Decode an IDX label file into a (N,) uint8 array with labels in 0..9."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != LABEL_MAGIC:
        raise DataError(f"{path}: not a label file (magic 0x{magic:08x})")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    n = struct.unpack(">I", raw[4:8])[0]
    payload = raw[8:]
    if len(payload) != n:
        raise DataError(f"{path}: expected {n} labels, got {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8)
    if labels.size and labels.max() > 9:
        raise DataError(f"{path}: label {labels.max()} out of range 0..9")
    return labels


def write_idx_images(path: str | os.PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def normalize(raw: np.ndarray, labels: np.ndarray) -> ImageSet:
    """Scale uint8 pixels to [0, 1] (p / 255 exactly) and flatten to 784."""
    raw = np.asarray(raw)
    images = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
    return ImageSet(images=images, labels=np.asarray(labels, dtype=np.int64))


def load_dataset(dataset: str, data_dir: str | os.PathLike = "data") -> tuple[ImageSet, ImageSet]:
    """Load previously fetched train and test splits from ``data_dir``."""
    root = Path(data_dir) / dataset
    train = normalize(
        load_idx_images(root / _CANONICAL_NAMES["train-images"]),
        load_idx_labels(root / _CANONICAL_NAMES["train-labels"]),
    )
    test = normalize(
        load_idx_images(root / _CANONICAL_NAMES["test-images"]),
        load_idx_labels(root / _CANONICAL_NAMES["test-labels"]),
    )
    return train, test


def minibatches(data: ImageSet | int, batch: int, shuffle: bool, seed: int) -> list[np.ndarray]:
    """Partition indices 0..N-1 into batches; the last batch may be short."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    n = data if isinstance(data, int) else len(data)
    idx = np.arange(n)
    if shuffle:
        np.random.default_rng(seed).shuffle(idx)
    return [idx[i : i + batch] for i in range(0, n, batch)]
