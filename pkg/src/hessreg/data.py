"""Dataset plumbing: IDX files, synthetic generators, splits, pooling.

IDX is the big-endian binary format of the classic digit benchmarks:
magic 0x00000803 for uint8 image cubes (N x H x W), 0x00000801 for uint8
label vectors. Images load scaled by 1/255 into [0, 1] and write back as
the exact original bytes.

Loaders never touch the network; fetching is an explicit CLI step that
records SHA-256 checksums into a manifest, which loaders then verify.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Dataset",
    "DataError",
    "load_idx",
    "write_idx",
    "make_blobs",
    "make_quadratic_boundary",
    "quadratic_boundary_label",
    "holdout_split",
    "downsample",
    "load_manifest",
    "write_manifest",
    "sha256_file",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs, integer labels, and enough metadata to evaluate safely:
    the class count and the legal feature range (None = unclamped)."""

    X: np.ndarray
    y: np.ndarray
    name: str
    K: int
    clamp: tuple | None = (0.0, 1.0)
    split: str = "full"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError(
                f"{self.X.shape[0]} inputs but {self.y.shape[0]} labels"
            )
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise DataError(f"labels outside [0, {self.K})")
        if self.clamp is not None and self.X.size:
            lo, hi = self.clamp
            if self.X.min() < lo - 1e-12 or self.X.max() > hi + 1e-12:
                raise DataError(
                    f"features outside declared clamp range [{lo}, {hi}]"
                )

    def __len__(self):
        return self.X.shape[0]

    @property
    def input_shape(self):
        return self.X.shape[1:]

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        return replace(
            self, X=self.X[idx], y=self.y[idx], split=split or self.split
        )


# ----------------------------------------------------------------------
# IDX binary format


def _read_exact(path):
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, name="idx", clamp=(0.0, 1.0), K=None):
    """Read an images/labels IDX pair into a Dataset scaled to [0, 1].

    ``K`` defaults to max(label) + 1; pass it explicitly when a subset may
    not contain every class."""
    blob = _read_exact(images_path)
    if len(blob) < 16:
        raise DataError(f"{images_path}: truncated header")
    magic, n, h, w = struct.unpack_from(">IIII", blob, 0)
    if magic != IMAGE_MAGIC:
        raise DataError(
            f"{images_path}: magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )
    if len(blob) != 16 + n * h * w:
        raise DataError(
            f"{images_path}: {len(blob)} bytes, header promises {16 + n * h * w}"
        )
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, h, w)

    lblob = _read_exact(labels_path)
    if len(lblob) < 8:
        raise DataError(f"{labels_path}: truncated header")
    lmagic, ln = struct.unpack_from(">II", lblob, 0)
    if lmagic != LABEL_MAGIC:
        raise DataError(
            f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )
    if len(lblob) != 8 + ln:
        raise DataError(f"{labels_path}: {len(lblob)} bytes, header promises {8 + ln}")
    if ln != n:
        raise DataError(f"{n} images but {ln} labels")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    if K is None:
        K = int(labels.max()) + 1 if ln else 10
    return Dataset(
        X=images.astype(np.float64) / 255.0,
        y=labels,
        name=name,
        K=K,
        clamp=clamp,
    )


def write_idx(images_path, labels_path, dataset):
    """Write a Dataset back to an IDX pair; inverse of load_idx on the
    byte level (pixels are rounded to the original uint8 grid)."""
    x = dataset.X
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 3:
        raise DataError(f"IDX images must be N x H x W, got shape {x.shape}")
    n, h, w = x.shape
    pixels = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.y.astype(np.uint8).tobytes())


# ----------------------------------------------------------------------
# synthetic generators


def make_blobs(n, K, d, separation=4.0, seed=0):
    """Balanced Gaussian clusters with unit covariance, centers
    ``separation`` apart along orthogonal directions when K <= d (random
    units otherwise). Large separation makes the set linearly separable."""
    if n < K:
        raise DataError(f"need at least one point per class, n={n} < K={K}")
    rng = np.random.default_rng(seed)
    if K <= d:
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        centers = separation * basis[:, :K].T
    else:
        dirs = rng.normal(size=(K, d))
        centers = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    counts = np.full(K, n // K)
    counts[: n % K] += 1
    y = np.repeat(np.arange(K), counts)
    X = centers[y] + rng.normal(size=(n, d))
    order = rng.permutation(n)
    return Dataset(X=X[order], y=y[order], name="blobs", K=K, clamp=None)


def quadratic_boundary_label(x):
    """0 inside the band where 1 - x1^2/2 > 0, else 1 (argmax of the
    score pair (1 - x1^2/2, 0))."""
    x = np.asarray(x, dtype=np.float64)
    x1 = x[..., 0]
    return (1.0 - 0.5 * x1 * x1 <= 0.0).astype(np.int64)


def make_quadratic_boundary(n, seed=0, box=3.0, d=2):
    """Points uniform in [-box, box]^d labeled by the curved boundary
    |x1| = sqrt(2); the matching closed-form scorer separates it exactly."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-box, box, size=(n, d))
    return Dataset(
        X=X, y=quadratic_boundary_label(X), name="quadratic_boundary", K=2, clamp=None
    )


# ----------------------------------------------------------------------
# transforms


def holdout_split(dataset, fraction=0.05, seed=0):
    """Disjoint seeded (train, eval) partition; eval gets round(N*fraction)."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_eval = int(round(n * fraction))
    if n_eval == 0 or n_eval == n:
        raise DataError(
            f"fraction {fraction} leaves an empty side for {n} samples"
        )
    order = np.random.default_rng(seed).permutation(n)
    return (
        dataset.subset(np.sort(order[n_eval:]), split="train"),
        dataset.subset(np.sort(order[:n_eval]), split="eval"),
    )


def downsample(dataset, factor):
    """Average-pool spatial dims by an integer factor (dims must divide)."""
    factor = int(factor)
    if factor < 1:
        raise DataError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return dataset
    x = dataset.X
    chan = x.ndim == 4
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise DataError(f"downsample needs image data, got shape {dataset.X.shape}")
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise DataError(f"spatial dims {h}x{w} not divisible by {factor}")
    pooled = x.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    if not chan:
        pooled = pooled[..., 0]
    return replace(dataset, X=pooled)


# ----------------------------------------------------------------------
# manifest with checksums


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, name, images_path, labels_path, K=10, clamp=(0.0, 1.0)):
    import os

    # store portable relative paths when the files sit near the manifest
    root = os.path.dirname(os.path.abspath(path))

    def _display(p):
        rel = os.path.relpath(os.path.abspath(p), root)
        return rel if not rel.startswith("..") else str(p)

    manifest = {
        "name": name,
        "images": _display(images_path),
        "labels": _display(labels_path),
        "sha256_images": sha256_file(images_path),
        "sha256_labels": sha256_file(labels_path),
        "K": K,
        "clamp": list(clamp) if clamp is not None else None,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path, base_dir=None):
    """Load the dataset a manifest points to, verifying its checksums."""
    import os

    with open(path) as fh:
        manifest = json.load(fh)
    root = base_dir if base_dir is not None else os.path.dirname(os.path.abspath(path))

    def _resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    images, labels = _resolve(manifest["images"]), _resolve(manifest["labels"])
    for fpath, key in ((images, "sha256_images"), (labels, "sha256_labels")):
        got = sha256_file(fpath)
        if got != manifest[key]:
            raise DataError(
                f"{fpath}: checksum {got[:12]}... does not match manifest {manifest[key][:12]}..."
            )
    clamp = manifest.get("clamp")
    return load_idx(
        images,
        labels,
        name=manifest["name"],
        clamp=tuple(clamp) if clamp else None,
        K=manifest.get("K"),
    )
