"""Datasets, synthetic data, IDX/CSV ingestion and the two-round contribution split."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    IdxCountError,
    IdxMagicError,
    IdxTruncatedError,
    ParameterError,
)

BENIGN = "benign"
ADVERSARY = "adversary"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class DataPoint:
    id: int
    features: np.ndarray
    label: int
    provenance: str = BENIGN


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented dataset; ``X`` rows are feature vectors."""

    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    provenance: np.ndarray
    num_classes: int
    dim: int = field(init=False)

    def __post_init__(self):
        ids = _frozen(np.asarray(self.ids, dtype=np.int64).reshape(-1))
        X = np.asarray(self.X, dtype=np.float64)
        if not (X.ndim == 2 and len(X) == len(ids)):
            # reshape(0, -1) is ambiguous, so empty inputs must already be (0, dim)
            X = X.reshape(len(ids), -1)
        X = _frozen(X)
        y = _frozen(np.asarray(self.y, dtype=np.int64).reshape(-1))
        prov = _frozen(np.asarray(self.provenance, dtype="<U9").reshape(-1))
        if not (len(ids) == len(y) == len(prov)):
            raise DimensionError("ids, labels and provenance must have equal length")
        if len(np.unique(ids)) != len(ids):
            raise ParameterError("ids must be unique within a dataset")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ParameterError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "dim", X.shape[1])

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> DataPoint:
        return DataPoint(int(self.ids[i]), self.X[i], int(self.y[i]), str(self.provenance[i]))

    @property
    def points(self):
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.ids[index], self.X[index], self.y[index], self.provenance[index], self.num_classes)

    def select_ids(self, ids) -> Dataset:
        pos = {int(k): i for i, k in enumerate(self.ids)}
        return self.subset(np.array([pos[int(k)] for k in ids], dtype=np.int64))

    def with_features(self, X) -> Dataset:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != self.X.shape:
            raise DimensionError(f"feature shape {X.shape} != {self.X.shape}")
        return Dataset(self.ids, X, self.y, self.provenance, self.num_classes)

    def with_provenance(self, provenance: str) -> Dataset:
        return Dataset(self.ids, self.X, self.y, np.full(len(self), provenance), self.num_classes)

    def concat(self, *others: Dataset) -> Dataset:
        parts = [self, *others]
        if len({p.dim for p in parts if len(p)}) > 1:
            raise DimensionError("cannot concatenate datasets of different dimension")
        return Dataset(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.X for p in parts]).reshape(-1, self.dim),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.provenance for p in parts]),
            self.num_classes,
        )

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.ids, self.X, self.y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("|".join(self.provenance.tolist()).encode())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


def from_arrays(X, y, num_classes=None, ids=None, provenance=BENIGN) -> Dataset:
    y = np.asarray(y, dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    if ids is None:
        ids = np.arange(len(y))
    return Dataset(ids, X, y, np.full(len(y), provenance), num_classes)


def synth_blobs(n, num_classes, dim, spread, seed) -> Dataset:
    """Class-balanced isotropic Gaussian blobs clipped to the unit cube."""
    if num_classes < 2 or n < num_classes or dim < 1:
        raise ParameterError("need n >= num_classes >= 2 and dim >= 1")
    if not spread > 0:
        raise ParameterError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    y = np.sort(np.arange(n) % num_classes)
    X = np.clip(centers[y] + spread * rng.standard_normal((n, dim)), 0.0, 1.0)
    return from_arrays(X, y, num_classes)


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten digits set shipped with scikit-learn, scaled to [0,1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return from_arrays(bunch.data / 16.0, bunch.target, 10)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxTruncatedError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(images_path, labels_path) -> Dataset:
    with _open(images_path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "image header"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image header"))
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, "image data"), dtype=np.uint8)
    with _open(labels_path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "label header"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(f"label file magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        (nlab,) = struct.unpack(">I", _read_exact(f, 4, "label header"))
        if nlab != count:
            raise IdxCountError(f"{count} images but {nlab} labels")
        labels = np.frombuffer(_read_exact(f, nlab, "label data"), dtype=np.uint8)
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return from_arrays(X, labels.astype(np.int64), 10)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (n, rows, cols) and labels in the IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_csv(path, num_classes=None) -> Dataset:
    with open(path) as f:
        header = f.readline().strip().split(",")
    if not header or header[0] != "label":
        raise ParameterError("CSV header must start with 'label'")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return from_arrays(data[:, 1:], data[:, 0].astype(np.int64), num_classes)


def save_csv(d: Dataset, path):
    header = ",".join(["label", *[f"f{i}" for i in range(d.dim)]])
    rows = np.concatenate([d.y[:, None].astype(np.float64), d.X], axis=1)
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.17g"] * d.dim)


def save_dataset(d: Dataset, path):
    meta = json.dumps({"format": "dataset", "version": 1, "dim": d.dim, "num_classes": d.num_classes})
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(meta), ids=d.ids, X=d.X, y=d.y, provenance=d.provenance)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "dataset":
            raise ParameterError(f"{path} is not a dataset snapshot")
        return Dataset(z["ids"], z["X"].reshape(-1, meta["dim"]), z["y"], z["provenance"], meta["num_classes"])


@dataclass(frozen=True)
class SplitSizes:
    z0: int = 2000
    z1_new_benign: int = 150
    z1_adversary: int = 50
    v0: int = 200
    v1: int = 200

    def total(self):
        return self.z0 + self.z1_new_benign + self.z1_adversary + self.v0 + self.v1


@dataclass(frozen=True)
class ContributionSplit:
    z0: Dataset
    z1_benign_new: Dataset
    z1_adversary_source: Dataset
    v0: Dataset
    v1: Dataset
    pool: Dataset  # everything left over; the adversary's shadow data comes from here

    @property
    def z1_benign(self) -> Dataset:
        return self.z0.concat(self.z1_benign_new)

    def assemble_t1(self, adversary: Dataset | None = None) -> Dataset:
        """Training set at t=1: all of Z0, the new benign points, then the adversary's points."""
        adv = self.z1_adversary_source if adversary is None else adversary
        if set(adv.ids.tolist()) != set(self.z1_adversary_source.ids.tolist()):
            raise ParameterError("adversary dataset must keep the ids of the source points")
        return self.z1_benign.concat(adv.with_provenance(ADVERSARY))


def split_contribution(d: Dataset, sizes: SplitSizes, seed) -> ContributionSplit:
    if min(sizes.z0, sizes.z1_adversary, sizes.v0, sizes.v1) < 1 or sizes.z1_new_benign < 0:
        raise ParameterError("split sizes must be >= 1 (new benign >= 0)")
    if sizes.total() > len(d):
        raise ParameterError(f"split needs {sizes.total()} points, dataset has {len(d)}")
    perm = np.random.default_rng(seed).permutation(len(d))
    bounds = np.cumsum([sizes.z0, sizes.z1_new_benign, sizes.z1_adversary, sizes.v0, sizes.v1])
    z0, new, adv, v0, v1, rest = np.split(perm, bounds)
    benign = lambda idx: d.subset(np.sort(idx)).with_provenance(BENIGN)  # noqa: E731
    return ContributionSplit(
        z0=benign(z0),
        z1_benign_new=benign(new),
        z1_adversary_source=d.subset(np.sort(adv)).with_provenance(ADVERSARY),
        v0=benign(v0),
        v1=benign(v1),
        pool=benign(rest),
    )
