"""Feature datasets: binary/CSV ingestion, class-disjoint splits, synthetic data.

The binary feature file is the canonical interchange format:

    magic "DCE1" | u32 version=1 | u64 n | u32 m |
    n*m float64 feature values (little endian, row major) |
    n u32 labels (little endian)

CSV files carry one sample per row, m feature columns followed by one
label column; a header row is optional. Labels are remapped to dense
0..C-1 integers on ingestion, with the original values recorded in
``sample_ids``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .validation import as_generator, check_feature_matrix, check_labels

MAGIC = b"DCE1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureDataset:
    """n feature vectors in R^m with integer class labels.

    Immutable after construction: the arrays are marked read-only and the
    instance is safe to share across threads.
    """

    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        feats = check_feature_matrix(self.features, "features")
        labels = check_labels(self.labels, feats.shape[0], "labels")
        ids = np.asarray(self.sample_ids)
        if ids.shape != (feats.shape[0],):
            raise DataError(
                f"sample_ids has shape {ids.shape}, expected ({feats.shape[0]},)"
            )
        for arr, name in ((feats, "features"), (labels, "labels"), (ids, "sample_ids")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, features, labels, sample_ids=None) -> "FeatureDataset":
        """Build a dataset, generating default sample ids when absent."""
        features = np.array(features, dtype=np.float64)
        labels = np.asarray(labels)
        if sample_ids is None:
            sample_ids = np.array([f"s{i}" for i in range(len(labels))], dtype=object)
        return cls(features, labels, np.asarray(sample_ids, dtype=object))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @cached_property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @cached_property
    def class_indices(self) -> dict:
        """Map class id -> sorted array of sample indices of that class."""
        order = np.argsort(self.labels, kind="stable")
        sorted_labels = self.labels[order]
        bounds = np.searchsorted(sorted_labels, self.classes, side="left")
        bounds = np.append(bounds, len(sorted_labels))
        return {
            int(c): order[bounds[i]:bounds[i + 1]]
            for i, c in enumerate(self.classes)
        }

    def subset(self, indices: np.ndarray) -> "FeatureDataset":
        indices = np.asarray(indices)
        return FeatureDataset(
            self.features[indices].copy(),
            self.labels[indices].copy(),
            self.sample_ids[indices].copy(),
        )


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint train/test class sets covering every label in the source."""

    train_classes: frozenset
    test_classes: frozenset

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise DataError("train and test class sets overlap")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the multi-modal synthetic generator.

    Samples are drawn as a three-level Gaussian hierarchy: mode centers
    placed pairwise at least ``mode_separation`` apart, class centers
    spread ``class_spread`` around their mode, samples spread
    ``noise_sigma`` around their class center. Label = mode index *
    classes_per_mode + class index within the mode.

    With ``subspace_dim`` set, each mode's class centers vary only inside
    a random subspace of that width, private to the mode. Different data
    regions then carry different discriminative directions, which is what
    makes dividing the embedding worthwhile; isotropic offsets (the
    default) make all modes statistically interchangeable.
    """

    num_modes: int = 8
    classes_per_mode: int = 8
    samples_per_class: int = 20
    feature_dim: int = 32
    mode_separation: float = 14.0
    class_spread: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 0
    subspace_dim: Optional[int] = None

    def validate(self) -> None:
        for name in ("num_modes", "classes_per_mode", "samples_per_class", "feature_dim"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.mode_separation > self.class_spread:
            raise DataError(
                f"mode_separation ({self.mode_separation}) must exceed "
                f"class_spread ({self.class_spread})"
            )
        if not self.class_spread >= self.noise_sigma:
            raise DataError(
                f"class_spread ({self.class_spread}) must be >= "
                f"noise_sigma ({self.noise_sigma})"
            )
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.subspace_dim is not None and not (
            1 <= self.subspace_dim <= self.feature_dim
        ):
            raise DataError(
                f"subspace_dim must lie in [1, {self.feature_dim}], "
                f"got {self.subspace_dim}"
            )


def save_dataset(ds: FeatureDataset, path) -> None:
    """Write the binary feature format. Round-trips bit exactly."""
    if ds.labels.size and int(ds.labels.max()) > 0xFFFFFFFF:
        raise DataError("labels exceed the u32 range of the binary format")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQI", FORMAT_VERSION, ds.n, ds.m))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_dataset(path, format: str = "binary", has_header: bool = False) -> FeatureDataset:
    """Read a dataset file in the declared format.

    Labels are remapped to dense 0..C-1; the original (row index, label)
    pair is preserved in sample_ids.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if format == "binary":
        features, labels = _read_binary(path)
    elif format == "csv":
        features, labels = _read_csv(path, has_header)
    else:
        raise DataError(f"unknown dataset format: {format!r}")

    bad = ~np.isfinite(features)
    if bad.any():
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise DataError(f"{path}: non-finite feature value at row {row}")

    originals = np.unique(labels)
    dense = np.searchsorted(originals, labels).astype(np.int64)
    sample_ids = np.array(
        [f"{i}:{orig}" for i, orig in enumerate(labels)], dtype=object
    )
    return FeatureDataset(features, dense, sample_ids)


def _read_binary(path: Path):
    data = path.read_bytes()
    header = MAGIC + struct.pack("<IQI", 0, 0, 0)
    if len(data) < len(header):
        raise DataError(f"{path}: file too short for a binary header")
    if data[:4] != MAGIC:
        raise DataError(f"{path}: bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    version, n, m = struct.unpack_from("<IQI", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    offset = 4 + struct.calcsize("<IQI")
    feat_bytes = n * m * 8
    label_bytes = n * 4
    expected = offset + feat_bytes + label_bytes
    if len(data) != expected:
        actual_rows = max(0, (len(data) - offset)) // (m * 8 + 4) if m else 0
        raise DataError(
            f"{path}: header declares n={n} rows but file size matches "
            f"{actual_rows} (expected {expected} bytes, found {len(data)})"
        )
    features = np.frombuffer(data, dtype="<f8", count=n * m, offset=offset)
    features = features.reshape(n, m).astype(np.float64)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=offset + feat_bytes)
    return features, labels.astype(np.int64)


def _read_csv(path: Path, has_header: bool):
    rows = []
    labels = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader):
            if lineno == 0 and has_header:
                continue
            if not row:
                continue
            if len(row) < 2:
                raise DataError(f"{path}: row {lineno} has {len(row)} columns, need >= 2")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} columns, previous rows had {width}"
                )
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            try:
                labels.append(int(row[-1]))
            except ValueError:
                raise DataError(
                    f"{path}: row {lineno}: label {row[-1]!r} is not an integer"
                ) from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def split_by_class(ds: FeatureDataset, rule) -> tuple:
    """Split into class-disjoint train/test datasets (zero-shot protocol).

    ``rule`` is either a fraction in (0, 1) -- sort class ids ascending and
    send the first ceil(fraction * C) to train -- or an explicit iterable
    of train class ids.
    """
    classes = ds.classes
    if classes.size < 2:
        raise DataError("split_by_class requires at least 2 classes")
    if isinstance(rule, float):
        if not 0.0 < rule < 1.0:
            raise DataError(f"split fraction must lie in (0, 1), got {rule}")
        cut = int(np.ceil(rule * classes.size))
        train_classes = set(int(c) for c in classes[:cut])
    else:
        train_classes = set(int(c) for c in rule)
        unknown = train_classes - set(int(c) for c in classes)
        if unknown:
            raise DataError(f"split rule references unknown class ids: {sorted(unknown)}")
    test_classes = set(int(c) for c in classes) - train_classes
    if not train_classes or not test_classes:
        raise DataError("split must leave both sides non-empty")

    in_train = np.isin(ds.labels, sorted(train_classes))
    split = ClassSplit(frozenset(train_classes), frozenset(test_classes))
    return ds.subset(np.nonzero(in_train)[0]), ds.subset(np.nonzero(~in_train)[0]), split


def generate_synthetic(spec: SynthSpec) -> FeatureDataset:
    """Draw a deterministic multi-modal dataset from the spec."""
    spec.validate()
    rng = as_generator(spec.seed)
    centers = _draw_mode_centers(spec, rng)

    n = spec.num_modes * spec.classes_per_mode * spec.samples_per_class
    features = np.empty((n, spec.feature_dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=object)
    row = 0
    for mode in range(spec.num_modes):
        if spec.subspace_dim is not None:
            basis = np.linalg.qr(
                rng.normal(size=(spec.feature_dim, spec.subspace_dim))
            )[0]
            offsets = rng.normal(
                0.0, spec.class_spread,
                size=(spec.classes_per_mode, spec.subspace_dim),
            ) @ basis.T
            class_centers = centers[mode] + offsets
        else:
            class_centers = centers[mode] + rng.normal(
                0.0, spec.class_spread,
                size=(spec.classes_per_mode, spec.feature_dim),
            )
        for c in range(spec.classes_per_mode):
            block = class_centers[c] + rng.normal(
                0.0, spec.noise_sigma, size=(spec.samples_per_class, spec.feature_dim)
            )
            label = mode * spec.classes_per_mode + c
            for j in range(spec.samples_per_class):
                ids[row + j] = f"m{mode}.c{c}.{j}"
            features[row:row + spec.samples_per_class] = block
            labels[row:row + spec.samples_per_class] = label
            row += spec.samples_per_class
    return FeatureDataset(features, labels, ids)


def _draw_mode_centers(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    # Rejection-sample half-Gaussian centers (features mimic rectified
    # extractor outputs, so centers live in the nonnegative orthant),
    # growing the scale until every pair clears the separation floor.
    scale = spec.mode_separation
    for _ in range(200):
        centers = np.abs(
            rng.normal(0.0, scale, size=(spec.num_modes, spec.feature_dim))
        )
        if spec.num_modes == 1:
            return centers
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.linalg.norm(diffs, axis=-1)
        dist[np.diag_indices_from(dist)] = np.inf
        if dist.min() >= spec.mode_separation:
            return centers
        scale *= 1.25
    raise DataError(
        f"could not place {spec.num_modes} mode centers at separation "
        f">= {spec.mode_separation} in {spec.feature_dim} dimensions"
    )


def mode_of_label(spec: SynthSpec, labels: np.ndarray) -> np.ndarray:
    """Recover each sample's mode index from its synthetic class label."""
    return np.asarray(labels) // spec.classes_per_mode
