#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Synthetic noisy-label datasets.

Gaussian blob generation, class-imbalance resampling, symmetric and
asymmetric label-noise injection, and the plain-text dataset file format:

    #ulc-dataset v1 N C d
    #meta {"kind": "symmetric", "rate": 0.5, ...}
    x_1,...,x_d,true_label,noisy_label

Every randomized operation is a pure function of (input, seed).
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from ulc.errors import ConfigurationError, ContractError, ParseError, ReportIOError

FORMAT_HEADER = "#ulc-dataset"
FORMAT_VERSION = "v1"
META_PREFIX = "#meta "

NOISE_KINDS = {"symmetric", "asymmetric", "none"}
NOISE_CONVENTIONS = {"exclude-self", "include-self"}

# Sub-stream ids so that one experiment seed drives independent generators
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_IMBALANCE = 2
STREAM_NOISE = 3
STREAM_CENTERS = 4


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass(frozen=True)
class NoiseSpec:
    """Provenance of the label noise and class imbalance of a dataset."""

    kind: str = "none"
    rate: float = 0.0
    asym_map: Optional[Dict[int, int]] = None
    imbalance_ratio: float = 1.0
    minority_classes: Tuple[int, ...] = ()
    seed: int = 0
    convention: str = "exclude-self"

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"noise kind must be in {sorted(NOISE_KINDS)}, got {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError(f"noise rate must be in [0, 1], got {self.rate}")
        if self.imbalance_ratio < 1.0:
            raise ConfigurationError(f"imbalance ratio must be >= 1, got {self.imbalance_ratio}")
        if self.convention not in NOISE_CONVENTIONS:
            raise ConfigurationError(f"noise convention must be in {sorted(NOISE_CONVENTIONS)}")
        if self.asym_map:
            for src, dst in self.asym_map.items():
                if src == dst:
                    raise ConfigurationError(f"asymmetric map sends class {src} to itself")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rate": self.rate,
            "asym_map": {str(k): v for k, v in sorted(self.asym_map.items())} if self.asym_map else None,
            "imbalance_ratio": self.imbalance_ratio,
            "minority_classes": list(self.minority_classes),
            "seed": self.seed,
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        asym = d.get("asym_map")
        return cls(
            kind=d.get("kind", "none"),
            rate=float(d.get("rate", 0.0)),
            asym_map={int(k): int(v) for k, v in asym.items()} if asym else None,
            imbalance_ratio=float(d.get("imbalance_ratio", 1.0)),
            minority_classes=tuple(int(c) for c in d.get("minority_classes", ())),
            seed=int(d.get("seed", 0)),
            convention=d.get("convention", "exclude-self"),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features with latent true labels and observed (possibly noisy) labels."""

    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    class_count: int
    meta: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        true_labels = np.array(self.true_labels, dtype=np.int64, copy=True)
        noisy_labels = np.array(self.noisy_labels, dtype=np.int64, copy=True)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ContractError(f"features must be a non-empty N x d matrix, got shape {features.shape}")
        n = features.shape[0]
        if true_labels.shape != (n,) or noisy_labels.shape != (n,):
            raise ContractError("label vectors must have one entry per feature row")
        if self.class_count < 2:
            raise ContractError(f"class_count must be >= 2, got {self.class_count}")
        for name, labels in (("true_labels", true_labels), ("noisy_labels", noisy_labels)):
            if labels.min() < 0 or labels.max() >= self.class_count:
                raise ContractError(f"{name} outside [0, {self.class_count})")
        for arr in (features, true_labels, noisy_labels):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "true_labels", true_labels)
        object.__setattr__(self, "noisy_labels", noisy_labels)

    @property
    def is_noisy(self) -> np.ndarray:
        return self.true_labels != self.noisy_labels

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self, observed: bool = False) -> np.ndarray:
        labels = self.noisy_labels if observed else self.true_labels
        return np.bincount(labels, minlength=self.class_count)

    def noisy_onehot(self) -> np.ndarray:
        return np.eye(self.class_count)[self.noisy_labels]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.meta == other.meta
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.noisy_labels, other.noisy_labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class BlobConfig:
    """Isotropic Gaussian blobs, one per class."""

    class_count: int
    dim: int
    per_class_count: Tuple[int, ...]
    class_centers: Optional[Tuple[Tuple[float, ...], ...]] = None
    center_spread: float = 1.5
    within_std: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        if self.dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {self.dim}")
        if len(self.per_class_count) != self.class_count:
            raise ConfigurationError("per_class_count needs one entry per class")
        if any(int(n) < 1 for n in self.per_class_count):
            raise ConfigurationError(f"per_class_count entries must be >= 1, got {self.per_class_count}")
        if self.center_spread <= 0:
            raise ConfigurationError(f"center_spread must be > 0, got {self.center_spread}")
        if self.within_std <= 0:
            raise ConfigurationError(f"within_std must be > 0, got {self.within_std}")
        if self.class_centers is not None:
            centers = np.asarray(self.class_centers, dtype=np.float64)
            if centers.shape != (self.class_count, self.dim):
                raise ConfigurationError(
                    f"class_centers must be {self.class_count} x {self.dim}, got {centers.shape}"
                )

    def centers(self) -> np.ndarray:
        """Explicit centers, or centers drawn from N(0, center_spread^2) under the seed."""
        if self.class_centers is not None:
            return np.asarray(self.class_centers, dtype=np.float64)
        rng = _rng(self.seed, STREAM_CENTERS)
        return rng.normal(0.0, self.center_spread, size=(self.class_count, self.dim))

    @classmethod
    def balanced(cls, class_count: int, dim: int, per_class: int, **kwargs) -> "BlobConfig":
        return cls(class_count=class_count, dim=dim, per_class_count=(per_class,) * class_count, **kwargs)


def generate_blobs(config: BlobConfig, stream: int = STREAM_TRAIN) -> Dataset:
    """
    Draw a noise-free blob dataset

    Args:
        config (BlobConfig): blob layout
        stream (int): RNG sub-stream; the test split reuses the centers with another stream

    Returns:
        Dataset: samples grouped by class, noisy_labels == true_labels
    """
    config.validate()
    centers = config.centers()
    rng = _rng(config.seed, stream)
    blocks, labels = [], []
    for c, n in enumerate(config.per_class_count):
        blocks.append(rng.normal(centers[c], config.within_std, size=(int(n), config.dim)))
        labels.append(np.full(int(n), c, dtype=np.int64))
    y = np.concatenate(labels)
    return Dataset(
        features=np.vstack(blocks),
        true_labels=y,
        noisy_labels=y,
        class_count=config.class_count,
        meta=NoiseSpec(seed=config.seed),
    )


def resample_imbalance(data: Dataset, ratio: float, seed: int) -> Dataset:
    """
    Sub-sample half of the classes to 1/ratio of their size

    Args:
        data (Dataset): noise-free dataset
        ratio (float): imbalance ratio, >= 1
        seed (int): picks the minority classes and the retained samples

    Returns:
        Dataset: retained samples in their original order, minority classes recorded in meta
    """
    if ratio < 1:
        raise ConfigurationError(f"imbalance ratio must be >= 1, got {ratio}")
    if data.is_noisy.any():
        raise ContractError("resample_imbalance expects a noise-free dataset; inject noise afterwards")
    rng = _rng(seed, STREAM_IMBALANCE)
    c = data.class_count
    minority = np.sort(rng.choice(c, size=c // 2, replace=False))
    keep = np.ones(data.size, dtype=bool)
    for cls in minority:
        idx = np.flatnonzero(data.true_labels == cls)
        n_keep = math.ceil(len(idx) / ratio)
        retained = rng.choice(idx, size=n_keep, replace=False)
        keep[idx] = False
        keep[retained] = True
    meta = replace(data.meta, imbalance_ratio=float(ratio), minority_classes=tuple(int(m) for m in minority))
    return Dataset(
        features=data.features[keep],
        true_labels=data.true_labels[keep],
        noisy_labels=data.noisy_labels[keep],
        class_count=c,
        meta=meta,
    )


def inject_symmetric_noise(data: Dataset, rate: float, seed: int, convention: str = "exclude-self") -> Dataset:
    """
    Flip each label with probability rate

    Args:
        data (Dataset): source dataset; noise is drawn relative to the true labels
        rate (float): flip probability in [0, 1]
        seed (int): noise seed
        convention (str): "exclude-self" flips to one of the C-1 other classes,
            "include-self" resamples uniformly over all C classes

    Returns:
        Dataset: same features and true labels, new noisy labels
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"noise rate must be in [0, 1], got {rate}")
    if convention not in NOISE_CONVENTIONS:
        raise ConfigurationError(f"noise convention must be in {sorted(NOISE_CONVENTIONS)}")
    rng = _rng(seed, STREAM_NOISE)
    c = data.class_count
    n = data.size
    flip = rng.random(n) < rate
    if convention == "exclude-self":
        offsets = rng.integers(1, c, size=n)
        targets = (data.true_labels + offsets) % c
    else:
        targets = rng.integers(0, c, size=n)
    noisy = np.where(flip, targets, data.true_labels)
    meta = replace(data.meta, kind="symmetric", rate=float(rate), asym_map=None, seed=seed, convention=convention)
    return replace(data, noisy_labels=noisy, meta=meta)


def cyclic_map(class_count: int) -> Dict[int, int]:
    """Default asymmetric map c -> (c + 1) mod C."""
    return {c: (c + 1) % class_count for c in range(class_count)}


def inject_asymmetric_noise(
    data: Dataset, rate: float, seed: int, asym_map: Optional[Dict[int, int]] = None
) -> Dataset:
    """
    Flip samples of mapped classes to their target class with probability rate

    Args:
        data (Dataset): source dataset
        rate (float): flip probability in [0, 1]
        seed (int): noise seed
        asym_map (dict, optional): class -> target class. Defaults to the cyclic map.

    Returns:
        Dataset: new noisy labels; unmapped classes untouched
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"noise rate must be in [0, 1], got {rate}")
    c = data.class_count
    mapping = dict(asym_map) if asym_map is not None else cyclic_map(c)
    for src, dst in mapping.items():
        if not (0 <= src < c and 0 <= dst < c):
            raise ConfigurationError(f"asymmetric map entry {src}->{dst} outside [0, {c})")
        if src == dst:
            raise ConfigurationError(f"asymmetric map sends class {src} to itself")
    rng = _rng(seed, STREAM_NOISE)
    lookup = np.arange(c)
    mapped = np.zeros(c, dtype=bool)
    for src, dst in mapping.items():
        lookup[src] = dst
        mapped[src] = True
    flip = (rng.random(data.size) < rate) & mapped[data.true_labels]
    noisy = np.where(flip, lookup[data.true_labels], data.true_labels)
    meta = replace(data.meta, kind="asymmetric", rate=float(rate), asym_map=mapping, seed=seed)
    return replace(data, noisy_labels=noisy, meta=meta)


def make_experiment(
    classes: int = 10,
    dim: int = 8,
    per_class: int = 500,
    test_per_class: int = 200,
    imbalance_ratio: float = 1.0,
    noise: str = "sym",
    noise_rate: float = 0.0,
    seed: int = 0,
    convention: str = "exclude-self",
    center_spread: float = 1.5,
    within_std: float = 1.0,
) -> Tuple[Dataset, Dataset]:
    """
    Build a (noisy, possibly imbalanced) training set and a balanced clean test set

    The test set shares the training class centers and is never resampled,
    so accuracies stay comparable with the balanced setting.

    Returns:
        tuple: (train, test)
    """
    blob = BlobConfig.balanced(
        classes, dim, per_class, center_spread=center_spread, within_std=within_std, seed=seed
    )
    train = generate_blobs(blob)
    test = generate_blobs(replace(blob, per_class_count=(test_per_class,) * classes), stream=STREAM_TEST)
    train = resample_imbalance(train, imbalance_ratio, seed)
    if noise == "sym":
        train = inject_symmetric_noise(train, noise_rate, seed, convention=convention)
    elif noise == "asym":
        train = inject_asymmetric_noise(train, noise_rate, seed)
    elif noise != "none":
        raise ConfigurationError(f"noise must be sym, asym or none, got {noise!r}")
    test = replace(test, meta=replace(test.meta, minority_classes=train.meta.minority_classes))
    return train, test


def save(data: Dataset, path: str) -> None:
    """
    Write a dataset in the v1 text format

    Args:
        data (Dataset): dataset to persist
        path (str): destination file
    """
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise ReportIOError("directory does not exist", directory)
    lines = [
        f"{FORMAT_HEADER} {FORMAT_VERSION} {data.size} {data.class_count} {data.dim}",
        META_PREFIX + json.dumps(data.meta.to_dict(), sort_keys=True),
    ]
    for row, t, y in zip(data.features.tolist(), data.true_labels.tolist(), data.noisy_labels.tolist()):
        lines.append(",".join([repr(v) for v in row] + [str(t), str(y)]))
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise ReportIOError(f"cannot write dataset ({e.strerror})", path)


def _parse_header(line: str) -> Tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 5 or parts[0] != FORMAT_HEADER:
        raise ParseError(f"expected header '{FORMAT_HEADER} {FORMAT_VERSION} N C d'", line=1, field="header")
    if parts[1] != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {parts[1]!r}", line=1, field="version")
    try:
        n, c, d = (int(p) for p in parts[2:])
    except ValueError:
        raise ParseError("N, C and d must be integers", line=1, field="header")
    if n < 1 or c < 2 or d < 1:
        raise ParseError(f"invalid sizes N={n} C={c} d={d}", line=1, field="header")
    return n, c, d


def _parse_label(text: str, c: int, lineno: int, name: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"label {text!r} is not an integer", line=lineno, field=name)
    if not 0 <= value < c:
        raise ParseError(f"label {value} outside [0, {c})", line=lineno, field=name)
    return value


def load(path: str) -> Dataset:
    """
    Read a dataset written by save()

    Args:
        path (str): dataset file

    Raises:
        ParseError: with line number and field for malformed content

    Returns:
        Dataset: the stored dataset
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ReportIOError(f"cannot read dataset ({e.strerror})", path)
    try:
        raw = blob.decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        lineno = blob.count(b"\n", 0, e.start) + 1
        raise ParseError(f"invalid UTF-8 byte at offset {e.start}", line=lineno, field="encoding")
    if not raw:
        raise ParseError("empty dataset file", line=1, field="header")
    n, c, d = _parse_header(raw[0])
    meta = NoiseSpec()
    features = []
    true_labels, noisy_labels = [], []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        if line.startswith(META_PREFIX):
            try:
                meta = NoiseSpec.from_dict(json.loads(line[len(META_PREFIX):]))
            except (json.JSONDecodeError, ConfigurationError, TypeError, ValueError) as e:
                raise ParseError(f"bad metadata: {e}", line=lineno, field="meta")
            continue
        cols = line.split(",")
        if len(cols) != d + 2:
            raise ParseError(f"row has {len(cols)} columns, expected {d + 2}", line=lineno, field="row")
        try:
            features.append([float(v) for v in cols[:d]])
        except ValueError:
            bad = next(j for j, v in enumerate(cols[:d]) if not _is_float(v))
            raise ParseError(f"feature {cols[bad]!r} is not a number", line=lineno, field=f"x{bad}")
        true_labels.append(_parse_label(cols[d], c, lineno, "true_label"))
        noisy_labels.append(_parse_label(cols[d + 1], c, lineno, "noisy_label"))
    if len(features) != n:
        raise ParseError(f"header declares {n} records, found {len(features)}", line=len(raw), field="N")
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        true_labels=np.asarray(true_labels, dtype=np.int64),
        noisy_labels=np.asarray(noisy_labels, dtype=np.int64),
        class_count=c,
        meta=meta,
    )


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False
