"""Learning problems: the orthogonal synthetic task and MNIST / CIFAR-10 binary subsets.

Raw readers cover the MNIST IDX format (optionally gzip-compressed) and the
CIFAR-10 binary batch format. Every malformed file raises
:class:`DataFormatError` with the byte offset of the problem.

Normalization modes:

* ``"unit"`` (default): each flattened vector is scaled so ``x.x / N0 = 1``.
* ``"global"``: one common factor for the whole slice so that the mean
  training self-Gram is 1. Relative norms survive, which is what lets the
  drift limit of ReLU networks retain norm information.
* ``"none"``: raw pixel values.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynamics import LearningProblem
from .errors import ConfigError, DataFormatError, DegenerateInputError
from .prior import DynamicsParams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
NORMALIZE_MODES = ("unit", "global", "none")


@dataclass(frozen=True)
class SyntheticSpec:
    """``P`` orthonormal training inputs with alternating +-1 labels and one test point.

    The test point overlaps training point 1 (label +1) by ``O_test`` and is
    orthogonal to the rest.
    """

    P: int = 2
    O_test: float = 0.75

    def __post_init__(self):
        if self.P < 2 or self.P % 2:
            raise ConfigError(f"P must be even and >= 2, got {self.P}")
        if not 0.0 < self.O_test < 1.0:
            raise ConfigError(f"O_test must lie in (0, 1), got {self.O_test}")

    @property
    def labels(self) -> np.ndarray:
        return np.where(np.arange(self.P) % 2 == 0, 1.0, -1.0)


@dataclass
class DatasetSlice:
    """Flattened inputs with +-1 labels, held-out test inputs, and where they came from."""

    inputs: np.ndarray
    labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n0(self) -> int:
        return self.inputs.shape[1]


def synthetic_problem(spec: SyntheticSpec, act, L: int, params: DynamicsParams) -> LearningProblem:
    """Gram-level synthetic problem: identity train Gram, test row ``(O_test, 0, ...)``."""
    test_row = np.zeros((1, spec.P))
    test_row[0, 0] = spec.O_test
    return LearningProblem(np.eye(spec.P), spec.labels, act, L, params,
                           test_gram=test_row, test_self=np.ones(1), test_targets=np.ones(1))


def synthetic_slice(spec: SyntheticSpec, n0: Optional[int] = None) -> DatasetSlice:
    """Explicit vectors realizing the synthetic Gram: ``x_mu = sqrt(N0) e_mu``."""
    n0 = spec.P + 1 if n0 is None else int(n0)
    if n0 < spec.P + 1:
        raise ConfigError(f"N0 must be at least P + 1 = {spec.P + 1}")
    scale = np.sqrt(n0)
    X = np.zeros((spec.P, n0))
    X[np.arange(spec.P), np.arange(spec.P)] = scale
    x_test = np.zeros((1, n0))
    x_test[0, 0] = spec.O_test * scale
    x_test[0, spec.P] = np.sqrt(1.0 - spec.O_test ** 2) * scale
    return DatasetSlice(X, spec.labels, x_test, np.ones(1),
                        {"source": "synthetic", "P": spec.P, "O_test": spec.O_test})


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset file: {exc.strerror}", path=path) from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError(f"corrupt gzip stream: {exc}", path=path) from None
    return raw


def _parse_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError("file too short for an IDX header", offset=len(raw), path=path)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}",
                              offset=0, path=path)
    if len(raw) < header:
        raise DataFormatError("truncated IDX header", offset=len(raw), path=path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DataFormatError(f"truncated IDX data: {header + size} bytes expected",
                              offset=len(raw), path=path)
    if len(raw) > header + size:
        raise DataFormatError("trailing bytes after IDX data", offset=header + size, path=path)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def idx_labels_path(images_path) -> Path:
    """Conventional labels file next to an images file (``images-idx3`` -> ``labels-idx1``)."""
    p = Path(images_path)
    name = p.name.replace("images-idx3", "labels-idx1").replace("images.idx3", "labels.idx1")
    if name == p.name:
        raise ConfigError(f"cannot infer the labels file for {p}; pass labels_path")
    return p.with_name(name)


def _select(labels: np.ndarray, class_a: int, class_b: int, n_train: int, n_test: int,
            path, record_bytes: int, header: int):
    """First ``n_train`` (then ``n_test``) indices of each class in file order."""
    if class_a == class_b:
        raise ConfigError("the two classes must differ")
    if n_train < 1:
        raise DegenerateInputError(f"n_per_class must be >= 1, got {n_train} (empty slice)")
    train, test = [], []
    for cls in (class_a, class_b):
        idx = np.nonzero(labels == cls)[0]
        need = n_train + n_test
        if idx.size < need:
            raise DataFormatError(f"class {cls} exhausted: {idx.size} examples, {need} requested",
                                  offset=header + record_bytes * labels.size, path=path)
        train.append(idx[:n_train])
        test.append(idx[n_train:need])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def normalize_inputs(X: np.ndarray, X_test: np.ndarray, mode="unit"):
    """Apply a normalization mode to train and test rows; zero vectors are rejected."""
    if mode is True:
        mode = "unit"
    elif mode is False or mode is None:
        mode = "none"
    if mode not in NORMALIZE_MODES:
        raise ConfigError(f"unknown normalization {mode!r}; expected one of {NORMALIZE_MODES}")
    n0 = X.shape[1]
    sq = np.sum(X * X, axis=1) / n0
    sq_test = np.sum(X_test * X_test, axis=1) / n0
    zero = np.nonzero(np.concatenate([sq, sq_test]) == 0)[0]
    if zero.size:
        raise DegenerateInputError(f"all-zero input vector at selection position {zero[0]}")
    if mode == "unit":
        return X / np.sqrt(sq)[:, None], X_test / np.sqrt(sq_test)[:, None]
    if mode == "global":
        s = np.sqrt(np.mean(sq))
        return X / s, X_test / s
    return X, X_test


def load_idx(path, class_a: int, class_b: int, n_per_class: int, normalize="unit",
             labels_path=None, n_test_per_class: int = 0) -> DatasetSlice:
    """Binary subset of an MNIST-style IDX pair.

    Selects the first ``n_per_class`` examples of each class in file order for
    training and the next ``n_test_per_class`` for testing; ``class_a`` maps to
    +1. Images are flattened to 784-vectors.
    """
    labels_path = idx_labels_path(path) if labels_path is None else Path(labels_path)
    images = _parse_idx(path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels",
                              offset=4, path=labels_path)
    tr, te = _select(labels, class_a, class_b, n_per_class, n_test_per_class, labels_path, 1, 8)
    flat = images.reshape(images.shape[0], -1).astype(float)
    X, X_test = normalize_inputs(flat[tr], flat[te], normalize)
    y = np.where(labels[tr] == class_a, 1.0, -1.0)
    y_test = np.where(labels[te] == class_a, 1.0, -1.0)
    return DatasetSlice(X, y, X_test, y_test,
                        {"source": str(path), "labels": str(labels_path), "classes": [class_a, class_b],
                         "train_indices": tr.tolist(), "test_indices": te.tolist(),
                         "normalize": str(normalize)})


def load_cifar_binary(path, class_a: int, class_b: int, n_per_class: int, normalize="unit",
                      n_test_per_class: int = 0) -> DatasetSlice:
    """Binary subset of CIFAR-10 binary batches (one file or a sequence read in order).

    Each 3073-byte record is a label byte and 3072 channel-major pixels; the
    whole record body is flattened, channels included.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    blocks = []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"length {len(raw)} is not a multiple of {CIFAR_RECORD}",
                                  offset=len(raw) - len(raw) % CIFAR_RECORD, path=p)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise DataFormatError(f"label byte {rec[bad[0], 0]} out of range 0..9",
                                  offset=int(bad[0]) * CIFAR_RECORD, path=p)
        blocks.append(rec)
    rec = np.concatenate(blocks)
    labels = rec[:, 0]
    tr, te = _select(labels, class_a, class_b, n_per_class, n_test_per_class, paths[-1],
                     CIFAR_RECORD, 0)
    pix = rec[:, 1:].astype(float)
    X, X_test = normalize_inputs(pix[tr], pix[te], normalize)
    y = np.where(labels[tr] == class_a, 1.0, -1.0)
    y_test = np.where(labels[te] == class_a, 1.0, -1.0)
    return DatasetSlice(X, y, X_test, y_test,
                        {"source": [str(p) for p in paths], "classes": [class_a, class_b],
                         "train_indices": tr.tolist(), "test_indices": te.tolist(),
                         "normalize": str(normalize)})


def build_problem(data: DatasetSlice, act, L: int, params: DynamicsParams) -> LearningProblem:
    """Gram matrices ``x.x'/N0`` of a slice packed into a :class:`LearningProblem`."""
    n0 = data.n0
    G = data.inputs @ data.inputs.T / n0
    G = 0.5 * (G + G.T)
    test_gram = data.test_inputs @ data.inputs.T / n0
    test_self = np.sum(data.test_inputs ** 2, axis=1) / n0
    test_targets = data.test_labels if data.test_labels.size else None
    return LearningProblem(G, data.labels, act, L, params, test_gram=test_gram,
                           test_self=test_self, test_targets=test_targets)


_MNIST_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
_CIFAR_NAMES = ("data_batch_1.bin", "cifar-10-batches-bin/data_batch_1.bin")


def default_data_file(dataset: str, data_dir=None) -> Path:
    """Locate a dataset file under ``data_dir`` (default ``$NDK_DATA_DIR``)."""
    data_dir = data_dir or os.environ.get("NDK_DATA_DIR")
    if not data_dir:
        raise ConfigError(f"no data file given for {dataset} and NDK_DATA_DIR is not set")
    names = {"mnist": _MNIST_NAMES, "cifar": _CIFAR_NAMES}.get(dataset)
    if names is None:
        raise ConfigError(f"dataset {dataset!r} has no data files")
    for name in names:
        for suffix in ("", ".gz"):
            p = Path(data_dir) / (name + suffix)
            if p.exists():
                return p
    raise ConfigError(f"no {dataset} file found in {data_dir} (looked for {', '.join(names)})")


def load_dataset(dataset: str, classes: Sequence[int], n_per_class: int, path=None,
                 normalize="unit", n_test_per_class: int = 0) -> DatasetSlice:
    """Dispatch to the MNIST or CIFAR reader, resolving the default file location."""
    path = default_data_file(dataset) if path is None else Path(path)
    a, b = classes
    if dataset == "mnist":
        return load_idx(path, a, b, n_per_class, normalize, n_test_per_class=n_test_per_class)
    if dataset == "cifar":
        return load_cifar_binary(path, a, b, n_per_class, normalize, n_test_per_class)
    raise ConfigError(f"unknown dataset {dataset!r}")
