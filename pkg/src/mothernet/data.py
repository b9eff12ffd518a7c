"""Tabular dataset container, CSV ingestion and per-dataset encodings.

Every transform here is a pure function: datasets are frozen and the
encoders return new arrays.  Encoders that need statistics (quantiles,
one-hot categories, standardization) are fitted on the training portion
only and then applied to any other rows.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    FormatError,
    NumericInputError,
    ParseError,
    TooManyFeaturesError,
    UnsupportedClassCountError,
)

MAX_FEATURES = 100
MAX_CLASSES = 10


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Feature matrix plus integer labels and masks.

    ``X`` has missing cells already replaced by 0.0; ``missing_mask`` keeps
    track of where they were.  ``y`` may be ``None`` for an unlabeled
    prediction set.
    """

    X: np.ndarray
    y: np.ndarray | None
    n_classes: int
    categorical_mask: np.ndarray = None
    missing_mask: np.ndarray = None
    feature_names: tuple = None
    class_names: tuple = None
    vocab: dict = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {X.shape}")
        if X.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        n, d = X.shape
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.int64)
            if y.shape != (n,):
                raise ValueError("y must have one label per row")
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError("labels must lie in [0, n_classes)")
            object.__setattr__(self, "y", y)
        if self.n_classes > MAX_CLASSES:
            raise UnsupportedClassCountError(f"{self.n_classes} classes; at most {MAX_CLASSES} supported")
        cat = np.zeros(d, dtype=bool) if self.categorical_mask is None else np.asarray(self.categorical_mask, dtype=bool)
        miss = np.zeros((n, d), dtype=bool) if self.missing_mask is None else np.asarray(self.missing_mask, dtype=bool)
        if cat.shape != (d,) or miss.shape != (n, d):
            raise ValueError("mask shapes do not match X")
        object.__setattr__(self, "categorical_mask", cat)
        object.__setattr__(self, "missing_mask", miss)
        if self.feature_names is None:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(d)))

    @property
    def n_rows(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            X=self.X[rows],
            y=None if self.y is None else self.y[rows],
            missing_mask=self.missing_mask[rows],
        )

    def with_features(self, X, categorical_mask=None, feature_names=None):
        """Copy with a new feature matrix (missing mask reset unless shapes match)."""
        X = np.asarray(X, dtype=np.float64)
        same = X.shape == self.X.shape
        return replace(
            self,
            X=X,
            categorical_mask=self.categorical_mask if categorical_mask is None and same else categorical_mask,
            missing_mask=self.missing_mask if same else None,
            feature_names=self.feature_names if feature_names is None and same else feature_names,
        )


@dataclass(frozen=True)
class EnsembleMemberConfig:
    feature_rotation: int = 0
    class_rotation: int = 0
    use_one_hot: bool = False
    use_quantile: bool = False
    seed: int = 0

    @property
    def is_identity(self):
        return not (self.feature_rotation or self.class_rotation or self.use_one_hot or self.use_quantile)


# --------------------------------------------------------------------------
# CSV ingestion


def _parse_float(text, row, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", row=row) from None


def load_csv(path, target_column=None, categorical_columns=(), classes=None, vocab=None):
    """Read a comma-separated file with a header row.

    Labels map to ``0..c-1`` by first appearance unless ``classes`` (a
    sequence of label strings, e.g. from a training file) is given.
    Categorical columns are coded by first appearance as well; pass the
    training set's ``vocab`` to code a test file consistently (values unseen
    in ``vocab`` get fresh codes).  Empty cells are missing and become 0.0.
    ``target_column=None`` reads an unlabeled file.  Row numbers in errors
    count the header as row 0.
    """
    categorical_columns = list(categorical_columns or ())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=0) from None
        header = [h.strip() for h in header]
        if target_column is not None and target_column not in header:
            raise ParseError(f"target column {target_column!r} not in header", row=0)
        for name in categorical_columns:
            if name not in header:
                raise ParseError(f"categorical column {name!r} not in header", row=0)
        target_idx = header.index(target_column) if target_column is not None else None
        feat_idx = [j for j, h in enumerate(header) if j != target_idx]
        feat_names = tuple(header[j] for j in feat_idx)
        cat_mask = np.array([header[j] in categorical_columns for j in feat_idx], dtype=bool)

        vocab = {name: dict(v) for name, v in (vocab or {}).items()}
        for name in categorical_columns:
            vocab.setdefault(name, {})
        label_map = {} if classes is None else {c: i for i, c in enumerate(classes)}
        fixed_labels = classes is not None

        rows, miss_rows, labels = [], [], []
        for lineno, record in enumerate(reader, start=1):
            if not record or (len(record) == 1 and record[0].strip() == ""):
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(record)}", row=lineno)
            if target_idx is not None:
                label = record[target_idx].strip()
                if label == "":
                    raise ParseError("missing target value", row=lineno)
                if label not in label_map:
                    if fixed_labels:
                        raise ParseError(f"label {label!r} not among training classes", row=lineno)
                    label_map[label] = len(label_map)
                labels.append(label_map[label])
            values, missing = [], []
            for j, is_cat in zip(feat_idx, cat_mask):
                text = record[j].strip()
                if text == "":
                    values.append(0.0)
                    missing.append(True)
                    continue
                missing.append(False)
                if is_cat:
                    codes = vocab[header[j]]
                    if text not in codes:
                        codes[text] = float(len(codes))
                    values.append(codes[text])
                else:
                    values.append(_parse_float(text, lineno, header[j]))
            rows.append(values)
            miss_rows.append(missing)

    if not rows:
        raise ParseError("no data rows", row=1)
    if len(label_map) > MAX_CLASSES:
        raise UnsupportedClassCountError(f"{len(label_map)} distinct labels; at most {MAX_CLASSES} supported")
    class_names = tuple(sorted(label_map, key=label_map.get)) if label_map else None
    return TabularDataset(
        X=np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_idx)),
        y=np.array(labels, dtype=np.int64) if target_idx is not None else None,
        n_classes=max(len(label_map), 1) if target_idx is not None else (len(classes) if classes else 0),
        categorical_mask=cat_mask,
        missing_mask=np.array(miss_rows, dtype=bool).reshape(len(rows), len(feat_idx)),
        feature_names=feat_names,
        class_names=class_names,
        vocab=vocab,
    )


# --------------------------------------------------------------------------
# Encodings


def pad_and_scale(X):
    """Zero-pad to 100 columns and scale the real columns by ``100 / d``."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d > MAX_FEATURES:
        raise TooManyFeaturesError(f"{d} features; at most {MAX_FEATURES} supported")
    if d < 1:
        raise ValueError("need at least one feature")
    out = np.zeros((n, MAX_FEATURES), dtype=np.float64)
    out[:, :d] = X * (MAX_FEATURES / d)
    return out


def _ecdf_knots(column):
    """Unique training values and their interpolated CDF levels in [0, 1]."""
    v = np.sort(column)
    n = len(v)
    uniq, first, counts = np.unique(v, return_index=True, return_counts=True)
    # tied order statistics share the mean of their positions
    levels = (first + (counts - 1) / 2.0) / (n - 1)
    return uniq, levels


def quantile_encode(X_train, X_apply, categorical_mask=None):
    """Map continuous columns through the training empirical CDF.

    Order statistics of the training column sit at levels ``i / (n - 1)``;
    values in between are linearly interpolated, values outside the training
    range clamp to 0 or 1.  A constant training column maps everything to 0.5.
    Categorical columns pass through unchanged.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_apply = np.asarray(X_apply, dtype=np.float64)
    d = X_train.shape[1]
    if X_apply.shape[1] != d:
        raise ValueError("train and apply matrices have different widths")
    cat = np.zeros(d, dtype=bool) if categorical_mask is None else np.asarray(categorical_mask, dtype=bool)
    out = X_apply.copy()
    for j in range(d):
        if cat[j]:
            continue
        uniq, levels = _ecdf_knots(X_train[:, j])
        if len(uniq) == 1:
            out[:, j] = 0.5
        else:
            out[:, j] = np.interp(X_apply[:, j], uniq, levels)
    return out


class OneHotEncoder:
    """Expand categorical columns into indicator blocks, in place of the column.

    Categories are the sorted distinct training values; values unseen during
    fitting encode as an all-zero block.
    """

    def __init__(self, categorical_mask):
        self.categorical_mask = np.asarray(categorical_mask, dtype=bool)
        self.categories_ = None

    def fit(self, X):
        self.categories_ = [np.unique(X[:, j]) if is_cat else None for j, is_cat in enumerate(self.categorical_mask)]
        return self

    @property
    def n_output_features(self):
        return sum(1 if cats is None else len(cats) for cats in self.categories_)

    def output_categorical_mask(self):
        return np.concatenate(
            [[False] if cats is None else np.ones(len(cats), dtype=bool) for cats in self.categories_]
        ).astype(bool)

    def transform(self, X):
        blocks = []
        for j, cats in enumerate(self.categories_):
            col = X[:, j]
            if cats is None:
                blocks.append(col[:, None])
            else:
                blocks.append((col[:, None] == cats[None, :]).astype(np.float64))
        return np.hstack(blocks)


def one_hot_encode(ds, fit_on=None):
    """One-hot encode the categorical columns of ``ds``.

    Categories come from ``fit_on`` (default: ``ds`` itself).  If the
    expansion would exceed 100 features the dataset is returned unchanged.
    """
    fit_on = ds if fit_on is None else fit_on
    if not ds.categorical_mask.any():
        return ds
    enc = OneHotEncoder(fit_on.categorical_mask).fit(fit_on.X)
    if enc.n_output_features > MAX_FEATURES:
        return ds
    names = []
    for name, cats in zip(ds.feature_names, enc.categories_):
        names.extend([name] if cats is None else [f"{name}={c:g}" for c in cats])
    return replace(
        ds,
        X=enc.transform(ds.X),
        categorical_mask=enc.output_categorical_mask(),
        missing_mask=None,
        feature_names=tuple(names),
    )


def rotate(ds, cfg):
    """Circularly shift feature columns and relabel classes ``(y + k) mod c``."""
    d, c = ds.n_features, ds.n_classes
    fr = cfg.feature_rotation % d
    cr = cfg.class_rotation % c if c else 0
    X = np.roll(ds.X, fr, axis=1)
    y = None if ds.y is None else (ds.y + cr) % c
    names = ds.feature_names[-fr:] + ds.feature_names[:-fr] if fr else ds.feature_names
    return replace(
        ds,
        X=X,
        y=y,
        categorical_mask=np.roll(ds.categorical_mask, fr),
        missing_mask=np.roll(ds.missing_mask, fr, axis=1),
        feature_names=names,
    )


def inverse_rotation(cfg, d, c):
    """Member config whose :func:`rotate` undoes ``cfg`` on a (d, c) dataset."""
    return replace(cfg, feature_rotation=(-cfg.feature_rotation) % d, class_rotation=(-cfg.class_rotation) % c)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        return cls(mean=mean, scale=np.where(std > 0, 1.0 / np.where(std > 0, std, 1.0), 1.0))

    def transform(self, X):
        return (X - self.mean) * self.scale


def check_finite(X):
    if not np.all(np.isfinite(X)):
        raise NumericInputError("input contains NaN or infinite values")


# --------------------------------------------------------------------------
# MNDS1 binary dataset format

_MNDS_MAGIC = b"MNDS1"
_MNDS_HEAD = struct.Struct("<III")


def dataset_to_bytes(ds):
    """Columnar binary: magic, u32 n/d/c, f32 X column-major, u8 y, mask bitmaps."""
    n, d = ds.X.shape
    y = np.zeros(n, dtype=np.uint8) if ds.y is None else ds.y.astype(np.uint8)
    return b"".join(
        [
            _MNDS_MAGIC,
            _MNDS_HEAD.pack(n, d, ds.n_classes),
            np.asarray(ds.X, dtype="<f4").tobytes(order="F"),
            y.tobytes(),
            np.packbits(ds.categorical_mask, bitorder="little").tobytes(),
            np.packbits(ds.missing_mask.ravel(order="F"), bitorder="little").tobytes(),
        ]
    )


def dataset_from_bytes(data):
    data = bytes(data)
    if data[:5] != _MNDS_MAGIC:
        raise FormatError(f"bad magic {data[:5]!r}", offset=0)
    if len(data) < 5 + _MNDS_HEAD.size:
        raise FormatError("truncated header", offset=len(data))
    n, d, c = _MNDS_HEAD.unpack_from(data, 5)
    pos = 5 + _MNDS_HEAD.size
    sizes = [4 * n * d, n, (d + 7) // 8, (n * d + 7) // 8]
    if len(data) != pos + sum(sizes):
        raise FormatError(f"expected {pos + sum(sizes)} bytes, got {len(data)}", offset=min(len(data), pos + sum(sizes)))
    X = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape((n, d), order="F")
    pos += sizes[0]
    y = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).astype(np.int64)
    pos += sizes[1]
    cat = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=sizes[2], offset=pos), bitorder="little")[:d]
    pos += sizes[2]
    miss = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=sizes[3], offset=pos), bitorder="little")[: n * d]
    return TabularDataset(
        X=X.astype(np.float64),
        y=y,
        n_classes=c,
        categorical_mask=cat.astype(bool),
        missing_mask=miss.reshape((n, d), order="F").astype(bool),
    )


def save_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
