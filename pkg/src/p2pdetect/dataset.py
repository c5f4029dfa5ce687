"""Labeled flow datasets: scaling, information-gain ranking, splits and file formats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flow_meter.features import FEATURE_NAMES, IDENTIFIER_FEATURES

CLASS_NAMES = ("nonmalicious", "malicious")
CLASS_COLUMN = "class"
ARFF_RELATION = "p2pflows"

NORM_LOW = 0.05
NORM_HIGH = 0.95
NORM_SPAN = NORM_HIGH - NORM_LOW  # 0.9


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(self.feature_names)
        X = np.asarray(self.X, dtype=float).reshape(-1, len(names))
        if len(set(names)) != len(names):
            raise DatasetError("duplicate feature names")
        y = self.y
        if y is not None:
            y = np.asarray(y, dtype=np.int64).reshape(-1)
            if len(y) != len(X):
                raise DatasetError(f"{len(y)} labels for {len(X)} rows")
            if len(y) and not np.isin(y, (0, 1)).all():
                raise DatasetError("labels must be 0 (nonmalicious) or 1 (malicious)")
            y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.X)

    @property
    def labeled(self) -> bool:
        return self.y is not None

    @classmethod
    def from_vectors(cls, vectors, names: Sequence[str] = FEATURE_NAMES) -> "Dataset":
        rows = [fv.numeric_row() for fv in vectors]
        labels = [fv.label for fv in vectors]
        full = np.array(rows, dtype=float).reshape(-1, len(FEATURE_NAMES))
        idx = [FEATURE_NAMES.index(n) for n in names]
        if any(lab is None for lab in labels):
            y = None
        else:
            y = np.array(labels, dtype=np.int64)
        return cls(tuple(names), full[:, idx], y)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def select(self, names: Sequence[str]) -> "Dataset":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise DatasetError(f"features not in dataset: {', '.join(missing)}")
        idx = [self.feature_names.index(n) for n in names]
        return Dataset(tuple(names), self.X[:, idx], self.y)

    def drop(self, names: Sequence[str]) -> "Dataset":
        return self.select([n for n in self.feature_names if n not in set(names)])

    def without_identifiers(self) -> "Dataset":
        return self.drop(IDENTIFIER_FEATURES)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.feature_names, self.X[index], None if self.y is None else self.y[index])

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.feature_names, self.X, y)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.feature_names != self.feature_names:
            raise DatasetError("feature names differ")
        if (self.y is None) != (other.y is None):
            raise DatasetError("cannot mix labeled and unlabeled datasets")
        y = None if self.y is None else np.concatenate([self.y, other.y])
        return Dataset(self.feature_names, np.vstack([self.X, other.X]), y)


# --- scaling -----------------------------------------------------------------


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise DatasetError("non-finite value")


def normalize(x, x_min, x_max, clamp: bool = False):
    """Map ``[x_min, x_max]`` linearly onto ``[0.05, 0.95]``.

    Constant features (``x_max == x_min``) map to 0.5. Written as a convex
    combination of the endpoints so that both land exactly.
    """
    x = np.asarray(x, dtype=float)
    x_min = np.asarray(x_min, dtype=float)
    x_max = np.asarray(x_max, dtype=float)
    _check_finite(x)
    span = x_max - x_min
    flat = span == 0
    t = (x - x_min) / np.where(flat, 1.0, span)
    out = np.where(flat, 0.5, NORM_LOW * (1.0 - t) + NORM_HIGH * t)
    if clamp:
        out = np.clip(out, NORM_LOW, NORM_HIGH)
    return out[()] if out.ndim == 0 else out


def denormalize(x_n, x_min, x_max):
    """Inverse of :func:`normalize`: ``x_min + (x_n - 0.05) * (x_max - x_min) / 0.9``."""
    x_n = np.asarray(x_n, dtype=float)
    _check_finite(x_n)
    x_min = np.asarray(x_min, dtype=float)
    x_max = np.asarray(x_max, dtype=float)
    out = x_min + (x_n - NORM_LOW) * (x_max - x_min) / NORM_SPAN
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class NormalizationParams:
    x_min: tuple[float, ...]
    x_max: tuple[float, ...]

    def __post_init__(self):
        if len(self.x_min) != len(self.x_max):
            raise DatasetError("x_min and x_max lengths differ")
        if any(hi < lo for lo, hi in zip(self.x_min, self.x_max)):
            raise DatasetError("x_max < x_min")

    @classmethod
    def fit(cls, X) -> "NormalizationParams":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if len(X) == 0:
            raise DatasetError("cannot fit normalization on zero rows")
        _check_finite(X)
        return cls(tuple(float(v) for v in X.min(axis=0)), tuple(float(v) for v in X.max(axis=0)))

    def transform(self, X, clamp: bool = True) -> np.ndarray:
        return normalize(X, np.array(self.x_min), np.array(self.x_max), clamp=clamp)

    def inverse(self, X_n) -> np.ndarray:
        return denormalize(X_n, np.array(self.x_min), np.array(self.x_max))


TARGET_NORM = NormalizationParams((0.0,), (1.0,))


# --- information gain ---------------------------------------------------------


def entropy(labels) -> float:
    """Shannon entropy in bits."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DatasetError("entropy of an empty label list")
    _, counts = np.unique(labels, return_counts=True)
    return _entropy_counts(counts)


def _entropy_counts(counts) -> float:
    n = float(np.sum(counts))
    h = 0.0
    for c in counts:
        if c:
            p = c / n
            h -= p * math.log2(p)
    return max(h, 0.0)


class EqualFrequencyDiscretizer:
    """Rank-based equal-frequency binning.

    Each value is placed by its mid-rank position ``u in (0, 1)``; bin is
    ``floor(bins * u)``. Tied values always share a bin, so duplicate bin
    boundaries merge on their own, and the partition depends only on the
    ordering of the column.

    A tie group sitting exactly on a boundary joins the bin nearer the
    median (one exactly at the median gets a bin of its own), which makes
    the partition identical under order reversal as well.
    """

    def __init__(self, bins: int = 10):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        self.bins = bins

    def __call__(self, column, labels=None) -> np.ndarray:
        col = np.asarray(column, dtype=float)
        n = len(col)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        order = np.sort(col)
        less = np.searchsorted(order, col, side="left")
        less_eq = np.searchsorted(order, col, side="right")
        # u = (less + equal/2) / n, kept in integers: 2*less + equal over 2n
        num = (less + less_eq) * self.bins
        k, rem = np.divmod(num, 2 * n)
        on_edge = rem == 0
        out = np.minimum(k, self.bins - 1)
        out = np.where(on_edge & (2 * k > self.bins), k - 1, out)
        out = np.where(on_edge & (2 * k == self.bins), self.bins, out)
        return out.astype(np.int64)

    def __repr__(self):
        return f"EqualFrequencyDiscretizer(bins={self.bins})"


class MDLDiscretizer:
    """Recursive entropy-minimizing cuts with the Fayyad-Irani MDL stopping rule."""

    def __init__(self, max_depth: int = 32):
        self.max_depth = max_depth

    def cut_points(self, column, labels) -> list[float]:
        col = np.asarray(column, dtype=float)
        y = np.asarray(labels)
        order = np.argsort(col, kind="stable")
        col, y = col[order], y[order]
        classes = np.unique(y)
        onehot = (y[:, None] == classes[None, :]).astype(np.int64)
        cuts: list[float] = []
        self._split(col, onehot, 0, len(col), cuts, 0)
        return sorted(cuts)

    def _split(self, col, onehot, lo, hi, cuts, depth):
        n = hi - lo
        if n < 2 or depth >= self.max_depth:
            return
        seg = onehot[lo:hi]
        total = seg.sum(axis=0)
        h_all = _entropy_counts(total)
        if h_all == 0.0:
            return
        left_counts = np.cumsum(seg, axis=0)
        best = None
        for i in range(1, n):
            if col[lo + i] == col[lo + i - 1]:
                continue
            left = left_counts[i - 1]
            right = total - left
            e = (i * _entropy_counts(left) + (n - i) * _entropy_counts(right)) / n
            if best is None or e < best[0]:
                best = (e, i, left, right)
        if best is None:
            return
        e, i, left, right = best
        gain = h_all - e
        k = np.count_nonzero(total)
        k1 = np.count_nonzero(left)
        k2 = np.count_nonzero(right)
        delta = math.log2(3**k - 2) - (k * h_all - k1 * _entropy_counts(left) - k2 * _entropy_counts(right))
        if gain <= (math.log2(n - 1) + delta) / n:
            return
        cuts.append((col[lo + i - 1] + col[lo + i]) / 2.0)
        self._split(col, onehot, lo, lo + i, cuts, depth + 1)
        self._split(col, onehot, lo + i, hi, cuts, depth + 1)

    def __call__(self, column, labels) -> np.ndarray:
        cuts = self.cut_points(column, labels)
        return np.searchsorted(np.asarray(cuts), np.asarray(column, dtype=float), side="right")

    def __repr__(self):
        return "MDLDiscretizer()"


def info_gain(column, labels, discretizer=None) -> float:
    """H(labels) - H(labels | binned column), in bits."""
    column = np.asarray(column, dtype=float)
    labels = np.asarray(labels)
    if column.size == 0 or labels.size == 0:
        raise DatasetError("info_gain of an empty column")
    if column.shape != labels.shape:
        raise DatasetError("column and labels differ in length")
    discretizer = discretizer or EqualFrequencyDiscretizer()
    bins = discretizer(column, labels)
    h = entropy(labels)
    n = len(labels)
    cond = 0.0
    for b in np.unique(bins):
        sel = labels[bins == b]
        cond += len(sel) / n * entropy(sel)
    return float(min(max(h - cond, 0.0), h))


@dataclass(frozen=True)
class RankedFeatures:
    entries: tuple[tuple[str, float], ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def format_table(self) -> str:
        lines = ["gain\tfeature"]
        lines += [f"{g:.4f}\t{n}" for n, g in self.entries]
        return "\n".join(lines) + "\n"


def rank_features(ds: Dataset, k: int = 15, discretizer=None) -> RankedFeatures:
    """Top-``k`` features by information gain (gain desc, then name asc)."""
    if not ds.labeled:
        raise DatasetError("ranking needs a labeled dataset")
    if k < 1 or k > len(ds.feature_names):
        raise DatasetError(f"k={k} outside 1..{len(ds.feature_names)} features")
    if len(ds) == 0:
        raise DatasetError("ranking needs at least one row")
    gains = [(name, info_gain(ds.X[:, j], ds.y, discretizer)) for j, name in enumerate(ds.feature_names)]
    gains.sort(key=lambda t: (-t[1], t[0]))
    return RankedFeatures(tuple(gains[:k]))


# --- splitting ------------------------------------------------------------------


def split(ds: Dataset, train_fraction: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test split."""
    if not 0 < train_fraction < 1:
        raise DatasetError("train_fraction must lie in (0, 1)")
    if not ds.labeled:
        raise DatasetError("stratified split needs labels")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(ds.y == cls)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DatasetError(f"class {CLASS_NAMES[cls]} has {len(idx)} row; cannot stratify")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


# --- files ------------------------------------------------------------------------


def format_number(v: float) -> str:
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def _check_names(names):
    for n in names:
        if not n or "," in n or n != n.strip():
            raise DatasetError(f"invalid feature name {n!r}")


def write_csv(ds: Dataset, path) -> None:
    _check_names(ds.feature_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(ds.feature_names) + ([CLASS_COLUMN] if ds.labeled else [])
        w.writerow(header)
        for i, row in enumerate(ds.X):
            out = [format_number(float(v)) for v in row]
            if ds.labeled:
                out.append(CLASS_NAMES[int(ds.y[i])])
            w.writerow(out)


def parse_label(text: str) -> int:
    t = text.strip().lower()
    if t in ("nonmalicious", "0", "benign"):
        return 0
    if t in ("malicious", "1"):
        return 1
    raise DatasetError(f"unknown class label {text!r}")


def read_csv(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: missing header") from None
        header = [h.strip() for h in header]
        if not header or not all(header):
            raise DatasetError(f"{path}: missing header")
        labeled = header[-1] == CLASS_COLUMN
        names = header[:-1] if labeled else header
        try:
            [float(h) for h in names]
        except ValueError:
            pass
        else:
            raise DatasetError(f"{path}: missing header")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            values = row[:-1] if labeled else row
            try:
                rows.append([float(v) for v in values])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: unparsable number") from None
            if labeled:
                labels.append(parse_label(row[-1]))
    X = np.array(rows, dtype=float).reshape(-1, len(names))
    return Dataset(tuple(names), X, np.array(labels, dtype=np.int64) if labeled else None)


def write_arff(ds: Dataset, path, relation: str = ARFF_RELATION) -> None:
    _check_names(ds.feature_names)
    lines = [f"@relation {relation}", ""]
    lines += [f"@attribute {name} numeric" for name in ds.feature_names]
    lines.append(f"@attribute {CLASS_COLUMN} {{{','.join(CLASS_NAMES)}}}")
    lines += ["", "@data"]
    for i, row in enumerate(ds.X):
        label = CLASS_NAMES[int(ds.y[i])] if ds.labeled else "?"
        lines.append(",".join([format_number(float(v)) for v in row] + [label]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
