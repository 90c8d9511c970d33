"""Datasets: CSV ingestion, the bundled breast-cancer set, synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

MISSING = frozenset({"", "?", "na", "n/a", "nan", "null", "none"})
SYNTHETIC_KINDS = ("separable", "xor-like", "gaussian-blobs")
MORTALITY_ROWS = 46582
MORTALITY_FEATURES = 10


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str]
    provenance: str
    rejected: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.X.ndim != 2:
            raise DatasetError("feature matrix must be 2-D")
        if len(self.X) != len(self.y):
            raise DatasetError(f"{len(self.X)} rows but {len(self.y)} labels")
        if len(self.feature_names) != self.X.shape[1]:
            raise DatasetError("one feature name per column required")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("non-finite feature values")
        if not np.isin(self.y, (0, 1)).all():
            raise DatasetError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update("\x1f".join(self.feature_names).encode())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and self.feature_names == other.feature_names
        )

    def subset(self, idx, provenance: Optional[str] = None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], list(self.feature_names), provenance or self.provenance)

    def stratified_subsample(self, n: int, seed: int = 0) -> "Dataset":
        if n >= self.n:
            return self
        from sklearn.model_selection import train_test_split

        idx, _ = train_test_split(np.arange(self.n), train_size=n, stratify=self.y, random_state=seed)
        return self.subset(np.sort(idx), f"{self.provenance} (stratified subsample n={n}, seed={seed})")


def _label_map(values: Sequence[str], positive: Optional[str]) -> Dict[str, int]:
    distinct = sorted(set(values))
    if len(distinct) > 2:
        raise DatasetError(f"label column has {len(distinct)} classes, expected 2")
    if positive is not None:
        if positive not in distinct:
            raise DatasetError(f"positive label {positive!r} not present")
        return {v: int(v == positive) for v in distinct}
    try:
        nums = {v: float(v) for v in distinct}
    except ValueError:
        return {v: i for i, v in enumerate(distinct)}
    if set(nums.values()) <= {0.0, 1.0}:
        return {v: int(x) for v, x in nums.items()}
    ordered = sorted(distinct, key=nums.get)
    return {v: i for i, v in enumerate(ordered)}


def load_csv(
    path,
    label_column: str,
    positive: Optional[str] = None,
    strict: bool = True,
    delimiter: str = ",",
    drop_columns: Sequence[str] = (),
) -> Dataset:
    """Read a headed CSV of numeric features plus one binary label column.

    Rows with missing cells are dropped and counted. An unparseable cell is an
    error in strict mode, otherwise its row is dropped and counted.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: no column {label_column!r}")
        for col in drop_columns:
            if col not in header:
                raise DatasetError(f"{path}: no column {col!r}")
        li = header.index(label_column)
        keep = [i for i, h in enumerate(header) if i != li and h not in drop_columns]
        rows, labels = [], []
        rejected = {"missing": 0, "malformed": 0}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                if strict:
                    raise DatasetError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
                rejected["malformed"] += 1
                continue
            cells = [row[i].strip() for i in keep]
            label = row[li].strip()
            if label.lower() in MISSING or any(c.lower() in MISSING for c in cells):
                rejected["missing"] += 1
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                if strict:
                    bad = next(c for c in cells if not _is_float(c))
                    raise DatasetError(f"{path}: row {lineno}: cannot parse {bad!r}") from None
                rejected["malformed"] += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                rejected["malformed"] += 1
                continue
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: zero usable rows")
    mapping = _label_map(labels, positive)
    names = [header[i] for i in keep]
    return Dataset(np.array(rows), np.array([mapping[v] for v in labels]), names, f"csv:{path.name}", rejected)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_csv(ds: Dataset, path, label_column: str = "label") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + [label_column])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_breast_cancer() -> Dataset:
    """Wisconsin diagnostic breast-cancer data (569 x 30) bundled with scikit-learn; malignant = 1."""
    from sklearn.datasets import load_breast_cancer as _load

    b = _load()
    # scikit-learn codes benign as 1; flip so the positive class is the malignant one
    return Dataset(b.data, 1 - b.target, [str(f) for f in b.feature_names], "sklearn:breast_cancer (WDBC)")


def _balanced_counts(n: int) -> Tuple[int, int]:
    return n - n // 2, n // 2


def make_synthetic(kind: str, n: int, d: int, seed: int = 0, **opts) -> Dataset:
    """Deterministic balanced binary dataset in ``[-1, 1]^d``.

    ``separable`` has a linear separator with margin; ``xor-like`` labels by the
    sign of ``x0 * x1``; ``gaussian-blobs`` draws two overlapping clusters whose
    Bayes accuracy is ``opts.get("bayes_accuracy", 0.9)`` before clipping.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTHETIC_KINDS)}")
    if n < 2 or d < 1:
        raise DatasetError("need n >= 2 and d >= 1")
    if kind == "xor-like" and d < 2:
        raise DatasetError("xor-like data needs d >= 2")
    rng = np.random.default_rng(seed)
    n0, n1 = _balanced_counts(n)
    if kind == "gaussian-blobs":
        sigma = float(opts.get("sigma", 0.35))
        sep = NormalDist().inv_cdf(float(opts.get("bayes_accuracy", 0.9))) * sigma
        u = rng.normal(size=d)
        mu = sep * u / np.linalg.norm(u)
        X = np.concatenate([rng.normal(-mu, sigma, (n0, d)), rng.normal(mu, sigma, (n1, d))])
        y = np.r_[np.zeros(n0), np.ones(n1)]
        X = np.clip(X, -1.0, 1.0)
    else:
        margin = float(opts.get("margin", 0.05))
        if kind == "separable":
            w = rng.normal(size=d)
            w /= np.linalg.norm(w)
            score = lambda Z: Z @ w
        else:
            score = lambda Z: Z[:, 0] * Z[:, 1]
        neg, pos = [], []
        while len(neg) < n0 or len(pos) < n1:
            Z = rng.uniform(-1.0, 1.0, size=(max(64, 2 * n), d))
            s = score(Z)
            neg.extend(Z[s < -margin][: n0 - len(neg)])
            pos.extend(Z[s > margin][: n1 - len(pos)])
        X = np.concatenate([np.array(neg).reshape(-1, d), np.array(pos).reshape(-1, d)])
        y = np.r_[np.zeros(n0), np.ones(n1)]
    order = rng.permutation(n)
    names = [f"x{i}" for i in range(d)]
    return Dataset(X[order], y[order], names, f"synthetic:{kind}(n={n}, d={d}, seed={seed})")


def mortality_substitute(n: int = 2000, seed: int = 0) -> Dataset:
    """Stand-in for the 46,582 x 10 infant-mortality table: 10-feature overlapping blobs (~90% separable)."""
    ds = make_synthetic("gaussian-blobs", n, MORTALITY_FEATURES, seed)
    ds.provenance = f"synthetic mortality substitute (gaussian-blobs, n={n}, d=10, seed={seed})"
    return ds


BUILTIN = {
    "breast-cancer": load_breast_cancer,
    "mortality-synthetic": mortality_substitute,
}


def load_dataset(name: str, label_column: Optional[str] = None, positive: Optional[str] = None, seed: int = 0) -> Dataset:
    """Resolve a builtin name, ``synthetic:<kind>:<n>:<d>`` or a CSV path."""
    if name in BUILTIN:
        return BUILTIN[name]() if name == "breast-cancer" else BUILTIN[name](seed=seed)
    if name.startswith("synthetic:"):
        parts = name.split(":")
        if len(parts) != 4:
            raise DatasetError("synthetic datasets are named synthetic:<kind>:<n>:<d>")
        return make_synthetic(parts[1], int(parts[2]), int(parts[3]), seed)
    path = Path(name)
    if not path.exists():
        raise DatasetError(f"unknown dataset {name!r} (not a builtin and no such file)")
    if label_column is None:
        raise DatasetError("CSV datasets need a label column")
    return load_csv(path, label_column, positive)
