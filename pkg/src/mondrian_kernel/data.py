"""CSV ingestion and train/validation splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    source: Optional[str] = None
    target_name: str = "y"
    ranges: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be N x D and y of length N")
        if self.X.shape[0] < 2:
            raise DataError("need at least two rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("data contains NaN or infinite values")
        self.ranges = np.column_stack([self.X.min(axis=0), self.X.max(axis=0)])

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.feature_names + [self.target_name])
            for row, target in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def _parse(cell: str, line: int, column: str) -> float:
    text = cell.strip()
    if text == "":
        raise DataError(f"line {line}, column {column!r}: missing value")
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def ingest_csv(path, target: Union[str, int] = -1, has_header: bool = True) -> Dataset:
    """Read a numeric CSV; ``target`` is a column name or (possibly negative) index."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    if has_header:
        _, header = rows[0]
        header = [h.strip() for h in header]
        rows = rows[1:]
    else:
        header = [f"x{i}" for i in range(len(rows[0][1]))]
    width = len(header)
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if target not in header:
            raise DataError(f"target column {target!r} not found in header {header}")
        t = header.index(target)
    else:
        t = int(target)
        if not -width <= t < width:
            raise DataError(f"target index {t} out of range for {width} columns")
        t %= width
    values = []
    for line, r in rows:
        if len(r) != width:
            raise DataError(f"line {line}: expected {width} fields, found {len(r)}")
        values.append([_parse(c, line, header[k]) for k, c in enumerate(r)])
    arr = np.array(values, dtype=float).reshape(len(values), width)
    feats = [k for k in range(width) if k != t]
    return Dataset(
        arr[:, feats], arr[:, t], [header[k] for k in feats], str(path), target_name=header[t]
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train fraction must lie in (0, 1)")

    def indices(self, N: int) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint, covering, non-empty (train, validation) index arrays."""
        if N < 2:
            raise DataError("need at least two rows to split")
        perm = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(7,))).permutation(N)
        n_train = min(max(int(round(self.train_fraction * N)), 1), N - 1)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
