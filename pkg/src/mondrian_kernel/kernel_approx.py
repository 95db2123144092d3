"""Mondrian random features for the Laplace kernel and the backward lifetime path."""
from __future__ import annotations

import math
from typing import Hashable, Optional, Sequence

import numpy as np

from .core import MondrianTree, assign_leaves, cut_schedule
from .forest import PathPoint
from .linalg import RegularizedInverse, invert_spd, solve_ridge


class FeatureState:
    """Feature matrix ``Z`` plus the maintained inverse of ``Z_tr^T Z_tr + delta^2 I``.

    ``Z`` holds every data row (training and validation); only the training rows
    enter the regularised covariance and the right-hand side ``Z_tr^T y_tr``.
    ``labels[c]`` names the cell behind column ``c``.
    """

    def __init__(
        self,
        Z: np.ndarray,
        y,
        train_idx,
        val_idx,
        delta: float,
        labels: list[Hashable],
        M: int,
    ):
        if not delta > 0:
            raise ValueError("delta must be positive")
        self.Z = np.asarray(Z, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.val_idx = np.asarray(val_idx, dtype=np.int64)
        self.delta = float(delta)
        self.labels = list(labels)
        self.M = M
        self.inv = RegularizedInverse(self.covariance(), self.delta2)

    @property
    def delta2(self) -> float:
        return self.delta**2

    @property
    def C(self) -> int:
        return self.Z.shape[1]

    @property
    def Z_train(self) -> np.ndarray:
        return self.Z[self.train_idx]

    @property
    def Z_val(self) -> np.ndarray:
        return self.Z[self.val_idx]

    def covariance(self) -> np.ndarray:
        Zt = self.Z_train
        C = Zt.T @ Zt
        C[np.diag_indices_from(C)] += self.delta2
        return C

    def copy(self) -> "FeatureState":
        out = object.__new__(type(self))
        out.__dict__.update(self.__dict__)
        out.Z = self.Z.copy()
        out.labels = list(self.labels)
        out.inv = self.inv.copy()
        return out

    def _settle(self):
        self.inv.maybe_refresh(self.covariance)

    def delete_column(self, i: int):
        self.inv.delete_row_col(i)
        self.Z = np.delete(self.Z, i, axis=1)
        del self.labels[i]

    def append_column(self, z, label: Hashable):
        z = np.asarray(z, dtype=float)
        zt = z[self.train_idx]
        b = self.Z_train.T @ zt
        self.inv.extend_row_col(b, None, float(zt @ zt) + self.delta2)
        self.Z = np.column_stack([self.Z, z])
        self.labels.append(label)

    def merge_columns(self, i: int, j: int, label: Hashable):
        """Replace columns ``i`` and ``j`` by their sum at position ``i``; ``j`` is removed.

        Four inverse updates: add row ``j`` to row ``i``, add column ``j`` to
        column ``i``, delete row/column ``j``, subtract ``delta^2`` at ``(i, i)``.
        Deleting before the diagonal correction keeps every step invertible.
        """
        if i == j:
            raise ValueError("cannot merge a column with itself")
        C = self.C
        Zt = self.Z_train
        e_i = np.zeros(C)
        e_i[i] = 1.0
        row_j = Zt.T @ Zt[:, j]
        row_j[j] += self.delta2
        self.inv.rank1_update(e_i, row_j)
        col_j = row_j.copy()
        col_j[i] += row_j[j]
        self.inv.rank1_update(col_j, e_i)
        self.inv.delete_row_col(j)
        ii = i - 1 if j < i else i
        e = np.zeros(C - 1)
        e[ii] = 1.0
        self.inv.rank1_update(-self.delta2 * e, e)
        self.inv.inv = 0.5 * (self.inv.inv + self.inv.inv.T)
        self.Z[:, i] += self.Z[:, j]
        self.Z = np.delete(self.Z, j, axis=1)
        self.labels[i] = label
        del self.labels[j]
        self._settle()

    def theta(self) -> np.ndarray:
        return self.inv.inv @ (self.Z_train.T @ self.y[self.train_idx])

    def fit_eval(self) -> tuple[np.ndarray, float]:
        """Ridge solution and validation RMSE from the maintained inverse."""
        theta = self.theta()
        return theta, self._rmse(self.val_idx, theta)

    def rmse_train(self, theta: Optional[np.ndarray] = None) -> float:
        return self._rmse(self.train_idx, self.theta() if theta is None else theta)

    def _rmse(self, rows, theta) -> float:
        if len(rows) == 0:
            return math.nan
        resid = self.Z[rows] @ theta - self.y[rows]
        return float(np.sqrt(np.mean(resid**2)))

    def inverse_error(self) -> float:
        """Max-abs distance between the maintained and a fresh inverse."""
        return float(np.max(np.abs(self.inv.inv - invert_spd(self.covariance())), initial=0.0))

    def approx_kernel(self, i: int, j: int) -> float:
        """Fraction of the ``M`` partitions that put rows ``i`` and ``j`` in one cell."""
        return float(self.Z[i] @ self.Z[j])


def leaf_columns(
    trees: Sequence[MondrianTree], X, lifetime: Optional[float] = None
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Indicator features of non-empty cells, scaled by ``1/sqrt(M)``.

    Columns run over trees in order and, within a tree, over leaves in order of
    the first row that falls into them.
    """
    X = np.asarray(X, dtype=float)
    M = len(trees)
    scale = 1.0 / math.sqrt(M)
    blocks, labels = [], []
    for m, tree in enumerate(trees):
        leaves = assign_leaves(tree, X, lifetime)
        uniq, first = np.unique(leaves, return_index=True)
        order = uniq[np.argsort(first)]
        block = (leaves[:, None] == order[None, :]).astype(float) * scale
        blocks.append(block)
        labels += [(m, int(l)) for l in order]
    return np.hstack(blocks), labels


class MondrianFeatures(FeatureState):
    """Feature state tied to ``M`` Mondrian trees, able to undo cuts youngest first."""

    def __init__(self, trees, X, y, train_idx, val_idx, delta, lifetime=None):
        self.trees = list(trees)
        self.X = np.asarray(X, dtype=float)
        Z, labels = leaf_columns(self.trees, self.X, lifetime)
        super().__init__(Z, y, train_idx, val_idx, delta, labels, len(self.trees))
        cut = lifetime if lifetime is not None else math.inf
        self.active_cuts = [e for e in cut_schedule(self.trees) if e[0] <= cut]

    @property
    def lifetime(self) -> float:
        return self.active_cuts[-1][0] if self.active_cuts else 0.0

    def column_of(self, m: int, node: int) -> Optional[int]:
        try:
            return self.labels.index((m, node))
        except ValueError:
            return None

    def youngest_cut_columns(self) -> tuple[Optional[int], Optional[int]]:
        """Columns of the two cells created by the youngest remaining cut."""
        _, m, nid = self.active_cuts[-1]
        node = self.trees[m].nodes[nid]
        return self.column_of(m, node.left), self.column_of(m, node.right)

    def remove_cut(self, i: int, j: int):
        """Merge sibling columns ``i`` and ``j`` of the youngest remaining cut."""
        if i == j:
            raise ValueError("cannot merge a column with itself")
        if not self.active_cuts or {i, j} != set(self.youngest_cut_columns()):
            raise ValueError("columns are not the two cells of the youngest cut")
        self.remove_youngest_cut()

    def remove_youngest_cut(self):
        """Undo the youngest cut; cells without data only need relabelling."""
        _, m, nid = self.active_cuts.pop()
        node = self.trees[m].nodes[nid]
        ci, cj = self.column_of(m, node.left), self.column_of(m, node.right)
        if ci is not None and cj is not None:
            self.merge_columns(ci, cj, (m, nid))
        elif ci is not None or cj is not None:
            self.labels[ci if ci is not None else cj] = (m, nid)


def build_features(trees, X, y, train_idx, val_idx, delta, lifetime=None) -> MondrianFeatures:
    """Feature state for ``trees`` truncated at ``lifetime`` (default: all cuts)."""
    return MondrianFeatures(trees, X, y, train_idx, val_idx, delta, lifetime)


def approx_kernel(state: FeatureState, i: int, j: int) -> float:
    return state.approx_kernel(i, j)


def fit_eval(state: FeatureState) -> tuple[np.ndarray, float]:
    return state.fit_eval()


def _path_point(state: MondrianFeatures) -> PathPoint:
    theta, rv = state.fit_eval()
    return PathPoint(state.lifetime, state.rmse_train(theta), rv, state.C)


def backward_path(trees, X, y, train_idx, val_idx, delta) -> list[PathPoint]:
    """Validation RMSE for every lifetime, walking cuts from youngest to oldest.

    Returned in ascending lifetime order: ``0, t_1, ..., t_K``.
    """
    state = build_features(trees, X, y, train_idx, val_idx, delta)
    path = [_path_point(state)]
    while state.active_cuts:
        state.remove_youngest_cut()
        path.append(_path_point(state))
    path.reverse()
    return path


def rebuild_point(trees, X, y, train_idx, val_idx, delta, lifetime) -> PathPoint:
    """From-scratch fit at ``lifetime`` through a direct ridge solve."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Z, _ = leaf_columns(trees, X, lifetime)
    theta = solve_ridge(Z[train_idx], y[train_idx], delta)
    r = lambda rows: float(np.sqrt(np.mean((Z[rows] @ theta - y[rows]) ** 2)))
    return PathPoint(float(lifetime), r(train_idx), r(val_idx), Z.shape[1])


def fit_predict(trees, X_train, y_train, X_test, delta, lifetime=None) -> np.ndarray:
    """Fit the random-feature ridge model on training rows and predict ``X_test``.

    Uses whichever of the primal and dual systems is smaller.  Test points in
    cells without training data get a zero feature weight.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    Z, labels = leaf_columns(trees, np.vstack([X_train, X_test]), lifetime)
    n = X_train.shape[0]
    theta = solve_ridge(Z[:n], y_train, delta)
    return Z[n:] @ theta
