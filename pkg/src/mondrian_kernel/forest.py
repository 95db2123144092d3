"""Mondrian forest regression with conjugate Gaussian leaves."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    BoundedBox,
    MondrianTree,
    assign_leaves,
    cut_schedule,
    data_box,
    sample_trees,
)


@dataclass(frozen=True)
class GaussianParams:
    prior_mean: float
    prior_var: float
    noise_var: float

    def __post_init__(self):
        for name in ("prior_var", "noise_var"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not math.isfinite(self.prior_mean):
            raise ValueError("prior_mean must be finite")

    @property
    def prior_precision(self) -> float:
        return 1.0 / self.prior_var

    @property
    def noise_precision(self) -> float:
        return 1.0 / self.noise_var

    @classmethod
    def from_targets(cls, y) -> "GaussianParams":
        """Data-driven defaults: mean(y), var(y) and var(y)/2 (a heuristic)."""
        y = np.asarray(y, dtype=float)
        var = float(np.var(y)) if y.size > 1 else 0.0
        if not var > 0:
            var = 1.0
        return cls(float(np.mean(y)), var, var / 2.0)

    @classmethod
    def matching_ridge(cls, delta: float, prior_var: float = 1.0) -> "GaussianParams":
        """Zero-mean prior with ``noise_var / prior_var == delta**2``."""
        return cls(0.0, prior_var, prior_var * delta**2)


def posterior_from_stats(params: GaussianParams, count: int, sum_y: float) -> tuple[float, float]:
    prec = params.prior_precision + count * params.noise_precision
    mean = (params.prior_precision * params.prior_mean + params.noise_precision * sum_y) / prec
    return mean, 1.0 / prec


def gaussian_posterior(params: GaussianParams, targets) -> tuple[float, float]:
    """Posterior (mean, variance) of the cell mean given ``targets``."""
    targets = np.asarray(targets, dtype=float)
    return posterior_from_stats(params, targets.size, float(np.sum(targets)))


@dataclass
class LeafStats:
    count: int
    sum_y: float
    post_mean: float
    post_var: float

    @classmethod
    def from_targets(cls, params: GaussianParams, targets) -> "LeafStats":
        targets = np.asarray(targets, dtype=float)
        mean, var = posterior_from_stats(params, targets.size, float(np.sum(targets)))
        return cls(int(targets.size), float(np.sum(targets)), mean, var)


@dataclass
class ForestModel:
    trees: list[MondrianTree]
    params: GaussianParams
    leaf_stats: list[dict[int, LeafStats]]
    bbox: BoundedBox
    lifetime: Optional[float] = None
    clamped: int = 0

    @property
    def M(self) -> int:
        return len(self.trees)

    def leaf_mean(self, m: int, leaf: int) -> float:
        st = self.leaf_stats[m].get(leaf)
        return self.params.prior_mean if st is None else st.post_mean

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def fit_leaves(
    trees: Sequence[MondrianTree],
    X_train,
    y_train,
    params: GaussianParams,
    bbox: BoundedBox,
    lifetime: Optional[float] = None,
) -> ForestModel:
    """Compute leaf posteriors for already-sampled ``trees`` (truncated at ``lifetime``)."""
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    stats = []
    for tree in trees:
        leaves = assign_leaves(tree, X_train, lifetime)
        per_tree = {}
        for leaf in np.unique(leaves):
            per_tree[int(leaf)] = LeafStats.from_targets(params, y_train[leaves == leaf])
        stats.append(per_tree)
    return ForestModel(list(trees), params, stats, bbox, lifetime)


def train_forest(
    X_train,
    y_train,
    M: int,
    lifetime: float,
    params: Optional[GaussianParams] = None,
    seed: int = 0,
    X_extra=None,
) -> ForestModel:
    """Sample ``M`` trees on the box around ``X_train`` (and ``X_extra``) and fit leaves."""
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    if X_train.ndim != 2 or X_train.shape[0] == 0:
        raise ValueError("training data is empty")
    if not np.all(np.isfinite(X_train)) or not np.all(np.isfinite(y_train)):
        raise ValueError("training data contains non-finite values")
    if M < 1:
        raise ValueError("M must be at least 1")
    params = params or GaussianParams.from_targets(y_train)
    X_all = X_train if X_extra is None else np.vstack([X_train, np.asarray(X_extra, dtype=float)])
    bbox = data_box(X_all)
    trees = sample_trees(bbox, M, lifetime, seed)
    return fit_leaves(trees, X_train, y_train, params, bbox)


def predict(model: ForestModel, X) -> np.ndarray:
    """Average over trees of the leaf posterior means; points outside the box are clamped."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xc = np.clip(X, model.bbox.lower, model.bbox.upper)
    model.clamped += int(np.any(Xc != X, axis=1).sum())
    out = np.zeros(X.shape[0])
    for m, tree in enumerate(model.trees):
        leaves = assign_leaves(tree, Xc, model.lifetime)
        out += np.array([model.leaf_mean(m, int(l)) for l in leaves])
    return out / model.M


def update_mse(mse: float, y_hat_old: float, y_hat_new: float, y: float, N: int) -> float:
    """Replace one residual's contribution to a mean squared error over ``N`` points."""
    return mse - (y_hat_old - y) ** 2 / N + (y_hat_new - y) ** 2 / N


def rmse(y_hat, y) -> float:
    return float(np.sqrt(np.mean((np.asarray(y_hat) - np.asarray(y)) ** 2)))


@dataclass(frozen=True)
class PathPoint:
    lifetime: float
    rmse_train: float
    rmse_val: float
    num_features: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"lifetime": self.lifetime, "rmse_train": self.rmse_train, "rmse_val": self.rmse_val}
        if self.num_features is not None:
            d["num_features"] = self.num_features
        return d


class _PathTracker:
    """Predictions and MSE on one evaluation set, updated point by point."""

    def __init__(self, y, init: float, M: int):
        self.y = np.asarray(y, dtype=float)
        self.N = self.y.size
        self.M = M
        self.y_hat = np.full(self.N, float(init))
        self.mse = float(np.mean((self.y_hat - self.y) ** 2)) if self.N else 0.0

    def move(self, rows: np.ndarray, old_mean: float, new_mean: float):
        delta = (new_mean - old_mean) / self.M
        for n in rows:
            new = self.y_hat[n] + delta
            self.mse = update_mse(self.mse, self.y_hat[n], new, self.y[n], self.N)
            self.y_hat[n] = new

    @property
    def rmse(self) -> float:
        return math.sqrt(max(self.mse, 0.0)) if self.N else math.nan


def forward_path(
    trees: Sequence[MondrianTree],
    params: GaussianParams,
    X_train,
    y_train,
    X_val,
    y_val,
) -> list[PathPoint]:
    """Train/validation RMSE of the forest for every lifetime in ``[0, terminal]``.

    Cuts are replayed in order of birth time.  Each cut only touches the points
    of the leaf it splits, whose predictions and the running MSE are patched.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    M = len(trees)
    train = _PathTracker(y_train, params.prior_mean, M)
    val = _PathTracker(y_val, params.prior_mean, M)

    # per tree: leaf id -> (train rows, val rows, posterior mean)
    leaves: list[dict[int, tuple[np.ndarray, np.ndarray, float]]] = []
    all_train = np.arange(X_train.shape[0])
    all_val = np.arange(X_val.shape[0])
    root_mean, _ = posterior_from_stats(params, all_train.size, float(y_train.sum()))
    for tree in trees:
        # lifetime 0: replace the prior-mean initialisation by the root posterior
        train.move(all_train, params.prior_mean, root_mean)
        val.move(all_val, params.prior_mean, root_mean)
        leaves.append({tree.root: (all_train, all_val, root_mean)})

    path = [PathPoint(0.0, train.rmse, val.rmse)]
    for t, m, nid in cut_schedule(trees):
        node = trees[m].nodes[nid]
        tr, va, mean = leaves[m].pop(nid)
        go_tr = X_train[tr, node.cut_dim] <= node.cut_loc
        go_va = X_val[va, node.cut_dim] <= node.cut_loc
        for child, ctr, cva in (
            (node.left, tr[go_tr], va[go_va]),
            (node.right, tr[~go_tr], va[~go_va]),
        ):
            cmean, _ = posterior_from_stats(params, ctr.size, float(y_train[ctr].sum()))
            train.move(ctr, mean, cmean)
            val.move(cva, mean, cmean)
            leaves[m][child] = (ctr, cva, cmean)
        path.append(PathPoint(float(t), train.rmse, val.rmse))
    return path


def evaluate_at(
    trees: Sequence[MondrianTree],
    params: GaussianParams,
    X_train,
    y_train,
    X_val,
    y_val,
    lifetime: float,
) -> PathPoint:
    """From-scratch evaluation of the forest with cuts up to ``lifetime``."""
    model = fit_leaves(trees, X_train, y_train, params, trees[0].box, lifetime)
    return PathPoint(
        float(lifetime),
        rmse(predict(model, X_train), y_train),
        rmse(predict(model, X_val), y_val),
    )
