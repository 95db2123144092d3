"""Ridge regression solvers and O(C^2) inverse updates.

The three update primitives work on plain arrays and return new arrays;
:class:`RegularizedInverse` wraps them with symmetrisation, an update counter
and periodic refresh from scratch to bound floating-point drift.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import scipy.linalg

SINGULAR_TOL = 1e-12
REFRESH_EVERY = 512


class SingularUpdateError(ArithmeticError):
    """An update would make (or found) the tracked matrix singular."""


def _check_delta(delta: float):
    if not delta > 0:
        raise ValueError("delta must be positive")


def solve_ridge_primal(Z, y, delta: float) -> np.ndarray:
    """Minimiser of ``delta^2 |theta|^2 + |y - Z theta|^2`` via the normal equation."""
    _check_delta(delta)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    A = Z.T @ Z
    A[np.diag_indices_from(A)] += delta**2
    return scipy.linalg.solve(A, Z.T @ y, assume_a="pos")


def solve_ridge_dual(X, y, delta: float) -> np.ndarray:
    """Same minimiser as :func:`solve_ridge_primal`, through the ``N x N`` system."""
    _check_delta(delta)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    G = X @ X.T
    G[np.diag_indices_from(G)] += delta**2
    return X.T @ scipy.linalg.solve(G, y, assume_a="pos")


def solve_ridge(Z, y, delta: float) -> np.ndarray:
    """Pick the smaller of the primal and dual systems."""
    Z = np.asarray(Z)
    if Z.shape[1] <= Z.shape[0]:
        return solve_ridge_primal(Z, y, delta)
    return solve_ridge_dual(Z, y, delta)


def laplace_gram(X, lifetimes, X2=None) -> np.ndarray:
    """``K_ij = exp(-sum_d lifetimes_d |X_id - X2_jd|)``; ``X2`` defaults to ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    lam = np.broadcast_to(np.asarray(lifetimes, dtype=float), (X.shape[1],))
    if np.any(lam < 0):
        raise ValueError("lifetimes must be non-negative")
    dist = np.zeros((X.shape[0], X2.shape[0]))
    for d in range(X.shape[1]):
        if lam[d] != 0.0:
            dist += lam[d] * np.abs(X[:, d, None] - X2[None, :, d])
    return np.exp(-dist)


class KernelRidge:
    """Exact kernel ridge regressor; the Cholesky factor is cached across predictions."""

    def __init__(self, K, y, delta: float):
        _check_delta(delta)
        K = np.asarray(K, dtype=float)
        y = np.asarray(y, dtype=float)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite kernel matrix or targets")
        A = K.copy()
        A[np.diag_indices_from(A)] += delta**2
        self._factor = scipy.linalg.cho_factor(A)
        self.alpha = scipy.linalg.cho_solve(self._factor, y)

    def predict(self, k_star) -> np.ndarray:
        k_star = np.asarray(k_star, dtype=float)
        if not np.all(np.isfinite(k_star)):
            raise ValueError("non-finite kernel vector")
        return k_star @ self.alpha


def kernel_ridge_predict(K, k_star, y, delta: float):
    """``k_star (K + delta^2 I)^-1 y``; ``k_star`` may be one vector or a row stack."""
    return KernelRidge(K, y, delta).predict(k_star)


def rank1_update(inv: np.ndarray, u, v) -> np.ndarray:
    """Inverse of ``A + u v^T`` from ``inv = A^-1`` (Sherman-Morrison)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    Au = inv @ u
    vA = v @ inv
    denom = 1.0 + v @ Au
    if abs(denom) <= SINGULAR_TOL:
        raise SingularUpdateError(f"rank-1 update denominator {denom:.3e} is ~0")
    return inv - np.outer(Au, vA) / denom


def delete_row_col(inv: np.ndarray, i: int) -> np.ndarray:
    """Inverse of ``A`` with row and column ``i`` deleted, from ``inv = A^-1``."""
    h = inv[i, i]
    if abs(h) <= SINGULAR_TOL:
        raise SingularUpdateError(f"cannot delete index {i}: pivot {h:.3e} is ~0")
    keep = np.r_[0:i, i + 1 : inv.shape[0]]
    E = inv[np.ix_(keep, keep)]
    f = inv[keep, i]
    g = inv[i, keep]
    return E - np.outer(f, g) / h


def extend_row_col(inv: np.ndarray, b, c, d: float) -> np.ndarray:
    """Inverse of ``[[A, b], [c^T, d]]`` from ``inv = A^-1`` via the Schur complement."""
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    Ab = inv @ b
    cA = c @ inv
    s = d - c @ Ab
    if abs(s) <= SINGULAR_TOL:
        raise SingularUpdateError(f"Schur complement {s:.3e} is ~0")
    n = inv.shape[0]
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = inv + np.outer(Ab, cA) / s
    out[:n, n] = -Ab / s
    out[n, :n] = -cA / s
    out[n, n] = 1.0 / s
    return out


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


class RegularizedInverse:
    """Maintained inverse of a symmetric regularised matrix ``C``.

    ``C`` itself is not stored unless ``track_matrix`` is set (used by tests and
    by stand-alone updates); callers that can rebuild ``C`` from other state
    pass a ``rebuild`` callable to :meth:`maybe_refresh` instead.

    Every ``refresh_every`` incremental updates the inverse is recomputed from
    scratch.  Refreshes only happen when the caller asks for them, i.e. at
    points where ``C`` is symmetric positive definite again.
    """

    def __init__(
        self,
        matrix,
        delta2: float,
        *,
        track_matrix: bool = False,
        refresh_every: int = REFRESH_EVERY,
    ):
        if not delta2 > 0:
            raise ValueError("delta2 must be positive")
        matrix = np.asarray(matrix, dtype=float)
        self.delta2 = float(delta2)
        self.refresh_every = refresh_every
        self.matrix = matrix.copy() if track_matrix else None
        self.inv = invert_spd(matrix)
        self.updates = 0
        self.refreshes = 0

    @classmethod
    def from_features(cls, Z, delta2: float, **kwargs) -> "RegularizedInverse":
        Z = np.asarray(Z, dtype=float)
        C = Z.T @ Z
        C[np.diag_indices_from(C)] += delta2
        return cls(C, delta2, **kwargs)

    @property
    def dim(self) -> int:
        return self.inv.shape[0]

    def copy(self) -> "RegularizedInverse":
        out = object.__new__(RegularizedInverse)
        out.__dict__.update(self.__dict__)
        out.inv = self.inv.copy()
        out.matrix = None if self.matrix is None else self.matrix.copy()
        return out

    def rank1_update(self, u, v, *, symmetric: bool = False):
        self.inv = rank1_update(self.inv, u, v)
        if symmetric:
            self.inv = symmetrize(self.inv)
        if self.matrix is not None:
            self.matrix = self.matrix + np.outer(u, v)
        self.updates += 1

    def delete_row_col(self, i: int):
        self.inv = delete_row_col(self.inv, i)
        if self.matrix is not None:
            self.matrix = np.delete(np.delete(self.matrix, i, axis=0), i, axis=1)
        self.updates += 1

    def extend_row_col(self, b, c=None, d: float = 0.0):
        sym = c is None
        c = b if c is None else c
        self.inv = extend_row_col(self.inv, b, c, d)
        if sym:
            self.inv = symmetrize(self.inv)
        if self.matrix is not None:
            n = self.matrix.shape[0]
            m = np.empty((n + 1, n + 1))
            m[:n, :n] = self.matrix
            m[:n, n] = b
            m[n, :n] = c
            m[n, n] = d
            self.matrix = m
        self.updates += 1

    def maybe_refresh(self, rebuild: Optional[Callable[[], np.ndarray]] = None) -> bool:
        """Recompute the inverse from scratch if the update budget is spent."""
        if self.updates < self.refresh_every:
            return False
        self.refresh(rebuild)
        return True

    def refresh(self, rebuild: Optional[Callable[[], np.ndarray]] = None):
        if rebuild is not None:
            C = rebuild()
        elif self.matrix is not None:
            C = self.matrix
        else:
            raise ValueError("no source to rebuild the matrix from")
        self.inv = invert_spd(C)
        self.updates = 0
        self.refreshes += 1


def invert_spd(C) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix through its Cholesky factor."""
    C = np.asarray(C, dtype=float)
    if C.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        factor = scipy.linalg.cho_factor(C)
        inv = scipy.linalg.cho_solve(factor, np.eye(C.shape[0]))
    except np.linalg.LinAlgError:
        # not SPD (e.g. a general test matrix): fall back to LU
        inv = np.linalg.inv(C)
    return inv
