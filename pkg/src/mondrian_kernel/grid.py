"""Mondrian grid: per-dimension lifetimes with incremental updates and greedy search.

A grid is ``D`` independent 1-D Mondrians, one per axis, whose cuts run
through all of space.  Only whether a gap between consecutive distinct data
coordinates holds a cut matters for the data partition, so each gap keeps the
birth time of its first cut, drawn once and reused for every lifetime
configuration.

A cell of grid ``m`` is keyed by, for each dimension, the rank of the lowest
distinct coordinate of its interval.  Cells sharing every key entry except
dimension ``d`` and touching in ``d`` are neighbours in ``d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import RngStream, stream_id
from .kernel_approx import FeatureState

Key = tuple[int, ...]


class DimensionExhausted(Exception):
    """No cut is left to add (or remove) in the requested dimension."""


class SearchComplete(Exception):
    """No legal move remains for the optimiser."""


@dataclass(frozen=True)
class IntervalCuts:
    """Distinct sorted coordinates per dimension and first-cut times per gap.

    ``times[d]`` has shape ``(M, N_d - 1)``; entry ``(m, g)`` is the birth time
    of the first cut of grid ``m`` between coordinates ``g`` and ``g + 1``.
    """

    coords: tuple[np.ndarray, ...]
    times: tuple[np.ndarray, ...]
    ranks: np.ndarray  # (N, D) rank of each row's coordinate in ``coords[d]``

    @property
    def M(self) -> int:
        return self.times[0].shape[0]

    @property
    def D(self) -> int:
        return len(self.coords)

    @classmethod
    def sample(cls, X, M: int, seed: int) -> "IntervalCuts":
        X = np.asarray(X, dtype=float)
        N, D = X.shape
        coords, times, ranks = [], [], np.empty((N, D), dtype=np.int64)
        for d in range(D):
            c = np.unique(X[:, d])
            coords.append(c)
            ranks[:, d] = np.searchsorted(c, X[:, d])
            widths = np.diff(c)
            t = np.empty((M, widths.size))
            for m in range(M):
                rng = RngStream(seed, stream_id("grid", m * D + d))
                u = 1.0 - rng.generator.random(widths.size)
                t[m] = -np.log(u) / widths
            times.append(t)
        return cls(tuple(coords), tuple(times), ranks)


class GridState:
    """Mondrian grid ensemble at one lifetime configuration, with its feature state."""

    def __init__(self, ensemble: IntervalCuts, lambdas, y, train_idx, val_idx, delta: float):
        self.ensemble = ensemble
        self.lambdas = np.array(lambdas, dtype=float)
        if self.lambdas.shape != (ensemble.D,) or np.any(self.lambdas < 0):
            raise ValueError("lifetimes must be a non-negative vector of length D")
        if not np.all(np.isfinite(self.lambdas)):
            raise ValueError("lifetimes must be finite")
        self.active = [t <= lam for t, lam in zip(ensemble.times, self.lambdas)]
        self.last_move: Optional[tuple[int, int]] = None
        M = ensemble.M
        scale = 1.0 / math.sqrt(M)
        N = ensemble.ranks.shape[0]
        self.cells: list[dict[Key, np.ndarray]] = []
        columns, labels = [], []
        for m in range(M):
            keys = np.column_stack(
                [self._left_bounds(m, d, ensemble.ranks[:, d]) for d in range(ensemble.D)]
            )
            uniq, first, inverse = np.unique(
                keys, axis=0, return_index=True, return_inverse=True
            )
            inverse = inverse.reshape(-1)
            cells = {}
            for k in np.argsort(first):
                key = tuple(int(v) for v in uniq[k])
                members = np.flatnonzero(inverse == k)
                cells[key] = members
                z = np.zeros(N)
                z[members] = scale
                columns.append(z)
                labels.append((m, key))
            self.cells.append(cells)
        Z = np.column_stack(columns)
        self.features = FeatureState(Z, y, train_idx, val_idx, delta, labels, M)

    # -- partition bookkeeping -------------------------------------------------

    def _boundaries(self, m: int, d: int) -> np.ndarray:
        gaps = np.flatnonzero(self.active[d][m])
        return np.concatenate([[0], gaps + 1])

    def _left_bounds(self, m: int, d: int, ranks) -> np.ndarray:
        b = self._boundaries(m, d)
        return b[np.searchsorted(b, ranks, side="right") - 1]

    def neighbors(self, m: int, key: Key, d: int) -> tuple[Optional[Key], Optional[Key]]:
        """Non-empty cells adjacent to ``key`` across the cuts bounding it in ``d``."""
        b = self._boundaries(m, d)
        pos = int(np.searchsorted(b, key[d]))
        out = []
        for p in (pos - 1, pos + 1):
            if 0 <= p < b.size:
                other = key[:d] + (int(b[p]),) + key[d + 1 :]
                out.append(other if other in self.cells[m] else None)
            else:
                out.append(None)
        return out[0], out[1]

    def _column(self, m: int, key: Key) -> int:
        return self.features.labels.index((m, key))

    def _indicator(self, members) -> np.ndarray:
        z = np.zeros(self.features.Z.shape[0])
        z[members] = 1.0 / math.sqrt(self.ensemble.M)
        return z

    def _relabel(self, m: int, old: Key, new: Key):
        self.cells[m][new] = self.cells[m].pop(old)
        self.features.labels[self._column(m, old)] = (m, new)

    @property
    def num_features(self) -> int:
        return self.features.C

    def partition(self) -> set:
        """Set of ``(m, member rows)`` pairs; independent of column order."""
        return {
            (m, tuple(int(i) for i in members))
            for m, cells in enumerate(self.cells)
            for members in cells.values()
        }

    def active_cut_count(self, d: int) -> int:
        return int(self.active[d].sum())

    def copy(self) -> "GridState":
        out = object.__new__(GridState)
        out.ensemble = self.ensemble
        out.lambdas = self.lambdas.copy()
        out.active = [a.copy() for a in self.active]
        out.last_move = self.last_move
        out.cells = [dict(c) for c in self.cells]
        out.features = self.features.copy()
        return out

    # -- lifetime moves --------------------------------------------------------

    def increase_lifetime(self, d: int) -> "GridState":
        """Activate the next cut in dimension ``d`` across all grids (in place)."""
        t = self.ensemble.times[d]
        inactive = ~self.active[d]
        if not inactive.any():
            raise DimensionExhausted(f"no inactive cut left in dimension {d}")
        masked = np.where(inactive, t, np.inf)
        m, g = np.unravel_index(int(np.argmin(masked)), t.shape)
        m, g = int(m), int(g)
        left = int(self._left_bounds(m, d, [g])[0])
        self.active[d][m, g] = True
        self.lambdas[d] = t[m, g]
        ranks = self.ensemble.ranks[:, d]
        for key in [k for k in self.cells[m] if k[d] == left]:
            members = self.cells[m][key]
            low = members[ranks[members] <= g]
            high = members[ranks[members] > g]
            right_key = key[:d] + (g + 1,) + key[d + 1 :]
            if low.size and high.size:
                self.features.delete_column(self._column(m, key))
                self.cells[m][key] = low
                self.cells[m][right_key] = high
                self.features.append_column(self._indicator(low), (m, key))
                self.features.append_column(self._indicator(high), (m, right_key))
                self.features._settle()
            elif high.size:
                self._relabel(m, key, right_key)
        self.last_move = (d, +1)
        return self

    def decrease_lifetime(self, d: int) -> "GridState":
        """Deactivate the youngest active cut in dimension ``d`` (in place)."""
        t = self.ensemble.times[d]
        if not self.active[d].any():
            raise DimensionExhausted(f"no active cut left in dimension {d}")
        masked = np.where(self.active[d], t, -np.inf)
        m, g = np.unravel_index(int(np.argmax(masked)), t.shape)
        m, g = int(m), int(g)
        boundary = g + 1
        pairs = []
        for key in [k for k in self.cells[m] if k[d] == boundary]:
            left_nb, _ = self.neighbors(m, key, d)
            pairs.append((key, left_nb))
        self.active[d][m, g] = False
        remaining = t[self.active[d]]
        self.lambdas[d] = float(remaining.max()) if remaining.size else 0.0
        left = int(self._left_bounds(m, d, [g])[0])
        for key, left_nb in pairs:
            merged_key = key[:d] + (left,) + key[d + 1 :]
            if left_nb is None:
                self._relabel(m, key, merged_key)
                continue
            i, j = self._column(m, key), self._column(m, left_nb)
            for c in sorted((i, j), reverse=True):
                self.features.delete_column(c)
            members = np.sort(np.concatenate([self.cells[m].pop(key), self.cells[m].pop(left_nb)]))
            self.cells[m][merged_key] = members
            self.features.append_column(self._indicator(members), (m, merged_key))
            self.features._settle()
        self.last_move = (d, -1)
        return self

    def rmse(self) -> float:
        return self.features.fit_eval()[1]


def init_grid(X_all, M: int, config0, delta: float, y, train_idx, val_idx, seed: int) -> GridState:
    """Sample first-cut times for ``M`` grids and build the state at ``config0``."""
    X_all = np.asarray(X_all, dtype=float)
    if X_all.ndim != 2 or X_all.shape[0] < 2:
        raise ValueError("need at least two data rows")
    if M < 1:
        raise ValueError("M must be at least 1")
    ensemble = IntervalCuts.sample(X_all, M, seed)
    return GridState(ensemble, config0, y, train_idx, val_idx, delta)


def rebuild(state: GridState, lambdas=None) -> GridState:
    """Fresh state on the same ensemble and split, built from scratch."""
    f = state.features
    lam = state.lambdas if lambdas is None else lambdas
    return GridState(state.ensemble, lam, f.y, f.train_idx, f.val_idx, f.delta)


def increase_lifetime(state: GridState, d: int) -> GridState:
    return state.copy().increase_lifetime(d)


def decrease_lifetime(state: GridState, d: int) -> GridState:
    return state.copy().decrease_lifetime(d)


def _pick(probes):
    # probes: (rmse, d, direction index, state); ties -> smallest d, increase first
    if not probes:
        raise SearchComplete("no legal move left")
    return min(probes, key=lambda p: (p[0], p[1], p[2]))


def greedy_step(state: GridState) -> tuple[int, GridState, float]:
    """Probe one lifetime increase per dimension and commit the best."""
    probes = []
    for d in range(state.ensemble.D):
        try:
            probe = increase_lifetime(state, d)
        except DimensionExhausted:
            continue
        probes.append((probe.rmse(), d, 0, probe))
    e, d, _, new = _pick(probes)
    return d, new, e


def greedy_step_bidirectional(state: GridState) -> tuple[tuple[int, int], GridState, float]:
    """Probe an increase and a decrease per dimension and commit the best.

    A move that exactly reverts the previous committed move is not probed.
    """
    banned = None if state.last_move is None else (state.last_move[0], -state.last_move[1])
    probes = []
    for d in range(state.ensemble.D):
        for k, (direction, op) in enumerate(((+1, increase_lifetime), (-1, decrease_lifetime))):
            if (d, direction) == banned:
                continue
            try:
                probe = op(state, d)
            except DimensionExhausted:
                continue
            probes.append((probe.rmse(), d, k, probe))
    e, d, k, new = _pick(probes)
    return (d, +1 if k == 0 else -1), new, e


def run_search(
    state: GridState, optimizer: str = "greedy", budget: int = 10
) -> tuple[list[dict], GridState]:
    """Iterate greedy steps until the budget is spent or no move is left.

    Returns the per-step trace and the final state; ``state`` is not modified.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if optimizer not in ("greedy", "bidir", "bidirectional"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    trace = []
    for step in range(1, budget + 1):
        try:
            if optimizer == "greedy":
                d, state, e = greedy_step(state)
                direction = +1
            else:
                (d, direction), state, e = greedy_step_bidirectional(state)
        except SearchComplete:
            break
        trace.append(
            {
                "step": step,
                "lambdas": [float(v) for v in state.lambdas],
                "rmse_val": float(e),
                "move": {"dim": d, "dir": "increase" if direction > 0 else "decrease"},
                "num_features": state.num_features,
            }
        )
    return trace, state


def select_features(lambdas, eps: float = 1e-6) -> set[int]:
    """Dimensions (0-based) whose lifetime is at least ``eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return {d for d, lam in enumerate(np.asarray(lambdas, dtype=float)) if lam >= eps}
