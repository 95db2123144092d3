"""Mondrian process sampling on axis-aligned boxes.

Trees are stored as a flat list of :class:`MondrianNode` records (a node
arena); node ``0`` is always the root.  All traversals are iterative because
tree depth is unbounded in principle.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_NODES = 10_000_000


class DegenerateBoxError(ValueError):
    """Raised when a box has zero linear dimension but a cut is requested."""


class InvalidRateError(ValueError):
    pass


class TreeExplosionError(RuntimeError):
    pass


def stream_id(component: str, index: int = 0) -> int:
    """Stable stream id for ``(component, index)``.

    The id is ``crc32(component) * 2**32 + index``, so other implementations
    can reproduce the derivation without sharing a hash seed.
    """
    return (zlib.crc32(component.encode("utf-8")) << 32) + int(index)


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def for_component(cls, seed: int, component: str, index: int = 0) -> "RngStream":
        return cls(seed, stream_id(component, index))

    def uniform_open_closed(self) -> float:
        """A uniform draw on (0, 1]."""
        return 1.0 - self.generator.random()

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.generator.random()

    def poisson(self, lam: float) -> int:
        return int(self.generator.poisson(lam))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class BoundedBox:
    """Axis-aligned box ``[lower_1, upper_1] x ... x [lower_D, upper_D]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box has lower > upper in some dimension")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def sides(self) -> np.ndarray:
        return self.upper - self.lower

    def contains_box(self, other: "BoundedBox", tol: float = 0.0) -> bool:
        return bool(
            np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol)
        )

    def contains_point(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def intersect(self, other: "BoundedBox") -> Optional["BoundedBox"]:
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(lo > hi):
            return None
        return BoundedBox(lo, hi)

    def split(self, d: int, loc: float) -> tuple["BoundedBox", "BoundedBox"]:
        left_hi = self.upper.copy()
        left_hi[d] = loc
        right_lo = self.lower.copy()
        right_lo[d] = loc
        return BoundedBox(self.lower, left_hi), BoundedBox(right_lo, self.upper)

    def clamp(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def __eq__(self, other):
        if not isinstance(other, BoundedBox):
            return NotImplemented
        return bool(np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper))

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def to_dict(self) -> dict:
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundedBox":
        return cls(np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float))


def linear_dimension(box: BoundedBox) -> float:
    """Sum of the side lengths of ``box``."""
    return float(np.sum(box.upper - box.lower))


def data_box(X, padding: float = 1e-9) -> BoundedBox:
    """Bounding box of the rows of ``X``, widened by a relative ``padding`` per side.

    The pad on dimension ``d`` is ``padding * max(width_d, |lower_d|, |upper_d|, 1)``
    so constant columns still get a (tiny) positive width.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D array of points")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    scale = np.maximum.reduce([hi - lo, np.abs(lo), np.abs(hi), np.ones_like(lo)])
    pad = padding * scale
    return BoundedBox(lo - pad, hi + pad)


def exp_from_uniform(u: float, rate: float) -> float:
    """Inverse-CDF transform of ``u`` in (0, 1] to an Exp(rate) draw."""
    if not rate > 0 or not math.isfinite(rate):
        raise InvalidRateError(f"rate must be positive and finite, got {rate}")
    if not 0.0 < u <= 1.0:
        raise ValueError("u must lie in (0, 1]")
    return -math.log(u) / rate


def sample_exp(rate: float, rng: RngStream) -> float:
    """Exp(rate) draw, ``-ln(U) / rate`` with ``U`` uniform on (0, 1]."""
    if not rate > 0 or not math.isfinite(rate):
        raise InvalidRateError(f"rate must be positive and finite, got {rate}")
    return exp_from_uniform(rng.uniform_open_closed(), rate)


def _choose_dim(weights: np.ndarray, total: float, u: float) -> int:
    # cumulative scan in ascending index order; first bucket exceeding u*total wins
    target = u * total
    acc = 0.0
    last_positive = -1
    for d, w in enumerate(weights):
        if w <= 0.0:
            continue
        last_positive = d
        acc += w
        if acc > target:
            return d
    return last_positive


def sample_first_cut(box: BoundedBox, rng: RngStream) -> tuple[float, int, float]:
    """Waiting time, dimension and location of the first cut in ``box``."""
    sides = box.sides
    ld = float(np.sum(sides))
    if ld <= 0.0:
        raise DegenerateBoxError("box has zero linear dimension")
    delta_t = sample_exp(ld, rng)
    d = _choose_dim(sides, ld, rng.generator.random())
    loc = _interior_uniform(box.lower[d], box.upper[d], rng)
    return delta_t, d, loc


def _interior_uniform(a: float, b: float, rng: RngStream) -> float:
    # reject the endpoints so the cut lies strictly inside (a, b)
    for _ in range(64):
        x = rng.uniform(a, b)
        if a < x < b:
            return x
    raise DegenerateBoxError(f"cannot place a cut strictly inside ({a}, {b})")


@dataclass
class MondrianNode:
    id: int
    box: BoundedBox
    birth_time: float
    cut_time: Optional[float] = None
    cut_dim: Optional[int] = None
    cut_loc: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    parent: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.cut_time is None


@dataclass
class MondrianTree:
    nodes: list[MondrianNode]
    lifetime: float
    root: int = 0

    @property
    def box(self) -> BoundedBox:
        return self.nodes[self.root].box

    @property
    def num_cuts(self) -> int:
        return sum(1 for n in self.nodes if not n.is_leaf)

    def internal_nodes(self) -> list[MondrianNode]:
        return [n for n in self.nodes if not n.is_leaf]

    def leaves(self, lifetime: Optional[float] = None) -> list[int]:
        """Leaf ids of the partition formed by cuts with time ``<= lifetime``."""
        out = []
        stack = [self.root]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf or (lifetime is not None and n.cut_time > lifetime):
                out.append(n.id)
            else:
                stack.append(n.right)
                stack.append(n.left)
        return out

    def cut_times(self) -> list[float]:
        return sorted(n.cut_time for n in self.nodes if not n.is_leaf)

    def cut_locations(self, dim: Optional[int] = None) -> list[float]:
        return sorted(
            n.cut_loc for n in self.nodes if not n.is_leaf and (dim is None or n.cut_dim == dim)
        )

    def first_cut_time(self) -> Optional[float]:
        return self.nodes[self.root].cut_time

    def structurally_equal(self, other: "MondrianTree") -> bool:
        a, b = [self.root], [other.root]
        while a:
            if not b:
                return False
            n, m = self.nodes[a.pop()], other.nodes[b.pop()]
            if n.box != m.box or n.birth_time != m.birth_time:
                return False
            if n.is_leaf != m.is_leaf:
                return False
            if not n.is_leaf:
                if (n.cut_time, n.cut_dim, n.cut_loc) != (m.cut_time, m.cut_dim, m.cut_loc):
                    return False
                a += [n.left, n.right]
                b += [m.left, m.right]
        return not b

    def to_dict(self) -> dict:
        recs = []
        for n in self.nodes:
            rec = {"id": n.id, "birth": n.birth_time, "box": n.box.to_dict()}
            if not n.is_leaf:
                rec.update(
                    cut_time=n.cut_time, dim=n.cut_dim, loc=n.cut_loc, left=n.left, right=n.right
                )
            recs.append(rec)
        return {"lifetime": self.lifetime, "root": self.root, "nodes": recs}

    def to_json(self, **kwargs) -> str:
        # json emits floats via repr, which is shortest-round-trip for float64
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "MondrianTree":
        nodes = [None] * len(d["nodes"])
        for rec in d["nodes"]:
            nodes[rec["id"]] = MondrianNode(
                id=rec["id"],
                box=BoundedBox.from_dict(rec["box"]),
                birth_time=float(rec["birth"]),
                cut_time=rec.get("cut_time"),
                cut_dim=rec.get("dim"),
                cut_loc=rec.get("loc"),
                left=rec.get("left"),
                right=rec.get("right"),
            )
        for n in nodes:
            if not n.is_leaf:
                nodes[n.left].parent = n.id
                nodes[n.right].parent = n.id
        return cls(nodes=nodes, lifetime=float(d["lifetime"]), root=int(d.get("root", 0)))

    @classmethod
    def from_json(cls, s: str) -> "MondrianTree":
        return cls.from_dict(json.loads(s))


class _Builder:
    def __init__(self, lifetime: float):
        self.nodes: list[MondrianNode] = []
        self.lifetime = lifetime

    def new(self, box: BoundedBox, birth: float, parent: Optional[int]) -> MondrianNode:
        if len(self.nodes) >= MAX_NODES:
            raise TreeExplosionError(f"tree exceeded {MAX_NODES} nodes")
        node = MondrianNode(id=len(self.nodes), box=box, birth_time=birth, parent=parent)
        self.nodes.append(node)
        return node

    def set_cut(self, node: MondrianNode, t: float, d: int, x: float):
        node.cut_time, node.cut_dim, node.cut_loc = t, d, x
        lbox, rbox = node.box.split(d, x)
        left = self.new(lbox, t, node.id)
        right = self.new(rbox, t, node.id)
        node.left, node.right = left.id, right.id
        return left, right

    def grow(self, node: MondrianNode, rng: RngStream):
        """Run the unconditional generative process below a fresh leaf."""
        queue = [node]
        while queue:
            n = queue.pop()
            if linear_dimension(n.box) <= 0.0:
                continue
            dt, d, x = sample_first_cut(n.box, rng)
            t = n.birth_time + dt
            if t > self.lifetime:
                continue
            left, right = self.set_cut(n, t, d, x)
            queue.append(right)
            queue.append(left)

    def tree(self) -> MondrianTree:
        return MondrianTree(nodes=self.nodes, lifetime=self.lifetime)


def sample_mondrian(box: BoundedBox, lifetime: float, rng: RngStream) -> MondrianTree:
    """Sample MP(lifetime, box)."""
    if lifetime < 0 or not math.isfinite(lifetime):
        raise ValueError("lifetime must be finite and non-negative")
    if linear_dimension(box) <= 0.0:
        raise DegenerateBoxError("box has zero linear dimension")
    b = _Builder(float(lifetime))
    b.grow(b.new(box, 0.0, None), rng)
    return b.tree()


def sample_trees(box: BoundedBox, M: int, lifetime: float, seed: int) -> list[MondrianTree]:
    """``M`` independent trees, tree ``m`` drawn from stream ``("tree", m)``."""
    if M < 1:
        raise ValueError("need at least one tree")
    return [
        sample_mondrian(box, lifetime, RngStream.for_component(seed, "tree", m)) for m in range(M)
    ]


def cuts_1d(a: float, b: float, lifetime: float, rng: RngStream) -> list[float]:
    """Cut locations of a 1-D Mondrian on [a, b]: Poisson count, then sorted uniforms."""
    if not a < b:
        raise ValueError("need a < b")
    if lifetime < 0:
        raise ValueError("lifetime must be non-negative")
    n = rng.poisson(lifetime * (b - a))
    return sorted(float(v) for v in rng.generator.uniform(a, b, size=n))


def leaf_of(tree: MondrianTree, point, lifetime: Optional[float] = None) -> int:
    """Leaf containing ``point``; points on a cut go to the left (``<=``) child.

    With ``lifetime`` given, cuts born after it are ignored.
    """
    x = np.asarray(point, dtype=float)
    n = tree.nodes[tree.root]
    while not n.is_leaf and (lifetime is None or n.cut_time <= lifetime):
        n = tree.nodes[n.left] if x[n.cut_dim] <= n.cut_loc else tree.nodes[n.right]
    return n.id


def assign_leaves(tree: MondrianTree, X, lifetime: Optional[float] = None) -> np.ndarray:
    """Vectorised :func:`leaf_of` over the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(tree.root, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        n = tree.nodes[nid]
        if n.is_leaf or (lifetime is not None and n.cut_time > lifetime):
            out[rows] = nid
            continue
        go_left = X[rows, n.cut_dim] <= n.cut_loc
        stack.append((n.left, rows[go_left]))
        stack.append((n.right, rows[~go_left]))
    return out


def cut_schedule(trees: Sequence[MondrianTree]) -> list[tuple[float, int, int]]:
    """All cuts of all trees as ``(time, tree index, node id)``, ascending in time."""
    events = [
        (n.cut_time, m, n.id) for m, t in enumerate(trees) for n in t.nodes if not n.is_leaf
    ]
    events.sort()
    return events


def truncate(tree: MondrianTree, lifetime: float) -> MondrianTree:
    """The tree with every cut born after ``lifetime`` removed."""
    b = _Builder(float(lifetime))
    stack = [(tree.root, b.new(tree.box, tree.nodes[tree.root].birth_time, None))]
    while stack:
        src_id, dst = stack.pop()
        src = tree.nodes[src_id]
        if src.is_leaf or src.cut_time > lifetime:
            continue
        left, right = b.set_cut(dst, src.cut_time, src.cut_dim, src.cut_loc)
        stack.append((src.right, right))
        stack.append((src.left, left))
    return b.tree()


def restrict(tree: MondrianTree, sub: BoundedBox) -> MondrianTree:
    """Restriction of ``tree`` to the sub-box ``sub``.

    Cuts whose hyperplane misses the current restricted box are skipped and the
    surviving child's subtree is spliced in.  Birth and cut times are kept.
    """
    if sub.dim != tree.box.dim or not tree.box.contains_box(sub):
        raise ValueError("sub-box is not contained in the tree's box")
    b = _Builder(tree.lifetime)
    stack = [(tree.root, b.new(sub, tree.nodes[tree.root].birth_time, None))]
    while stack:
        src_id, dst = stack.pop()
        src = tree.nodes[src_id]
        while not src.is_leaf:
            d, x = src.cut_dim, src.cut_loc
            if dst.box.lower[d] < x < dst.box.upper[d]:
                break
            # a cut on the far face of a flat dimension follows the <= rule
            src = tree.nodes[src.left] if x >= dst.box.upper[d] else tree.nodes[src.right]
        if src.is_leaf:
            continue
        left, right = b.set_cut(dst, src.cut_time, src.cut_dim, src.cut_loc)
        stack.append((src.right, right))
        stack.append((src.left, left))
    return b.tree()


def _missing_segments(outer: BoundedBox, inner: BoundedBox) -> list[tuple[int, float, float]]:
    segs = []
    for d in range(outer.dim):
        if inner.lower[d] > outer.lower[d]:
            segs.append((d, outer.lower[d], inner.lower[d]))
        if outer.upper[d] > inner.upper[d]:
            segs.append((d, inner.upper[d], outer.upper[d]))
    return segs


def extend_conditional(tree: MondrianTree, target: BoundedBox, rng: RngStream) -> MondrianTree:
    """Sample a Mondrian on ``target`` conditioned on its restriction to ``tree.box``.

    At each step a clock of rate ``LD(box) - LD(conditioning box)`` competes with
    the first conditioning cut (or with the lifetime when the conditioning
    restriction is trivial).  If it rings first, a cut is placed uniformly on
    the segments that miss the conditioning box; otherwise the conditioning cut
    is extended through the whole box.
    """
    phi = tree.box
    if target.dim != phi.dim or not target.contains_box(phi):
        raise ValueError("target box must contain the tree's box")
    lifetime = tree.lifetime
    b = _Builder(lifetime)
    root = b.new(target, tree.nodes[tree.root].birth_time, None)
    # (destination node, conditioning source node id or None)
    stack: list[tuple[MondrianNode, Optional[int]]] = [(root, tree.root)]
    while stack:
        dst, src_id = stack.pop()
        if src_id is None:
            b.grow(dst, rng)
            continue
        src = tree.nodes[src_id]
        t0 = dst.birth_time
        t_phi = lifetime if src.is_leaf else src.cut_time
        gap = linear_dimension(dst.box) - linear_dimension(src.box)
        t_out = t0 + sample_exp(gap, rng) if gap > 0 else math.inf
        if t_out < t_phi:
            segs = _missing_segments(dst.box, src.box)
            lengths = np.array([s[2] - s[1] for s in segs])
            k = _choose_dim(lengths, float(lengths.sum()), rng.generator.random())
            d, a, c = segs[k]
            x = _interior_uniform(a, c, rng)
            left, right = b.set_cut(dst, t_out, d, x)
            if x <= src.box.lower[d]:
                stack.append((left, None))
                stack.append((right, src_id))
            else:
                stack.append((right, None))
                stack.append((left, src_id))
        elif not src.is_leaf:
            left, right = b.set_cut(dst, src.cut_time, src.cut_dim, src.cut_loc)
            stack.append((right, src.right))
            stack.append((left, src.left))
    return b.tree()


def iter_root_to_leaf_paths(tree: MondrianTree) -> Iterable[list[MondrianNode]]:
    stack = [[tree.nodes[tree.root]]]
    while stack:
        path = stack.pop()
        n = path[-1]
        if n.is_leaf:
            yield path
        else:
            stack.append(path + [tree.nodes[n.right]])
            stack.append(path + [tree.nodes[n.left]])
