"""Dendrograms over zones and their Metropolis optimisation.

A dendrogram over ``n`` zones stores leaves as nodes ``0..n-1`` (leaf ``i``
is ``graph.zone_ids[i]``) and internal nodes as ``n..2n-2``. Each internal
node ``r`` caches its score, the mean graph distance between the zones of
its left and right subtrees. The loss of a dendrogram is the sum of all
internal scores.

Moves are nearest-neighbour interchanges around a non-root internal node
``r`` with parent ``w``. Writing ``A, B`` for the children of ``r`` and
``C`` for the sibling of ``r`` under ``w``:

- ``alpha`` regroups to ``w = ((A, C), B)``
- ``beta``  regroups to ``w = ((B, C), A)``

Node ``r`` keeps its slot under ``w`` and the root never changes identity,
so only the scores of ``r`` and ``w`` have to be recomputed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from sgfusion.errors import ConfigError, DomainError, NumericError, SchemaError
from sgfusion.label_stats import ZoneDistanceGraph

# Block sums with more cells than this go through numpy instead of a Python loop.
_NUMPY_BLOCK_CELLS = 64
_RNG_BATCH = 8192
_FORBIDDEN_ID_CHARS = set("(),:|\n\t ")


class TransitionKind(str, Enum):
    ALPHA = "alpha"
    BETA = "beta"


@dataclass(frozen=True)
class McmcConfig:
    max_steps: int = 200_000
    convergence_window: int = 5_000
    convergence_tol: float = 1e-9
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not 1 <= self.convergence_window <= self.max_steps:
            raise ConfigError("convergence_window must lie in [1, max_steps]")
        if self.convergence_tol < 0:
            raise ConfigError("convergence_tol must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


class Dendrogram:
    """Rooted binary tree over the zones of a distance graph.

    Instances returned by the public functions of this module are never
    mutated afterwards; the in-place moves are reserved for
    :class:`MetropolisChain`, which works on its own private copy.
    """

    __slots__ = ("zone_ids", "graph", "_D", "_Dnp", "left", "right", "parent", "leaves", "scores", "root")

    def __init__(
        self,
        zone_ids: Sequence[str],
        left: Sequence[int],
        right: Sequence[int],
        parent: Sequence[int],
        graph: ZoneDistanceGraph | None = None,
        scores: Sequence[float] | None = None,
    ):
        n = len(zone_ids)
        if n < 2:
            raise DomainError("a dendrogram needs at least two zones")
        if graph is not None and tuple(graph.zone_ids) != tuple(zone_ids):
            raise SchemaError("dendrogram zone ids do not match the graph")
        self.zone_ids = tuple(zone_ids)
        self.graph = graph
        self._Dnp = graph.distances if graph is not None else None
        self._D = graph.distances.tolist() if graph is not None else None
        self.left = list(left)
        self.right = list(right)
        self.parent = list(parent)
        roots = [v for v in range(n, 2 * n - 1) if self.parent[v] == -1]
        if len(roots) != 1:
            raise SchemaError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        self.leaves: list[list[int]] = [[] for _ in range(2 * n - 1)]
        self._fill_leaves(self.root)
        if scores is not None:
            self.scores = [float(s) for s in scores]
        elif graph is not None:
            self.scores = [0.0] * (2 * n - 1)
            for r in self.internal_nodes():
                self.scores[r] = self._node_score(r)
        else:
            raise SchemaError("either a graph or explicit scores are required")

    # -- structure ---------------------------------------------------------

    def _fill_leaves(self, root: int) -> None:
        n = self.n_zones
        order = []
        stack = [root]
        while stack:
            v = stack.pop()
            order.append(v)
            if v >= n:
                stack.append(self.left[v])
                stack.append(self.right[v])
        for v in reversed(order):
            if v < n:
                self.leaves[v] = [v]
            else:
                self.leaves[v] = sorted(self.leaves[self.left[v]] + self.leaves[self.right[v]])

    @property
    def n_zones(self) -> int:
        return len(self.zone_ids)

    def internal_nodes(self) -> range:
        return range(self.n_zones, 2 * self.n_zones - 1)

    def nonroot_internal_nodes(self) -> list[int]:
        return [r for r in self.internal_nodes() if r != self.root]

    def is_leaf(self, v: int) -> bool:
        return v < self.n_zones

    def children(self, r: int) -> tuple[int, int]:
        return self.left[r], self.right[r]

    def sibling(self, v: int) -> int:
        w = self.parent[v]
        return self.right[w] if self.left[w] == v else self.left[w]

    def n_left(self, r: int) -> int:
        return len(self.leaves[self.left[r]])

    def n_right(self, r: int) -> int:
        return len(self.leaves[self.right[r]])

    def leaf_index(self, zone_id: str) -> int:
        try:
            return self.zone_ids.index(zone_id)
        except ValueError:
            raise KeyError(f"zone {zone_id!r} is not a leaf of this dendrogram") from None

    def ancestors(self, leaf: int) -> list[int]:
        """Internal ancestors of ``leaf`` from its parent up to the root."""
        out = []
        v = self.parent[leaf]
        while v != -1:
            out.append(v)
            v = self.parent[v]
        return out

    def zones_under(self, v: int) -> tuple[str, ...]:
        return tuple(self.zone_ids[i] for i in self.leaves[v])

    def clusters(self) -> frozenset[tuple[int, ...]]:
        """Leaf sets of all internal nodes; identifies the unordered shape."""
        return frozenset(tuple(self.leaves[r]) for r in self.internal_nodes())

    def score(self, r: int) -> float:
        return self.scores[r]

    def loss(self) -> float:
        return math.fsum(self.scores[r] for r in self.internal_nodes())

    def copy(self) -> "Dendrogram":
        new = object.__new__(Dendrogram)
        new.zone_ids = self.zone_ids
        new.graph = self.graph
        new._D = self._D
        new._Dnp = self._Dnp
        new.left = self.left[:]
        new.right = self.right[:]
        new.parent = self.parent[:]
        new.leaves = [lv[:] for lv in self.leaves]
        new.scores = self.scores[:]
        new.root = self.root
        return new

    def with_graph(self, graph: ZoneDistanceGraph) -> "Dendrogram":
        """Same shape, scores recomputed against ``graph``."""
        return Dendrogram(self.zone_ids, self.left, self.right, self.parent, graph=graph)

    # -- scores ------------------------------------------------------------

    def _block_sum(self, P: list[int], Q: list[int]) -> float:
        if len(P) * len(Q) > _NUMPY_BLOCK_CELLS:
            return float(self._Dnp[np.ix_(P, Q)].sum())
        D = self._D
        total = 0.0
        for p in P:
            row = D[p]
            for q in Q:
                total += row[q]
        return total

    def _node_score(self, r: int) -> float:
        L = self.leaves[self.left[r]]
        R = self.leaves[self.right[r]]
        return self._block_sum(L, R) / (len(L) * len(R))

    # -- moves -------------------------------------------------------------

    def _move_parts(self, r: int, kind: TransitionKind) -> tuple[int, int, int, int]:
        w = self.parent[r]
        if w == -1 or r < self.n_zones:
            raise DomainError(f"node {r} is not a non-root internal node")
        C = self.sibling(r)
        A, B = self.left[r], self.right[r]
        X, Y = (A, B) if kind is TransitionKind.ALPHA else (B, A)
        return w, X, Y, C

    def _move_scores(self, r: int, kind: TransitionKind) -> tuple[float, float]:
        """Scores ``r`` and its parent would carry after the move."""
        _, X, Y, C = self._move_parts(r, kind)
        LX, LY, LC = self.leaves[X], self.leaves[Y], self.leaves[C]
        nX, nY, nC = len(LX), len(LY), len(LC)
        s_xc = self._block_sum(LX, LC)
        s_xy = self._block_sum(LX, LY)
        s_yc = self._block_sum(LY, LC)
        return s_xc / (nX * nC), (s_xy + s_yc) / ((nX + nC) * nY)

    def _apply_move(self, r: int, kind: TransitionKind, new_r: float, new_w: float) -> None:
        w, X, Y, C = self._move_parts(r, kind)
        # r keeps its slot under w; Y takes the slot C occupied
        if self.left[w] == C:
            self.left[w] = Y
        else:
            self.right[w] = Y
        self.left[r], self.right[r] = X, C
        self.parent[Y] = w
        self.parent[C] = r
        self.leaves[r] = sorted(self.leaves[X] + self.leaves[C])
        self.scores[r] = new_r
        self.scores[w] = new_w

    # -- validation ----------------------------------------------------------

    def validate(self, graph: ZoneDistanceGraph | None = None, tol: float = 1e-10) -> None:
        """Raise ``SchemaError`` if any structural or score invariant fails."""
        n = self.n_zones
        graph = graph if graph is not None else self.graph
        if len(set(self.zone_ids)) != n:
            raise SchemaError("duplicate zone ids")
        if not (len(self.left) == len(self.right) == len(self.parent) == 2 * n - 1):
            raise SchemaError("node arrays must have 2n-1 entries")
        for v in range(n):
            if self.left[v] != -1 or self.right[v] != -1:
                raise SchemaError(f"leaf {v} has children")
        seen_as_child = [0] * (2 * n - 1)
        for r in self.internal_nodes():
            for c in (self.left[r], self.right[r]):
                if not 0 <= c < 2 * n - 1 or c == r:
                    raise SchemaError(f"internal node {r} has invalid child {c}")
                if self.parent[c] != r:
                    raise SchemaError(f"parent link of {c} does not point to {r}")
                seen_as_child[c] += 1
        for v in range(2 * n - 1):
            expected = 0 if v == self.root else 1
            if seen_as_child[v] != expected:
                raise SchemaError(f"node {v} appears {seen_as_child[v]} times as a child")
        # connectivity and acyclicity: every node reaches the root within 2n-1 hops
        for v in range(2 * n - 1):
            u, hops = v, 0
            while self.parent[u] != -1:
                u = self.parent[u]
                hops += 1
                if hops > 2 * n:
                    raise SchemaError("cycle detected")
            if u != self.root:
                raise SchemaError(f"node {v} is not connected to the root")
        fresh = [[] for _ in range(2 * n - 1)]
        for v in _postorder(self, self.root):
            fresh[v] = [v] if v < n else sorted(fresh[self.left[v]] + fresh[self.right[v]])
        if fresh != self.leaves:
            raise SchemaError("cached subtree leaf sets are stale")
        if self.n_left(self.root) + self.n_right(self.root) != n:
            raise SchemaError("root does not cover every zone")
        if graph is not None:
            if tuple(graph.zone_ids) != self.zone_ids:
                raise SchemaError("graph zone ids do not match")
            D = graph.distances
            for r in self.internal_nodes():
                L, R = self.leaves[self.left[r]], self.leaves[self.right[r]]
                expected = float(D[np.ix_(L, R)].sum()) / (len(L) * len(R))
                if abs(expected - self.scores[r]) > tol * max(1.0, abs(expected)):
                    raise SchemaError(
                        f"score of node {r} is {self.scores[r]!r}, expected {expected!r}"
                    )
        for r in self.internal_nodes():
            if not (self.scores[r] >= 0 and math.isfinite(self.scores[r])):
                raise SchemaError(f"score of node {r} must be finite and non-negative")

    # -- text format ---------------------------------------------------------

    def to_text(self, annotate=None) -> str:
        """Nested ``(left,right):score`` text; leaves are written as zone ids."""
        fmt = annotate if annotate is not None else (lambda r: repr(self.scores[r]))
        parts: dict[int, str] = {}
        for v in _postorder(self, self.root):
            if v < self.n_zones:
                parts[v] = self.zone_ids[v]
            else:
                parts[v] = f"({parts[self.left[v]]},{parts[self.right[v]]}):{fmt(v)}"
        return parts[self.root]

    def __str__(self) -> str:
        return self.to_text()

    def __repr__(self) -> str:
        return f"Dendrogram({self.to_text()!r})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dendrogram):
            return NotImplemented
        return self.to_text() == other.to_text()

    def __hash__(self) -> int:
        return hash(self.to_text())


def _postorder(t: Dendrogram, root: int) -> list[int]:
    out = []
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done or v < t.n_zones:
            out.append(v)
            continue
        stack.append((v, True))
        stack.append((t.right[v], False))
        stack.append((t.left[v], False))
    return out


# --- parsing ------------------------------------------------------------------

_TOKEN = re.compile(r"\(|\)|,|:[^,()]*|[^,():]+")


def parse_annotated(text: str) -> tuple[list[str], list[int], list[int], list[int], dict[int, str]]:
    """Parse the nested text format.

    Returns leaf ids in order of appearance, child/parent arrays with
    internal nodes numbered in post-order, and the raw annotation string of
    every internal node.
    """
    tokens = _TOKEN.findall(text.strip())
    if "".join(tokens) != text.strip():
        raise SchemaError("unparseable dendrogram text")
    pos = 0
    leaves: list[str] = []
    internal: list[tuple[object, object, str]] = []

    def node():
        nonlocal pos
        if pos >= len(tokens):
            raise SchemaError("unexpected end of dendrogram text")
        tok = tokens[pos]
        if tok == "(":
            pos += 1
            a = node()
            if pos >= len(tokens) or tokens[pos] != ",":
                raise SchemaError("expected ',' in dendrogram text")
            pos += 1
            b = node()
            if pos >= len(tokens) or tokens[pos] != ")":
                raise SchemaError("expected ')' in dendrogram text")
            pos += 1
            annot = ""
            if pos < len(tokens) and tokens[pos].startswith(":"):
                annot = tokens[pos][1:]
                pos += 1
            internal.append((a, b, annot))
            return ("i", len(internal) - 1)
        if tok in (",", ")") or tok.startswith(":"):
            raise SchemaError(f"unexpected token {tok!r}")
        pos += 1
        leaves.append(tok.strip())
        return ("l", len(leaves) - 1)

    root = node()
    if pos != len(tokens):
        raise SchemaError("trailing characters after dendrogram")
    if root[0] != "i":
        raise SchemaError("a dendrogram needs at least two zones")
    n = len(leaves)
    if len(set(leaves)) != n:
        raise SchemaError("duplicate zone ids in dendrogram")
    left = [-1] * (2 * n - 1)
    right = [-1] * (2 * n - 1)
    parent = [-1] * (2 * n - 1)
    annots: dict[int, str] = {}

    def nid(ref) -> int:
        kind, k = ref
        return k if kind == "l" else n + k

    for k, (a, b, annot) in enumerate(internal):
        r = n + k
        left[r], right[r] = nid(a), nid(b)
        parent[left[r]] = r
        parent[right[r]] = r
        annots[r] = annot
    return leaves, left, right, parent, annots


def _remap(leaves, left, right, parent, order: Sequence[str]):
    """Renumber leaves so leaf ``i`` is ``order[i]``."""
    if sorted(order) != sorted(leaves):
        raise SchemaError("dendrogram leaves do not match the zone ids")
    n = len(leaves)
    pos = {z: i for i, z in enumerate(order)}
    m = {i: pos[z] for i, z in enumerate(leaves)}
    m.update({v: v for v in range(n, 2 * n - 1)})
    m[-1] = -1
    size = 2 * n - 1
    nl, nr, np_ = [-1] * size, [-1] * size, [-1] * size
    for v in range(size):
        nl[m[v]] = m[left[v]]
        nr[m[v]] = m[right[v]]
        np_[m[v]] = m[parent[v]]
    return list(order), nl, nr, np_


def from_text(text: str, graph: ZoneDistanceGraph | None = None) -> Dendrogram:
    """Inverse of :meth:`Dendrogram.to_text`.

    With a graph, leaves are numbered in graph order; otherwise in order of
    appearance. Scores are taken from the annotations as written; a tree
    without annotations needs a graph and is scored against it.
    """
    leaves, left, right, parent, annots = parse_annotated(text)
    bare = all(a == "" for a in annots.values())
    if graph is not None:
        leaves, left, right, parent = _remap(leaves, left, right, parent, graph.zone_ids)
    if bare:
        if graph is None:
            raise SchemaError("an unannotated dendrogram needs a distance graph")
        return Dendrogram(leaves, left, right, parent, graph=graph)
    try:
        scores = [0.0] * len(left)
        for r, a in annots.items():
            scores[r] = float(a.split("|")[0])
    except ValueError as exc:
        raise SchemaError(f"bad score annotation: {exc}") from None
    d = Dendrogram(leaves, left, right, parent, scores=scores)
    if graph is not None:
        d.graph = graph
        d._Dnp = graph.distances
        d._D = graph.distances.tolist()
    return d


# --- operations ---------------------------------------------------------------


def _check_zone_ids(ids: Sequence[str]) -> None:
    for z in ids:
        if not z or _FORBIDDEN_ID_CHARS & set(z):
            raise ConfigError(f"zone id {z!r} must be non-empty and free of '(),:|' and whitespace")


def random_dendrogram(graph: ZoneDistanceGraph, rng: np.random.Generator) -> Dendrogram:
    """Uniformly random leaf-labelled rooted binary tree over the graph's zones.

    Leaves are inserted one at a time above a uniformly chosen existing node
    (including above the root), which gives each of the ``(2n-3)!!`` shapes
    equal probability.
    """
    n = len(graph.zone_ids)
    if n < 2:
        raise DomainError("a dendrogram needs at least two zones")
    _check_zone_ids(graph.zone_ids)
    size = 2 * n - 1
    left, right, parent = [-1] * size, [-1] * size, [-1] * size
    left[n], right[n] = 0, 1
    parent[0] = parent[1] = n
    next_id = n + 1
    for k in range(2, n):
        existing = list(range(k)) + list(range(n, next_id))
        v = existing[int(rng.integers(len(existing)))]
        new = next_id
        next_id += 1
        p = parent[v]
        parent[new] = p
        if p != -1:
            if left[p] == v:
                left[p] = new
            else:
                right[p] = new
        left[new], right[new] = v, k
        parent[v] = parent[k] = new
    return Dendrogram(graph.zone_ids, left, right, parent, graph=graph)


def score_node(t: Dendrogram, r: int, graph: ZoneDistanceGraph) -> float:
    """Mean distance between zones of the two subtrees of internal node ``r``."""
    if t.is_leaf(r):
        raise DomainError(f"node {r} is a leaf")
    L = t.leaves[t.left[r]]
    R = t.leaves[t.right[r]]
    return float(graph.distances[np.ix_(L, R)].sum()) / (len(L) * len(R))


def loss(t: Dendrogram) -> float:
    return t.loss()


def transition(t: Dendrogram, r: int, kind: TransitionKind | str) -> Dendrogram:
    """Apply one move to a copy of ``t``; ``t`` itself is unchanged."""
    kind = TransitionKind(kind)
    new_r, new_w = t._move_scores(r, kind)
    out = t.copy()
    out._apply_move(r, kind, new_r, new_w)
    return out


def propose(t: Dendrogram, rng: np.random.Generator) -> tuple[Dendrogram, int]:
    """Pick a non-root internal node and a move kind uniformly; return the candidate."""
    if t.n_zones < 3:
        raise DomainError("proposals need at least three zones")
    nodes = t.nonroot_internal_nodes()
    r = nodes[int(rng.integers(len(nodes)))]
    kind = TransitionKind.ALPHA if rng.integers(2) == 0 else TransitionKind.BETA
    return transition(t, r, kind), r


def accept_prob(loss_old: float, loss_new: float, temperature: float = 1.0) -> float:
    if not (math.isfinite(loss_old) and math.isfinite(loss_new)):
        raise NumericError(f"non-finite loss: {loss_old!r} -> {loss_new!r}")
    delta = loss_new - loss_old
    if delta <= 0:
        return 1.0
    return math.exp(-delta / temperature)


class MetropolisChain:
    """Metropolis sampler over dendrogram shapes, targeting ``exp(-loss/T)``.

    Works in place on a private copy of the starting dendrogram. Random
    numbers are drawn in batches, so a chain is reproducible given the
    generator state it was started with.
    """

    def __init__(self, start: Dendrogram, rng: np.random.Generator, temperature: float = 1.0):
        if start.n_zones < 3:
            raise DomainError("a chain needs at least three zones")
        if start.graph is None:
            raise SchemaError("the chain needs a dendrogram bound to a distance graph")
        self.state = start.copy()
        self.rng = rng
        self.temperature = float(temperature)
        self.loss = self.state.loss()
        self.steps = 0
        self.accepted = 0
        self._nodes = self.state.nonroot_internal_nodes()
        self._buf_pos = _RNG_BATCH
        self._idx = self._kind = self._u = None

    def _refill(self) -> None:
        self._idx = self.rng.integers(0, len(self._nodes), size=_RNG_BATCH).tolist()
        self._kind = self.rng.integers(0, 2, size=_RNG_BATCH).tolist()
        self._u = self.rng.random(size=_RNG_BATCH).tolist()
        self._buf_pos = 0

    def step(self) -> bool:
        if self._buf_pos == _RNG_BATCH:
            self._refill()
        k = self._buf_pos
        self._buf_pos += 1
        self.steps += 1
        t = self.state
        r = self._nodes[self._idx[k]]
        kind = TransitionKind.ALPHA if self._kind[k] == 0 else TransitionKind.BETA
        w = t.parent[r]
        new_r, new_w = t._move_scores(r, kind)
        delta = (new_r + new_w) - (t.scores[r] + t.scores[w])
        if delta > 0 and self._u[k] >= math.exp(-delta / self.temperature):
            return False
        t._apply_move(r, kind, new_r, new_w)
        self.loss += delta
        self.accepted += 1
        return True

    def run(self, n_steps: int) -> None:
        for _ in range(n_steps):
            self.step()

    def visit_counts(self, n_steps: int) -> dict[frozenset, int]:
        """Run ``n_steps`` and count, per shape, the steps that ended in it."""
        counts: dict[frozenset, int] = {}
        key = self.state.clusters()
        dwell = 0
        for _ in range(n_steps):
            if self.step():
                counts[key] = counts.get(key, 0) + dwell
                key = self.state.clusters()
                dwell = 0
            dwell += 1
        counts[key] = counts.get(key, 0) + dwell
        return counts


@dataclass(frozen=True)
class McmcResult:
    dendrogram: Dendrogram
    best_loss: float
    initial_loss: float
    steps: int
    accepted: int
    converged: bool

    @property
    def hit_max_steps(self) -> bool:
        return not self.converged

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps if self.steps else 0.0


def optimize(graph: ZoneDistanceGraph, cfg: McmcConfig, rng: np.random.Generator | None = None) -> McmcResult:
    """Minimise the dendrogram loss with a Metropolis chain.

    Returns the best dendrogram visited. The chain stops once the best loss
    has not improved by more than ``convergence_tol`` for
    ``convergence_window`` consecutive steps, or after ``max_steps``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    start = random_dendrogram(graph, rng)
    initial = start.loss()
    if start.n_zones < 3:
        return McmcResult(start, initial, initial, 0, 0, True)
    chain = MetropolisChain(start, rng, cfg.temperature)
    best = chain.state.copy()
    best_loss = chain.loss
    anchor = best_loss
    since = 0
    converged = False
    for _ in range(cfg.max_steps):
        if chain.step() and chain.loss < best_loss:
            best = chain.state.copy()
            best_loss = chain.loss
        if best_loss < anchor - cfg.convergence_tol:
            anchor = best_loss
            since = 0
        else:
            since += 1
            if since >= cfg.convergence_window:
                converged = True
                break
    return McmcResult(best, best.loss(), initial, chain.steps, chain.accepted, converged)


def iter_shapes(t: Dendrogram) -> Iterator[tuple[int, TransitionKind, Dendrogram]]:
    """Every candidate reachable from ``t`` in one proposal."""
    for r in t.nonroot_internal_nodes():
        for kind in TransitionKind:
            yield r, kind, transition(t, r, kind)
