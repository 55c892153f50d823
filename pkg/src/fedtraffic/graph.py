"""Client road-network graph: loading, validation, propagation operators.

The graph file is a plain-text CSV with a metadata first line::

    # nodes=N
    src,dst,weight
    0,1,1.0
    ...

Node ids are dense integers in [0, N), weights are nonnegative reals.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

ROW_NORMALIZED = "row"
SYM_NORMALIZED = "sym"
OPERATOR_KINDS = (ROW_NORMALIZED, SYM_NORMALIZED)


@dataclass(frozen=True)
class SensorGraph:
    """Weighted directed graph over the client/sensor network.

    Immutable after construction; safe to share across threads.
    """

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    symmetrized: bool = False

    def adjacency(self) -> np.ndarray:
        """Dense weighted adjacency matrix (float64, no self-loops added)."""
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        for src, dst, w in self.edges:
            a[src, dst] = w
        return a

    def neighbor_sets(self) -> list[set[int]]:
        """Undirected neighbour sets, ignoring weights and self-loops."""
        nbrs: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for src, dst, _ in self.edges:
            if src != dst:
                nbrs[src].add(dst)
                nbrs[dst].add(src)
        return nbrs


@dataclass(frozen=True)
class PropagationMatrix:
    """Dense normalized propagation operator built from a SensorGraph."""

    kind: str
    n_nodes: int
    matrix: np.ndarray


def _validate_edges(n_nodes: int, edges: list[tuple[int, int, float]]) -> None:
    seen: set[tuple[int, int]] = set()
    for src, dst, w in edges:
        if not (0 <= src < n_nodes) or not (0 <= dst < n_nodes):
            raise ValidationError(
                f"edge ({src},{dst}) references a node outside [0, {n_nodes})"
            )
        if w < 0:
            raise ValidationError(f"edge ({src},{dst}) has negative weight {w}")
        if (src, dst) in seen:
            raise ValidationError(f"duplicate edge ({src},{dst})")
        seen.add((src, dst))


def make_graph(
    n_nodes: int,
    edges: list[tuple[int, int, float]],
    symmetrize: bool = False,
    binarize_threshold: float | None = None,
) -> SensorGraph:
    """Validate an edge list and build a SensorGraph.

    Binarization runs first (weights >= threshold become 1, the rest are
    dropped), then symmetric closure with weight max(w_ij, w_ji).
    """
    if n_nodes < 1:
        raise ValidationError(f"graph must have at least one node, got {n_nodes}")
    _validate_edges(n_nodes, edges)

    if binarize_threshold is not None:
        edges = [(s, d, 1.0) for s, d, w in edges if w >= binarize_threshold]

    if symmetrize:
        weights: dict[tuple[int, int], float] = {}
        for s, d, w in edges:
            a, b = (s, d) if s <= d else (d, s)
            weights[(a, b)] = max(weights.get((a, b), 0.0), w)
        closed: list[tuple[int, int, float]] = []
        for (a, b), w in sorted(weights.items()):
            closed.append((a, b, w))
            if a != b:
                closed.append((b, a, w))
        edges = closed

    edges = sorted(edges)
    return SensorGraph(n_nodes=n_nodes, edges=tuple(edges), symmetrized=symmetrize)


def load_graph(
    path,
    symmetrize: bool = True,
    binarize_threshold: float | None = None,
) -> SensorGraph:
    """Load and validate an edge-list CSV (format documented in the module)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read graph file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise ParseError(f"{path}:1: expected metadata line '# nodes=N'")
    meta = lines[0].lstrip("#").strip()
    fields = dict(
        item.split("=", 1) for item in meta.split() if "=" in item
    )
    if "nodes" not in fields:
        raise ParseError(f"{path}:1: metadata line missing 'nodes=N'")
    try:
        n_nodes = int(fields["nodes"])
    except ValueError:
        raise ParseError(f"{path}:1: nodes count {fields['nodes']!r} is not an integer")

    if len(lines) < 2 or lines[1].strip() != "src,dst,weight":
        raise ParseError(f"{path}:2: expected header 'src,dst,weight'")

    edges: list[tuple[int, int, float]] = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            src, dst, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}")
        edges.append((src, dst, w))

    return make_graph(
        n_nodes, edges, symmetrize=symmetrize, binarize_threshold=binarize_threshold
    )


def save_graph(g: SensorGraph, path) -> None:
    """Write a SensorGraph in the edge-list CSV format (deterministic bytes)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={g.n_nodes}\n")
        fh.write("src,dst,weight\n")
        for src, dst, w in g.edges:
            fh.write(f"{src},{dst},{w!r}\n")


def build_operator(g: SensorGraph, kind: str) -> PropagationMatrix:
    """Self-loop augmented, degree-normalized propagation operator.

    Adds unit self-loops to the adjacency, computes row-sum degrees, and
    returns either the row-normalized or the symmetrically normalized
    operator. Self-loops force every degree >= 1, so no division can fail.
    """
    if kind not in OPERATOR_KINDS:
        raise ConfigError(f"unknown operator kind {kind!r}; expected one of {OPERATOR_KINDS}")
    a_tilde = g.adjacency()
    np.fill_diagonal(a_tilde, a_tilde.diagonal() + 1.0)
    deg = a_tilde.sum(axis=1)
    if kind == ROW_NORMALIZED:
        mat = a_tilde / deg[:, None]
    else:
        d_inv_sqrt = 1.0 / np.sqrt(deg)
        mat = a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    return PropagationMatrix(kind=kind, n_nodes=g.n_nodes, matrix=mat)


def is_connected(g: SensorGraph) -> bool:
    """True iff the undirected version of the graph has one component (BFS)."""
    if g.n_nodes == 0:
        return False
    nbrs = g.neighbor_sets()
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == g.n_nodes


def ring_graph(n: int) -> SensorGraph:
    """Ring over n nodes, unit weights, both directions."""
    if n < 2:
        raise ConfigError("ring graph needs at least 2 nodes")
    edges = []
    for i in range(n):
        j = (i + 1) % n
        edges.append((i, j, 1.0))
        edges.append((j, i, 1.0))
    return make_graph(n, sorted(set(edges)), symmetrize=True)


def grid_graph(n: int) -> SensorGraph:
    """Rectangular grid laid out in rows of width ceil(sqrt(n))."""
    if n < 2:
        raise ConfigError("grid graph needs at least 2 nodes")
    width = int(np.ceil(np.sqrt(n)))
    edges = []
    for i in range(n):
        right = i + 1
        down = i + width
        if right < n and right % width != 0:
            edges.append((i, right, 1.0))
            edges.append((right, i, 1.0))
        if down < n:
            edges.append((i, down, 1.0))
            edges.append((down, i, 1.0))
    return make_graph(n, edges, symmetrize=True)


def er_graph(n: int, p: float, seed: int) -> SensorGraph:
    """Erdos-Renyi G(n, p); isolated nodes get one ring fallback edge."""
    if n < 2:
        raise ConfigError("ER graph needs at least 2 nodes")
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"edge probability must lie in [0,1], got {p}")
    rng = np.random.default_rng(seed)
    edges = []
    degree = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j, 1.0))
                edges.append((j, i, 1.0))
                degree[i] += 1
                degree[j] += 1
    for i in range(n):
        if degree[i] == 0:
            j = (i + 1) % n
            edges.append((i, j, 1.0))
            edges.append((j, i, 1.0))
            degree[i] += 1
            degree[j] += 1
    return make_graph(n, sorted(set(edges)), symmetrize=True)


GRAPH_BUILDERS = {"ring": ring_graph, "grid": grid_graph}
