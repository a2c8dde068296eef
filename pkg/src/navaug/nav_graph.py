"""Navigation graph and occupancy-grid geometry primitives."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

UNREACHABLE = math.inf

# Two float path lengths closer than this are treated as a tie.
TIE_TOL = 1e-9

_SQRT2 = math.sqrt(2.0)


class DisconnectedGraphError(ValueError):
    """Raised when an operation needs a connected graph and gets several components."""

    def __init__(self, components: Sequence[Sequence[int]]):
        self.components = [sorted(c) for c in components]
        shown = "; ".join(str(c[:8]) + ("..." if len(c) > 8 else "") for c in self.components)
        super().__init__(f"graph has {len(self.components)} components: {shown}")


@dataclass(frozen=True)
class PanoNode:
    id: int
    position: tuple[float, float, float]

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"pano {self.id}: position must be 3 finite floats, got {self.position!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "id", int(self.id))


def _key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


class NavGraph:
    """Undirected navigation graph over panos.

    Edge lengths are always the euclidean distance between endpoint
    positions; they are derived here and never taken from the caller.
    Instances are treated as immutable once built.
    """

    def __init__(self, nodes: Iterable[PanoNode], edges: Iterable[tuple[int, int]] = ()):
        nodes = sorted(nodes, key=lambda n: n.id)
        self._nodes: dict[int, PanoNode] = {}
        for n in nodes:
            if n.id in self._nodes:
                raise ValueError(f"duplicate pano id {n.id}")
            self._nodes[n.id] = n
        lengths: dict[tuple[int, int], float] = {}
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if i not in self._nodes or j not in self._nodes:
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            lengths[_key(i, j)] = math.dist(self._nodes[i].position, self._nodes[j].position)
        self._lengths = dict(sorted(lengths.items()))
        adj: dict[int, list[int]] = {i: [] for i in self._nodes}
        for i, j in self._lengths:
            adj[i].append(j)
            adj[j].append(i)
        self._adj = {i: tuple(sorted(v)) for i, v in adj.items()}

    # -- basic accessors -------------------------------------------------
    @property
    def nodes(self) -> list[PanoNode]:
        return list(self._nodes.values())

    @property
    def node_ids(self) -> list[int]:
        return list(self._nodes)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(self._lengths)

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self._lengths)

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id) -> bool:
        return node_id in self._nodes

    def __eq__(self, other) -> bool:
        if not isinstance(other, NavGraph):
            return NotImplemented
        return self._nodes == other._nodes and self.edge_set() == other.edge_set()

    def __repr__(self) -> str:
        return f"NavGraph(n_nodes={len(self._nodes)}, n_edges={len(self._lengths)})"

    def node(self, node_id: int) -> PanoNode:
        return self._nodes[node_id]

    def position(self, node_id: int) -> np.ndarray:
        return np.asarray(self._nodes[node_id].position)

    def neighbors(self, node_id: int) -> tuple[int, ...]:
        return self._adj[node_id]

    def degree(self, node_id: int) -> int:
        return len(self._adj[node_id])

    def has_edge(self, i: int, j: int) -> bool:
        return _key(i, j) in self._lengths

    def edge_length(self, i: int, j: int) -> float:
        return self._lengths[_key(i, j)]

    def path_length(self, path: Sequence[int]) -> float:
        """Exactly rounded sum of edge lengths along ``path``; raises on a non-edge."""
        parts = []
        for a, b in zip(path[:-1], path[1:]):
            k = _key(a, b)
            if k not in self._lengths:
                raise ValueError(f"nodes {a} and {b} are not adjacent")
            parts.append(self._lengths[k])
        return math.fsum(parts)

    def with_edges(self, edges: Iterable[tuple[int, int]]) -> "NavGraph":
        return NavGraph(self._nodes.values(), edges)

    # -- cached all-pairs data -------------------------------------------
    @cached_property
    def index(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self._nodes)}

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs shortest-path lengths, rows/cols in ascending node-id order."""
        n = len(self._nodes)
        if n == 0:
            return np.zeros((0, 0))
        idx = self.index
        rows, cols, vals = [], [], []
        for (i, j), w in self._lengths.items():
            rows += [idx[i], idx[j]]
            cols += [idx[j], idx[i]]
            vals += [w, w]
        mat = csr_matrix((vals, (rows, cols)), shape=(n, n))
        dist = dijkstra(mat, directed=False)
        dist.setflags(write=False)
        return dist

    def distance(self, i: int, j: int) -> float:
        return float(self.distance_matrix[self.index[i], self.index[j]])

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "x": n.position[0], "y": n.position[1], "z": n.position[2]} for n in self.nodes],
            "edges": [[i, j] for i, j in self._lengths],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NavGraph":
        nodes = [PanoNode(d["id"], (d["x"], d["y"], d["z"])) for d in data["nodes"]]
        return cls(nodes, [tuple(e) for e in data["edges"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "NavGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ShortestPath:
    nodes: tuple[int, ...]
    length: float

    @property
    def reachable(self) -> bool:
        return math.isfinite(self.length)


def graph_shortest_path(graph: NavGraph, src: int, dst: int) -> ShortestPath:
    """Minimum-length path from ``src`` to ``dst``.

    Among equal-length paths the lexicographically smallest node sequence
    wins: walking from ``src``, the smallest-id neighbour that stays on a
    shortest path to ``dst`` is taken at every step.  An unreachable pair
    gives ``ShortestPath((), inf)``.
    """
    if src not in graph or dst not in graph:
        raise KeyError(f"node {src if src not in graph else dst} not in graph")
    if src == dst:
        return ShortestPath((src,), 0.0)
    dist = graph.distance_matrix
    idx = graph.index
    to_dst = dist[:, idx[dst]]
    if not math.isfinite(to_dst[idx[src]]):
        return ShortestPath((), UNREACHABLE)
    path = [src]
    cur = src
    while cur != dst:
        remaining = to_dst[idx[cur]]
        tol = TIE_TOL * max(1.0, remaining)
        for nb in graph.neighbors(cur):
            if graph.edge_length(cur, nb) + to_dst[idx[nb]] <= remaining + tol:
                cur = nb
                break
        else:  # pragma: no cover - guarded by the distance matrix
            raise RuntimeError("shortest-path walk stalled")
        path.append(cur)
    return ShortestPath(tuple(path), graph.path_length(path))


def connected_components(node_ids: Iterable[int], edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    parent = {n: n for n in node_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for n in parent:
        groups.setdefault(find(n), []).append(n)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def is_connected(graph: NavGraph) -> bool:
    if len(graph) <= 1:
        return True
    return len(connected_components(graph.node_ids, graph.edges)) == 1


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = dict.fromkeys(self.parent, 0)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def minimum_spanning_tree(nodes: Iterable[int], weighted_edges: Iterable[tuple[int, int, float]]) -> list[tuple[int, int]]:
    """Kruskal MST; ties broken by (weight, smaller id, larger id).

    Returns edges as sorted ``(i, j)`` pairs with ``i < j``.  Raises
    :class:`DisconnectedGraphError` if the candidate edges do not span.
    """
    nodes = sorted(set(nodes))
    cand = []
    for i, j, w in weighted_edges:
        if i == j:
            continue
        a, b = _key(int(i), int(j))
        cand.append((float(w), a, b))
    cand.sort()
    uf = _UnionFind(nodes)
    tree = []
    for w, a, b in cand:
        if uf.union(a, b):
            tree.append((a, b))
            if len(tree) == len(nodes) - 1:
                break
    if len(nodes) > 1 and len(tree) != len(nodes) - 1:
        raise DisconnectedGraphError(connected_components(nodes, [(a, b) for _, a, b in cand]))
    return sorted(tree)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """2D boolean grid, ``True`` = blocked.

    Row ``r`` / column ``c`` covers ``[origin_y + r*cell, origin_y + (r+1)*cell)``
    by ``[origin_x + c*cell, ...)``.  Geodesics run between cell centres with
    8-connected moves; diagonal moves may not cut a blocked corner.
    """

    cells: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("grid must be a non-empty 2D array")
        if not (self.cell_size > 0):
            raise ValueError("cell_size must be positive")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (self.cell_size == other.cell_size and self.origin == other.origin
                and np.array_equal(self.cells, other.cells))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def cell_of(self, point) -> tuple[int, int]:
        x, y = float(point[0]), float(point[1])
        c = math.floor((x - self.origin[0]) / self.cell_size)
        r = math.floor((y - self.origin[1]) / self.cell_size)
        rows, cols = self.shape
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"point ({x}, {y}) outside grid bounds")
        return r, c

    def cell_center(self, r: int, c: int) -> tuple[float, float]:
        return (self.origin[0] + (c + 0.5) * self.cell_size, self.origin[1] + (r + 0.5) * self.cell_size)

    def free_cell_of(self, point) -> tuple[int, int]:
        r, c = self.cell_of(point)
        if self.cells[r, c]:
            raise ValueError(f"point ({point[0]}, {point[1]}) lies in a blocked cell")
        return r, c

    @property
    def _graph(self) -> csr_matrix:
        if "graph" not in self._cache:
            self._cache["graph"] = _grid_graph(self.cells, self.cell_size)
        return self._cache["graph"]

    def distance_field(self, sources: Sequence[tuple[int, int]]) -> np.ndarray:
        """Geodesic distance from each source cell to every cell, shape (len(sources), rows, cols)."""
        rows, cols = self.shape
        flat = [r * cols + c for r, c in sources]
        dist = dijkstra(self._graph, directed=False, indices=flat)
        return np.asarray(dist).reshape(len(flat), rows, cols)

    def line_of_sight(self, a, b) -> bool:
        """True iff every cell the segment a-b touches is free."""
        return all(not self.cells[r, c] for r, c in self.segment_cells(a, b))

    def segment_cells(self, a, b) -> list[tuple[int, int]]:
        """Cells crossed by the segment a-b (grid traversal; corner hits include both sides)."""
        ox, oy = self.origin
        h = self.cell_size
        ax, ay = (float(a[0]) - ox) / h, (float(a[1]) - oy) / h
        bx, by = (float(b[0]) - ox) / h, (float(b[1]) - oy) / h
        rows, cols = self.shape
        c, r = math.floor(ax), math.floor(ay)
        c_end, r_end = math.floor(bx), math.floor(by)
        dx, dy = bx - ax, by - ay
        step_c = 1 if dx > 0 else -1
        step_r = 1 if dy > 0 else -1
        t_dc = abs(1.0 / dx) if dx else math.inf
        t_dr = abs(1.0 / dy) if dy else math.inf
        t_c = ((c + 1 - ax) if dx > 0 else (ax - c)) * t_dc if dx else math.inf
        t_r = ((r + 1 - ay) if dy > 0 else (ay - r)) * t_dr if dy else math.inf
        out = [(r, c)]
        for _ in range(abs(c_end - c) + abs(r_end - r)):
            if (r, c) == (r_end, c_end):
                break
            if abs(t_c - t_r) < 1e-12:
                # exact corner crossing touches both side cells
                out += [(r, c + step_c), (r + step_r, c)]
                c += step_c
                r += step_r
                t_c += t_dc
                t_r += t_dr
            elif t_c < t_r:
                c += step_c
                t_c += t_dc
            else:
                r += step_r
                t_r += t_dr
            out.append((r, c))
        return [(rr, cc) for rr, cc in dict.fromkeys(out) if 0 <= rr < rows and 0 <= cc < cols]


def _grid_graph(cells: np.ndarray, cell_size: float) -> csr_matrix:
    rows, cols = cells.shape
    free = ~cells
    ids = np.arange(rows * cols).reshape(rows, cols)
    src, dst, w = [], [], []

    def link(mask, a, b, cost):
        src.append(a[mask])
        dst.append(b[mask])
        w.append(np.full(int(mask.sum()), cost))

    # horizontal / vertical
    link(free[:, :-1] & free[:, 1:], ids[:, :-1], ids[:, 1:], cell_size)
    link(free[:-1, :] & free[1:, :], ids[:-1, :], ids[1:, :], cell_size)
    # diagonals, both orthogonal neighbours must be free (no corner cutting)
    diag = cell_size * _SQRT2
    m = free[:-1, :-1] & free[1:, 1:] & free[:-1, 1:] & free[1:, :-1]
    link(m, ids[:-1, :-1], ids[1:, 1:], diag)
    link(m, ids[:-1, 1:], ids[1:, :-1], diag)
    s = np.concatenate(src)
    d = np.concatenate(dst)
    ww = np.concatenate(w)
    n = rows * cols
    return csr_matrix((ww, (s, d)), shape=(n, n))


def geodesic_distance(grid: OccupancyGrid, a, b) -> float:
    """Obstacle-avoiding distance between the cells containing ``a`` and ``b``.

    Returns ``math.inf`` when no free path exists.  The search always starts
    from the smaller cell so the result is bitwise symmetric.
    """
    ca, cb = sorted((grid.free_cell_of(a), grid.free_cell_of(b)))
    if ca == cb:
        return 0.0
    return float(grid.distance_field([ca])[0][cb])
