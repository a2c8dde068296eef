"""Procedural desk-scale environments.

Floorplans are grids of rectangular rooms joined by door gaps.  Panos sit
on free cell centres: one in every door gap, one a metre inside the door
on each side, and a maximal Poisson-disk fill of the rest.  The reference
graph joins every pair with line of sight within 3.5 m.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._seeding import derive_seed, rng_for
from .nav_graph import (
    DisconnectedGraphError,
    NavGraph,
    OccupancyGrid,
    PanoNode,
    connected_components,
    minimum_spanning_tree,
)

SPLITS = ("train", "val_seen", "val_unseen", "test")
MAX_EDGE_M = 3.5
MAX_DZ_M = 3.0
N_VIEWS = 36

FEATURE_MAGIC = b"NAVFEAT\x00"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class EnvParams:
    n_rooms: int = 4
    room_size: float = 6.0
    pano_density: float = 0.35
    cell_size: float = 0.25
    door_width: float = 1.0
    extra_door_prob: float = 0.3

    def __post_init__(self):
        if self.n_rooms < 1:
            raise ValueError("n_rooms must be >= 1")
        if not (self.room_size > 0 and self.cell_size > 0 and self.door_width > 0):
            raise ValueError("sizes must be positive")
        if self.pano_density < 0:
            raise ValueError("pano_density must be >= 0")

    @property
    def spacing(self) -> float:
        # 2 * spacing must stay within the 3.5 m edge limit for coverage to imply connectivity
        if self.pano_density == 0:
            return math.inf
        return min(max(1.0 / math.sqrt(self.pano_density), 1.0), 1.7)


@dataclass(frozen=True, eq=False)
class Environment:
    id: str
    grid: OccupancyGrid
    panos: tuple[PanoNode, ...]
    reference_graph: NavGraph
    split: str = "train"
    seed: int = 0
    params: EnvParams = field(default_factory=EnvParams)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def pano_ids(self) -> list[int]:
        return [p.id for p in self.panos]

    @cached_property
    def pano_cells(self) -> list[tuple[int, int]]:
        return [self.grid.free_cell_of(p.position) for p in self.panos]

    @cached_property
    def geodesic_matrix(self) -> np.ndarray:
        """Grid geodesic between every pair of panos (inf where unreachable)."""
        cells = self.pano_cells
        if not cells:
            return np.zeros((0, 0))
        field_ = self.grid.distance_field(cells)
        rr = [r for r, _ in cells]
        cc = [c for _, c in cells]
        g = field_[:, rr, cc]
        g = np.minimum(g, g.T)
        np.fill_diagonal(g, 0.0)
        g.setflags(write=False)
        return g

    @cached_property
    def euclidean_matrix(self) -> np.ndarray:
        pos = np.array([p.position for p in self.panos]).reshape(-1, 3)
        d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        d.setflags(write=False)
        return d


def _room_layout(params: EnvParams, rng: np.random.Generator):
    n = params.n_rooms
    ncols = math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    h = params.cell_size
    widths = [max(int(round(params.room_size * rng.uniform(0.75, 1.25) / h)), 0) for _ in range(ncols)]
    heights = [max(int(round(params.room_size * rng.uniform(0.75, 1.25) / h)), 0) for _ in range(nrows)]
    if min(widths) == 0 or min(heights) == 0:
        raise ValueError("room_size too small for cell_size: no free cells")
    x0 = np.concatenate([[1], 1 + np.cumsum(np.array(widths) + 1)])
    y0 = np.concatenate([[1], 1 + np.cumsum(np.array(heights) + 1)])
    cells = np.ones((int(y0[-1]), int(x0[-1])), dtype=bool)
    rooms = {}
    for k in range(n):
        ri, ci = divmod(k, ncols)
        rooms[k] = (int(y0[ri]), int(y0[ri]) + heights[ri], int(x0[ci]), int(x0[ci]) + widths[ci])
        r0, r1, c0, c1 = rooms[k]
        cells[r0:r1, c0:c1] = False
    adjacent = []
    for k in range(n):
        ri, ci = divmod(k, ncols)
        if ci + 1 < ncols and k + 1 < n:
            adjacent.append((k, k + 1, "v"))
        if k + ncols < n:
            adjacent.append((k, k + ncols, "h"))
    return cells, rooms, adjacent


def _place_doors(cells, rooms, adjacent, params, rng):
    """Carve door gaps; returns forced pano cells (door, threshold a, threshold b) per door."""
    h = params.cell_size
    door_cells = max(1, int(round(params.door_width / h)))
    inset = max(1, int(round(1.0 / h)))
    weights = rng.uniform(size=len(adjacent))
    tree = set(minimum_spanning_tree(range(len(rooms)), [(a, b, w) for (a, b, _), w in zip(adjacent, weights)]))
    forced = []
    for a, b, orient in adjacent:
        if (a, b) not in tree and rng.uniform() >= params.extra_door_prob:
            continue
        ra, rb = rooms[a], rooms[b]
        if orient == "v":  # wall column between a (left) and b (right)
            wall_c = ra[3]
            lo, hi = max(ra[0], rb[0]), min(ra[1], rb[1])
        else:  # wall row between a (top) and b (bottom)
            wall_r = ra[1]
            lo, hi = max(ra[2], rb[2]), min(ra[3], rb[3])
        span = hi - lo
        width = min(door_cells, span)
        start = lo + int(rng.integers(0, span - width + 1))
        mid = start + width // 2
        if orient == "v":
            cells[start:start + width, wall_c] = False
            door = (mid, wall_c)
            ta = (mid, max(wall_c - inset, ra[2]))
            tb = (mid, min(wall_c + inset, rb[3] - 1))
        else:
            cells[wall_r, start:start + width] = False
            door = (wall_r, mid)
            ta = (max(wall_r - inset, ra[0]), mid)
            tb = (min(wall_r + inset, rb[1] - 1), mid)
        forced.append((door, ta, tb))
    return forced


def _poisson_fill(grid: OccupancyGrid, rooms, seeds_xy, spacing, rng):
    centers = []
    for r0, r1, c0, c1 in rooms.values():
        for r in range(r0, r1):
            for c in range(c0, c1):
                centers.append(grid.cell_center(r, c))
    centers = np.array(centers)
    order = rng.permutation(len(centers))
    accepted = [np.asarray(p, dtype=float) for p in seeds_xy]
    acc = np.array(accepted).reshape(-1, 2)
    out = []
    for k in order:
        p = centers[k]
        if len(acc) and np.min(np.hypot(*(acc - p).T)) < spacing - 1e-9:
            continue
        out.append(p)
        acc = np.vstack([acc, p])
    return out


def _reference_edges(grid: OccupancyGrid, panos, geo: np.ndarray, eucl: np.ndarray):
    n = len(panos)
    ids = [p.id for p in panos]
    edges = []
    candidates = []
    for a in range(n):
        for b in range(a + 1, n):
            s = eucl[a, b]
            if s > MAX_EDGE_M or not math.isfinite(geo[a, b]):
                continue
            if abs(panos[a].position[2] - panos[b].position[2]) > MAX_DZ_M:
                continue
            if grid.line_of_sight(panos[a].position, panos[b].position):
                edges.append((ids[a], ids[b]))
                candidates.append((ids[a], ids[b], 0.0))
            else:
                candidates.append((ids[a], ids[b], float(geo[a, b])))
    if len(connected_components(ids, edges)) > 1:
        # minimal augmentation: existing edges cost 0, so only bridging edges are added
        mst = minimum_spanning_tree(ids, candidates)
        edges = sorted(set(edges) | set(mst))
    return edges


def generate_environment(seed: int, params: EnvParams | None = None, *, env_id: str | None = None,
                         split: str = "train", max_attempts: int = 10) -> Environment:
    """Deterministically generate one environment from ``seed``.

    A layout whose within-3.5 m candidate pairs cannot connect every pano is
    redrawn from a derived seed, up to ``max_attempts`` times.
    """
    params = params or EnvParams()
    env_id = env_id if env_id is not None else f"env{seed:05d}"
    last_err = None
    for attempt in range(max_attempts):
        rng = rng_for(seed, "environment", attempt)
        try:
            return _generate_once(seed, params, env_id, split, rng)
        except DisconnectedGraphError as err:
            last_err = err
    raise ValueError(f"could not generate a connected environment for seed {seed}: {last_err}")


def _generate_once(seed, params, env_id, split, rng):
    cells, rooms, adjacent = _room_layout(params, rng)
    forced = _place_doors(cells, rooms, adjacent, params, rng) if len(rooms) > 1 else []
    grid = OccupancyGrid(cells, params.cell_size)
    forced_cells = list(dict.fromkeys(c for trio in forced for c in trio))
    seeds_xy = [grid.cell_center(r, c) for r, c in forced_cells]
    fill = _poisson_fill(grid, rooms, seeds_xy, params.spacing, rng) if params.pano_density > 0 else []
    xy = seeds_xy + [tuple(p) for p in fill]
    if not xy:
        r0, r1, c0, c1 = rooms[0]
        xy = [grid.cell_center((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2)]
    panos = tuple(PanoNode(k, (float(x), float(y), 0.0)) for k, (x, y) in enumerate(xy))
    draft = Environment(env_id, grid, panos, NavGraph(panos), split, seed, params)
    edges = _reference_edges(grid, panos, draft.geodesic_matrix, draft.euclidean_matrix)
    return Environment(env_id, grid, panos, NavGraph(panos, edges), split, seed, params)


class EdgeProbabilityProvider:
    """Pairwise navigability probabilities for one environment.

    ``raw[i, j]`` is the probability reported looking from pano ``i``
    towards pano ``j`` (indices follow ascending pano id).  Queries use the
    symmetrized value ``max(raw[i, j], raw[j, i])``.
    """

    PITCH_BINS, HEADING_BINS, DIST_BINS = 8, 16, 5

    def __init__(self, env: Environment, raw: np.ndarray):
        raw = np.asarray(raw, dtype=float)
        n = len(env.panos)
        if raw.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} probability matrix, got {raw.shape}")
        if np.any((raw < 0) | (raw > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        self.env = env
        self.raw = raw
        self.raw.setflags(write=False)
        self._index = {p.id: k for k, p in enumerate(env.panos)}
        sym = np.maximum(raw, raw.T)
        sym.setflags(write=False)
        self.matrix = sym

    def probability(self, i: int, j: int) -> float:
        return float(self.matrix[self._index[i], self._index[j]])

    def directed_probability(self, i: int, j: int) -> float:
        return float(self.raw[self._index[i], self._index[j]])

    def bucket_of(self, i: int, j: int):
        """(pitch, heading, distance) bucket of pano ``j`` seen from ``i``; ``None`` beyond 3.5 m."""
        a = np.asarray(self.env.panos[self._index[i]].position)
        b = np.asarray(self.env.panos[self._index[j]].position)
        dx, dy, dz = b - a
        horiz = math.hypot(dx, dy)
        dist = math.sqrt(horiz * horiz + dz * dz)
        if dist == 0 or dist > MAX_EDGE_M:
            return None
        pitch = math.degrees(math.atan2(dz, horiz))
        heading = math.degrees(math.atan2(dx, dy)) % 360.0
        pb = min(int((pitch + 90.0) / (180.0 / self.PITCH_BINS)), self.PITCH_BINS - 1)
        hb = int(heading / (360.0 / self.HEADING_BINS)) % self.HEADING_BINS
        db = min(int(dist / (MAX_EDGE_M / self.DIST_BINS)), self.DIST_BINS - 1)
        return pb, hb, db

    def bucket_grid(self, i: int) -> np.ndarray:
        """8x16x5 view for source pano ``i``; a bucket holds the max probability of panos inside it."""
        grid = np.zeros((self.PITCH_BINS, self.HEADING_BINS, self.DIST_BINS))
        for p in self.env.panos:
            if p.id == i:
                continue
            b = self.bucket_of(i, p.id)
            if b is not None:
                grid[b] = max(grid[b], self.directed_probability(i, p.id))
        return grid


def oracle_edge_probability(env: Environment, noise: float = 0.0, seed: int = 0,
                            on_edge: float = 0.9, off_edge: float = 0.1) -> EdgeProbabilityProvider:
    """Noisy stand-in for a learned edge classifier: ``clip(base + N(0, noise), 0, 1)``."""
    if noise < 0:
        raise ValueError("noise must be >= 0")
    n = len(env.panos)
    ids = env.pano_ids
    base = np.full((n, n), off_edge)
    ref = env.reference_graph
    index = {pid: k for k, pid in enumerate(ids)}
    for i, j in ref.edges:
        base[index[i], index[j]] = base[index[j], index[i]] = on_edge
    rng = rng_for(seed, "edge_probability", env.id)
    raw = np.clip(base + rng.normal(0.0, noise, size=(n, n)) if noise > 0 else base, 0.0, 1.0)
    return EdgeProbabilityProvider(env, raw)


class FeatureStore:
    """Per-pano view features, array of shape (n_panos, 36, dim), float32."""

    def __init__(self, pano_ids, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3 or data.shape[1] != N_VIEWS or data.shape[0] != len(pano_ids):
            raise ValueError(f"feature array must be (n_panos, {N_VIEWS}, dim), got {data.shape}")
        data.setflags(write=False)
        self.data = data
        self.pano_ids = list(pano_ids)
        self._index = {p: k for k, p in enumerate(self.pano_ids)}

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def views(self, pano_id: int) -> np.ndarray:
        return self.data[self._index[pano_id]]

    def pooled(self, pano_id: int) -> np.ndarray:
        return self.data[self._index[pano_id]].mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return self.pano_ids == other.pano_ids and np.array_equal(self.data, other.data)

    def save(self, path) -> None:
        write_float_records(path, self.data.reshape(-1, self.dim), count=len(self.pano_ids))

    @classmethod
    def load(cls, path, pano_ids) -> "FeatureStore":
        count, rows = read_float_records(path)
        if count != len(pano_ids):
            raise ValueError(f"{path}: header says {count} panos, environment has {len(pano_ids)}")
        return cls(pano_ids, rows.reshape(count, N_VIEWS, -1))


def write_float_records(path, rows: np.ndarray, count: int | None = None, magic: bytes = FEATURE_MAGIC) -> None:
    """Little-endian float32 rows behind a 16-byte header (magic, count, dim)."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    count = rows.shape[0] if count is None else count
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, count, rows.shape[1]))
        fh.write(rows.tobytes())


def read_float_records(path, magic: bytes = FEATURE_MAGIC) -> tuple[int, np.ndarray]:
    raw = Path(path).read_bytes()
    got_magic, count, dim = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise ValueError(f"{path}: bad magic {got_magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if dim == 0 or body.size % dim:
        raise ValueError(f"{path}: payload size {body.size} not a multiple of dim {dim}")
    return count, body.reshape(-1, dim).astype(np.float32)


def generate_features(env: Environment, seed: int = 0, dim: int = 640, length_scale: float = 3.0,
                      n_fourier: int = 64, weights=(0.7, 0.5, 0.35)) -> FeatureStore:
    """Synthetic unit-norm view features.

    Each view mixes a spatially smooth per-pano latent (random Fourier
    features of position), a per-direction latent shared by all panos, and
    i.i.d. noise, so nearby panos look alike.
    """
    if dim < 8:
        raise ValueError("feature dimension must be >= 8")
    rng = rng_for(seed, "features", env.id, dim)
    n = len(env.panos)
    pos = np.array([p.position for p in env.panos]).reshape(n, 3)
    freqs = rng.normal(0.0, 1.0 / length_scale, size=(3, n_fourier))
    phase = rng.uniform(0.0, 2 * math.pi, size=n_fourier)
    rff = math.sqrt(2.0 / n_fourier) * np.cos(pos @ freqs + phase)
    mixing = rng.normal(size=(n_fourier, dim)) / math.sqrt(dim)
    pano_latent = rff @ mixing
    pano_latent /= np.linalg.norm(pano_latent, axis=1, keepdims=True) + 1e-12
    dir_latent = rng.normal(size=(N_VIEWS, dim))
    dir_latent /= np.linalg.norm(dir_latent, axis=1, keepdims=True)
    noise = rng.normal(size=(n, N_VIEWS, dim)) / math.sqrt(dim)
    a, b, c = weights
    views = a * pano_latent[:, None, :] + b * dir_latent[None, :, :] + c * noise
    views /= np.linalg.norm(views, axis=2, keepdims=True)
    return FeatureStore(env.pano_ids, views)


# -- bundle I/O ---------------------------------------------------------------

def save_environment(env: Environment, directory, features: FeatureStore | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    env.reference_graph.save(d / "graph.json")
    grid = {
        "cell_size": env.grid.cell_size,
        "origin": list(env.grid.origin),
        "rows": ["".join("1" if v else "0" for v in row) for row in env.grid.cells],
    }
    (d / "grid.json").write_text(json.dumps(grid, indent=1) + "\n")
    meta = {"id": env.id, "seed": env.seed, "split": env.split, "params": asdict(env.params)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    if features is not None:
        features.save(d / "features.bin")
    return d


def load_environment(directory) -> Environment:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    g = json.loads((d / "grid.json").read_text())
    cells = np.array([[ch == "1" for ch in row] for row in g["rows"]], dtype=bool)
    grid = OccupancyGrid(cells, g["cell_size"], tuple(g["origin"]))
    graph = NavGraph.load(d / "graph.json")
    env = Environment(meta["id"], grid, tuple(graph.nodes), graph, meta["split"], meta["seed"],
                      EnvParams(**meta["params"]))
    for p in env.panos:
        grid.free_cell_of(p.position)
    return env


def load_features(directory, env: Environment) -> FeatureStore:
    return FeatureStore.load(Path(directory) / "features.bin", env.pano_ids)


def list_environment_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/meta.json"))


def generate_suite(n_envs: int, seed: int, params: EnvParams | None = None, splits=None) -> list[Environment]:
    """``n_envs`` environments with ids ``env000``...; splits cycle through ``splits`` if given."""
    splits = list(splits or ["train"])
    return [
        generate_environment(derive_seed(seed, "env", k), params, env_id=f"env{k:03d}", split=splits[k % len(splits)])
        for k in range(n_envs)
    ]
