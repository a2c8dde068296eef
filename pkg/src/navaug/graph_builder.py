"""Navigation graphs from edge probabilities, with lambda fitting by grid search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .env_synth import EdgeProbabilityProvider, Environment
from .nav_graph import DisconnectedGraphError, NavGraph, minimum_spanning_tree
from .validation import check_scenes

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(31))


@dataclass(frozen=True)
class EdgeRuleParams:
    lambda_d: float = 1.0
    lambda_p: float = 1.0
    max_euclidean: float = 3.5
    max_dz: float = 3.0

    def __post_init__(self):
        vals = (self.lambda_d, self.lambda_p, self.max_euclidean, self.max_dz)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("edge rule parameters must be finite")
        if self.lambda_d < 0 or self.lambda_p < 0:
            raise ValueError("lambda_d and lambda_p must be >= 0")
        if self.max_euclidean <= 0:
            raise ValueError("max_euclidean must be positive")


@dataclass(frozen=True)
class GraphQuality:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        # 2PR/(P+R) written over integer counts so equal ratios compare equal
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if self.tp and denom else 0.0

    def __add__(self, other: "GraphQuality") -> "GraphQuality":
        return GraphQuality(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


def first_term(lambda_d, lambda_p, g, s, p):
    # evaluated left to right as written, so scalar and vectorized paths round identically
    return lambda_d * g / s - lambda_p * p


def edge_rule(params: EdgeRuleParams, g: float, s: float, p: float, z_i: float, z_j: float) -> bool:
    """Pairwise edge test: ``lambda_d*g/s - lambda_p*p <= 1`` within distance and height limits."""
    if not s > 0:
        raise ValueError("coincident panos: euclidean distance must be > 0")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    if g == math.inf:
        return False
    return (params.lambda_d * g / s - params.lambda_p * p <= 1
            and s <= params.max_euclidean
            and abs(z_i - z_j) <= params.max_dz)


@dataclass(frozen=True)
class PairTable:
    """Upper-triangle pair arrays for one environment, ready for vectorized rule evaluation."""

    ids_i: np.ndarray
    ids_j: np.ndarray
    g: np.ndarray
    s: np.ndarray
    p: np.ndarray
    dz: np.ndarray

    @classmethod
    def from_env(cls, env: Environment, provider: EdgeProbabilityProvider) -> "PairTable":
        n = len(env.panos)
        a, b = np.triu_indices(n, k=1)
        ids = np.array(env.pano_ids, dtype=np.int64)
        z = np.array([p.position[2] for p in env.panos])
        s = env.euclidean_matrix[a, b]
        if np.any(s <= 0):
            raise ValueError(f"{env.id}: coincident panos")
        return cls(ids[a], ids[b], env.geodesic_matrix[a, b], s, provider.matrix[a, b], np.abs(z[a] - z[b]))

    def rule_mask(self, params: EdgeRuleParams) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            term = first_term(params.lambda_d, params.lambda_p, self.g, self.s, self.p)
        return (np.isfinite(self.g) & (term <= 1) & (self.s <= params.max_euclidean)
                & (self.dz <= params.max_dz))

    def pairs(self, mask: np.ndarray) -> set[tuple[int, int]]:
        return set(zip(self.ids_i[mask].tolist(), self.ids_j[mask].tolist()))


def pair_rule_edges(env: Environment, provider: EdgeProbabilityProvider, params: EdgeRuleParams,
                    table: PairTable | None = None) -> set[tuple[int, int]]:
    table = table or PairTable.from_env(env, provider)
    return table.pairs(table.rule_mask(params))


def build_graph(env: Environment, provider: EdgeProbabilityProvider, params: EdgeRuleParams,
                table: PairTable | None = None) -> NavGraph:
    """Pair-rule edges OR'ed with the MST over all geodesically reachable pairs.

    MST weights are the rule's first term clamped at zero.
    """
    if not env.panos:
        raise ValueError("environment has no panos")
    table = table or PairTable.from_env(env, provider)
    rule = table.pairs(table.rule_mask(params))
    reach = np.isfinite(table.g)
    w = np.maximum(first_term(params.lambda_d, params.lambda_p, table.g[reach], table.s[reach], table.p[reach]), 0.0)
    cand = zip(table.ids_i[reach].tolist(), table.ids_j[reach].tolist(), w.tolist())
    try:
        mst = minimum_spanning_tree(env.pano_ids, cand)
    except DisconnectedGraphError as err:
        raise ValueError(f"{env.id}: panos geodesically unreachable from the rest: {err}") from err
    return NavGraph(env.panos, sorted(rule | set(mst)))


def graph_quality(pred: NavGraph, ref: NavGraph) -> GraphQuality:
    if set(pred.node_ids) != set(ref.node_ids):
        raise ValueError("predicted and reference graphs have different node sets")
    return edge_set_quality(pred.edge_set(), ref.edge_set())


def edge_set_quality(pred, ref) -> GraphQuality:
    pred = {tuple(sorted(e)) for e in pred}
    ref = {tuple(sorted(e)) for e in ref}
    tp = len(pred & ref)
    return GraphQuality(tp, len(pred) - tp, len(ref) - tp)


def grid_search(tables: Sequence[PairTable], references: Sequence[NavGraph],
                lambda_d_grid=DEFAULT_GRID, lambda_p_grid=DEFAULT_GRID,
                max_euclidean: float = 3.5, max_dz: float = 3.0) -> tuple[EdgeRuleParams, GraphQuality]:
    """Exhaustive search for the (lambda_d, lambda_p) maximizing pooled pair-rule F1.

    Only pair-rule edges are scored (the MST union is excluded).  Ties go to
    the smaller lambda_d, then the smaller lambda_p.
    """
    if not tables or len(tables) != len(references):
        raise ValueError("need one reference graph per pair table")
    if not len(lambda_d_grid) or not len(lambda_p_grid):
        raise ValueError("lambda grids must be non-empty")
    ref_masks = []
    for t, ref in zip(tables, references):
        es = ref.edge_set()
        ref_masks.append(np.fromiter(((i, j) in es for i, j in zip(t.ids_i.tolist(), t.ids_j.tolist())),
                                     dtype=bool, count=len(t.ids_i)))
    best = None
    for ld in sorted(lambda_d_grid):
        for lp in sorted(lambda_p_grid):
            params = EdgeRuleParams(float(ld), float(lp), max_euclidean, max_dz)
            tp = fp = fn = 0
            for t, rm in zip(tables, ref_masks):
                pm = t.rule_mask(params)
                hit = int(np.count_nonzero(pm & rm))
                tp += hit
                fp += int(np.count_nonzero(pm)) - hit
                fn += int(np.count_nonzero(rm)) - hit
            q = GraphQuality(tp, fp, fn)
            if best is None or q.f1 > best[1].f1:
                best = (params, q)
    return best


class NavGraphBuilder(BaseEstimator):
    """Estimator wrapper: ``fit`` grid-searches the lambdas, ``transform`` builds graphs.

    ``X`` is a sequence of ``(Environment, EdgeProbabilityProvider)`` pairs;
    ``y`` the matching reference graphs.
    """

    def __init__(self, lambda_d=1.0, lambda_p=1.0, lambda_d_grid=DEFAULT_GRID, lambda_p_grid=DEFAULT_GRID,
                 max_euclidean=3.5, max_dz=3.0):
        self.lambda_d = lambda_d
        self.lambda_p = lambda_p
        self.lambda_d_grid = lambda_d_grid
        self.lambda_p_grid = lambda_p_grid
        self.max_euclidean = max_euclidean
        self.max_dz = max_dz

    def _params(self) -> EdgeRuleParams:
        if hasattr(self, "params_"):
            return self.params_
        return EdgeRuleParams(self.lambda_d, self.lambda_p, self.max_euclidean, self.max_dz)

    def fit(self, X, y):
        scenes = check_scenes(X)
        if len(y) != len(scenes):
            raise ValueError(f"got {len(scenes)} scenes but {len(y)} reference graphs")
        tables = [PairTable.from_env(env, prov) for env, prov in scenes]
        self.params_, self.quality_ = grid_search(tables, list(y), self.lambda_d_grid, self.lambda_p_grid,
                                                  self.max_euclidean, self.max_dz)
        self.lambda_d_ = self.params_.lambda_d
        self.lambda_p_ = self.params_.lambda_p
        return self

    def transform(self, X) -> list[NavGraph]:
        return [build_graph(env, prov, self._params()) for env, prov in check_scenes(X)]

    def predict_pairs(self, X) -> list[set[tuple[int, int]]]:
        return [pair_rule_edges(env, prov, self._params()) for env, prov in check_scenes(X)]

    def score(self, X, y) -> float:
        """Pooled pair-rule F1 against reference graphs."""
        total = GraphQuality(0, 0, 0)
        for pairs, ref in zip(self.predict_pairs(X), y):
            total = total + edge_set_quality(pairs, ref.edge_set())
        return total.f1
