"""Path-fidelity metrics: NE, SR, SPL, NDTW, SDTW and the first-error report."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .nav_graph import NavGraph

SUCCESS_THRESHOLD_M = 3.0


@dataclass(frozen=True)
class EvalResult:
    ne_m: float
    success: bool
    spl: float
    ndtw: float
    sdtw: float
    first_error_step: int | None
    episode_id: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def navigation_error(graph: NavGraph, final: int, goal: int) -> float:
    d = graph.distance(final, goal)
    if not math.isfinite(d):
        raise ValueError(f"goal {goal} unreachable from {final}")
    return d


def success(ne_m: float, threshold: float = SUCCESS_THRESHOLD_M) -> bool:
    if ne_m < 0:
        raise ValueError("navigation error must be >= 0")
    return ne_m < threshold


def spl(succeeded: bool, shortest_len: float, traveled_len: float) -> float:
    if not succeeded:
        return 0.0
    denom = max(shortest_len, traveled_len)
    return 1.0 if denom == 0 else shortest_len / denom


def _check_path(graph: NavGraph, path: Sequence[int], name: str) -> None:
    if len(path) == 0:
        raise ValueError(f"{name} path is empty")
    for n in path:
        if n not in graph:
            raise ValueError(f"{name} path node {n} not in graph")


def dtw(pred: Sequence[int], ref: Sequence[int], graph: NavGraph) -> float:
    """DTW cost over graph geodesics with the standard three-way warping recurrence."""
    _check_path(graph, pred, "pred")
    _check_path(graph, ref, "ref")
    idx = graph.index
    dist = graph.distance_matrix
    cost = dist[np.ix_([idx[p] for p in pred], [idx[r] for r in ref])]
    if not np.all(np.isfinite(cost)):
        raise ValueError("paths contain mutually unreachable nodes")
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), math.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(pred: Sequence[int], ref: Sequence[int], graph: NavGraph, threshold: float = SUCCESS_THRESHOLD_M) -> float:
    return math.exp(-dtw(pred, ref, graph) / (len(ref) * threshold))


def sdtw(pred: Sequence[int], ref: Sequence[int], graph: NavGraph, threshold: float = SUCCESS_THRESHOLD_M) -> float:
    _check_path(graph, pred, "pred")
    _check_path(graph, ref, "ref")
    if not success(navigation_error(graph, pred[-1], ref[-1]), threshold):
        return 0.0
    return ndtw(pred, ref, graph, threshold)


def first_error_step(pred: Sequence[int], ref: Sequence[int]) -> int | None:
    """First index where the paths disagree; a strict prefix errs at its own length."""
    pred, ref = list(pred), list(ref)
    if pred == ref:
        return None
    for t, (a, b) in enumerate(zip(pred, ref)):
        if a != b:
            return t
    return min(len(pred), len(ref))


def evaluate_episode(graph: NavGraph, pred: Sequence[int], ref: Sequence[int], episode_id: str = "",
                     threshold: float = SUCCESS_THRESHOLD_M) -> EvalResult:
    _check_path(graph, pred, "pred")
    _check_path(graph, ref, "ref")
    ne = navigation_error(graph, pred[-1], ref[-1])
    ok = success(ne, threshold)
    shortest = graph.distance(pred[0], ref[-1])
    traveled = graph.path_length(pred)
    n = ndtw(pred, ref, graph, threshold)
    return EvalResult(ne, ok, spl(ok, shortest, traveled), n, n if ok else 0.0,
                      first_error_step(pred, ref), episode_id)


def aggregate(results: Sequence[EvalResult]) -> dict:
    """Dataset means (SR in percent) and a histogram of first-error steps ("none" = no error)."""
    if not results:
        raise ValueError("need at least one result")
    hist = Counter("none" if r.first_error_step is None else r.first_error_step for r in results)
    keys = sorted((k for k in hist if k != "none")) + (["none"] if "none" in hist else [])
    return {
        "episodes": len(results),
        "ne_m": float(np.mean([r.ne_m for r in results])),
        "sr": 100.0 * float(np.mean([r.success for r in results])),
        "spl": float(np.mean([r.spl for r in results])),
        "ndtw": float(np.mean([r.ndtw for r in results])),
        "sdtw": float(np.mean([r.sdtw for r in results])),
        "first_error_histogram": {str(k): hist[k] for k in keys},
    }
