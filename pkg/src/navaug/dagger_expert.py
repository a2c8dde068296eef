"""Expert actions relative to a ground-truth trajectory.

Three cases, checked in order:

* on the GT path: the next GT node (STOP at the end);
* off the path, GT is a shortest path: first step of the shortest path to the goal;
* off the path otherwise: first step of the shortest path back to the
  nearest GT node (ties favour later GT nodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .episode_sim import STOP, EpisodeState, Simulator
from .nav_graph import TIE_TOL, NavGraph, graph_shortest_path
from .traj_sampler import Trajectory

SHORTEST_TOL = 1e-6


@dataclass(frozen=True)
class ExpertContext:
    graph: NavGraph
    gt: Trajectory
    gt_is_shortest: bool

    @classmethod
    def build(cls, graph: NavGraph, gt: Trajectory) -> "ExpertContext":
        gt.validate(graph)
        best = graph_shortest_path(graph, gt.start, gt.goal).length
        return cls(graph, gt, abs(gt.length_m - best) <= SHORTEST_TOL)


def match_index(gt_nodes: Sequence[int], trace: Sequence[int]) -> int | None:
    """GT index matched by the last node of ``trace``, or ``None`` if it is off the path.

    When the GT revisits a node, the match is the smallest index past the
    previous match, falling back to the smallest index overall.
    """
    positions: dict[int, list[int]] = {}
    for k, n in enumerate(gt_nodes):
        positions.setdefault(n, []).append(k)
    last = -1
    current = None
    for node in trace:
        idx = positions.get(node)
        if idx is None:
            current = None
            continue
        later = [k for k in idx if k > last]
        current = later[0] if later else idx[0]
        last = current
    return current


def _first_step(graph: NavGraph, src: int, dst: int) -> int:
    sp = graph_shortest_path(graph, src, dst)
    if not sp.reachable:
        raise ValueError(f"node {dst} unreachable from {src}")
    return sp.nodes[1] if len(sp.nodes) > 1 else STOP


def expert_action(ctx: ExpertContext, state: EpisodeState) -> int:
    """Expert's next node id for ``state``, or ``STOP``."""
    if state.done:
        raise ValueError("episode is finished")
    gt = ctx.gt.nodes
    cur = state.current_node
    k = match_index(gt, state.trace)
    if k is not None:
        return gt[k + 1] if k + 1 < len(gt) else STOP
    graph = ctx.graph
    if ctx.gt_is_shortest:
        return _first_step(graph, cur, ctx.gt.goal)
    best_k, best_d = None, math.inf
    for idx, node in enumerate(gt):
        d = graph.distance(cur, node)
        if best_k is None or d < best_d - TIE_TOL:
            best_k, best_d = idx, d
        elif d <= best_d + TIE_TOL:
            best_k, best_d = idx, min(best_d, d)
    if not math.isfinite(best_d):
        raise ValueError(f"node {cur} cannot reach the GT trajectory")
    return _first_step(graph, cur, gt[best_k])


def expert_rollout(ctx: ExpertContext, sim: Simulator, start_state: EpisodeState) -> EpisodeState:
    """Follow the expert until it stops (or the step cap ends the episode)."""
    state = start_state
    while not state.done:
        state = sim.step(state, expert_action(ctx, state))
    return state
