"""Trajectory sampling: random waypoints, exact open-path TSP order, rejection filters."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._seeding import rng_for
from .nav_graph import TIE_TOL, NavGraph, graph_shortest_path

PRE_EXPLORE_SPLITS = ("val_unseen", "test")
MAX_TSP_WAYPOINTS = 12
_ENUMERATION_LIMIT = 6


@dataclass(frozen=True)
class Trajectory:
    env_id: str
    nodes: tuple[int, ...]
    length_m: float
    pre_explore: bool = False
    traj_id: str = ""

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    @property
    def start(self) -> int:
        return self.nodes[0]

    @property
    def goal(self) -> int:
        return self.nodes[-1]

    @classmethod
    def from_nodes(cls, graph: NavGraph, env_id: str, nodes: Sequence[int], **kw) -> "Trajectory":
        nodes = tuple(int(n) for n in nodes)
        if not nodes:
            raise ValueError("a trajectory needs at least one node")
        return cls(env_id, nodes, graph.path_length(nodes), **kw)

    def validate(self, graph: NavGraph, max_length_m: float | None = None, max_steps: int | None = None) -> None:
        if not self.nodes:
            raise ValueError("empty trajectory")
        for n in self.nodes:
            if n not in graph:
                raise ValueError(f"trajectory node {n} not in graph {self.env_id}")
        length = graph.path_length(self.nodes)
        if abs(length - self.length_m) > 1e-9:
            raise ValueError(f"stored length {self.length_m} != recomputed {length}")
        if max_steps is not None and self.steps > max_steps:
            raise ValueError(f"trajectory has {self.steps} steps > {max_steps}")
        if max_length_m is not None and self.length_m > max_length_m:
            raise ValueError(f"trajectory length {self.length_m:.3f} m > {max_length_m} m")

    def to_dict(self) -> dict:
        d = {"env_id": self.env_id, "nodes": list(self.nodes), "length_m": self.length_m,
             "steps": self.steps, "pre_explore": self.pre_explore}
        if self.traj_id:
            d["traj_id"] = self.traj_id
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trajectory":
        t = cls(d["env_id"], tuple(int(n) for n in d["nodes"]), float(d["length_m"]),
                bool(d.get("pre_explore", False)), str(d.get("traj_id", "")))
        if "steps" in d and int(d["steps"]) != t.steps:
            raise ValueError(f"record steps {d['steps']} disagrees with its {len(t.nodes)} nodes")
        return t


@dataclass(frozen=True)
class SampleConfig:
    waypoints: int = 3
    max_length_m: float = 40.0
    max_steps: int = 16
    per_env_cap: int = 3000
    seed: int = 0
    attempts_factor: int = 2

    def __post_init__(self):
        if self.waypoints < 2:
            raise ValueError("waypoints must be >= 2")
        if self.per_env_cap < 1:
            raise ValueError("per_env_cap must be >= 1")

    @property
    def max_attempts(self) -> int:
        return self.attempts_factor * self.per_env_cap


@dataclass(frozen=True)
class TspResult:
    order: tuple[int, ...]
    cost: float


def _pair_costs(graph: NavGraph, waypoints: Sequence[int]) -> dict:
    cost = {}
    for a in waypoints:
        for b in waypoints:
            if a == b:
                continue
            sp = graph_shortest_path(graph, a, b)
            if not sp.reachable:
                raise ValueError(f"waypoints {a} and {b} are not connected")
            cost[a, b] = sp.length
    return cost


def _better(cost, order, best_cost, best_order) -> bool:
    if best_order is None or cost < best_cost - TIE_TOL:
        return True
    return abs(cost - best_cost) <= TIE_TOL and order < best_order


def _enumerate_order(ws, cost) -> TspResult:
    best_cost, best_order = math.inf, None
    for perm in itertools.permutations(ws):
        c = 0.0
        for a, b in zip(perm[:-1], perm[1:]):
            c += cost[a, b]
        if _better(c, perm, best_cost, best_order):
            best_cost, best_order = c, perm
    return TspResult(best_order, best_cost)


def _held_karp_order(ws, cost) -> TspResult:
    n = len(ws)
    # table[(mask, last)] = (cost, order) for the best path visiting mask ending at last
    table = {(1 << k, k): (0.0, (ws[k],)) for k in range(n)}
    for size in range(2, n + 1):
        for subset in itertools.combinations(range(n), size):
            mask = sum(1 << k for k in subset)
            for last in subset:
                prev_mask = mask ^ (1 << last)
                best = None
                for prev in subset:
                    if prev == last:
                        continue
                    pc, po = table[prev_mask, prev]
                    c = pc + cost[ws[prev], ws[last]]
                    o = po + (ws[last],)
                    if best is None or _better(c, o, best[0], best[1]):
                        best = (c, o)
                table[mask, last] = best
    full = (1 << n) - 1
    best_cost, best_order = math.inf, None
    for last in range(n):
        c, o = table[full, last]
        if _better(c, o, best_cost, best_order):
            best_cost, best_order = c, o
    return TspResult(best_order, best_cost)


def tsp_order(graph: NavGraph, waypoints: Iterable[int], method: str = "auto") -> TspResult:
    """Open-path ordering of ``waypoints`` minimizing summed shortest-path length.

    Exact: permutation enumeration up to 6 waypoints, Held-Karp up to 12.
    Equal costs (within 1e-9 m) resolve to the lexicographically smallest order.
    """
    ws = sorted(set(int(w) for w in waypoints))
    if len(ws) < 2:
        raise ValueError("need at least 2 distinct waypoints")
    if len(ws) > MAX_TSP_WAYPOINTS:
        raise NotImplementedError(f"exact TSP supports at most {MAX_TSP_WAYPOINTS} waypoints, got {len(ws)}")
    cost = _pair_costs(graph, ws)
    if method == "auto":
        method = "enumerate" if len(ws) <= _ENUMERATION_LIMIT else "held_karp"
    if method == "enumerate":
        return _enumerate_order(ws, cost)
    if method == "held_karp":
        return _held_karp_order(ws, cost)
    raise ValueError(f"unknown TSP method {method!r}")


def stitch_path(graph: NavGraph, order: Sequence[int]) -> tuple[int, ...]:
    """Concatenate shortest paths between consecutive waypoints, merging junction nodes."""
    nodes = [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        nodes.extend(graph_shortest_path(graph, a, b).nodes[1:])
    return tuple(nodes)


def sample_trajectory(graph: NavGraph, config: SampleConfig, rng: np.random.Generator,
                      env_id: str = "") -> Trajectory | None:
    """One TSP-ordered waypoint trajectory, or ``None`` if it breaks the length/step limits."""
    ids = graph.node_ids
    if len(ids) < config.waypoints:
        raise ValueError(f"graph has {len(ids)} nodes, fewer than {config.waypoints} waypoints")
    picks = rng.choice(len(ids), size=config.waypoints, replace=False)
    tsp = tsp_order(graph, [ids[k] for k in picks])
    nodes = stitch_path(graph, tsp.order)
    traj = Trajectory(env_id, nodes, graph.path_length(nodes))
    if traj.steps > config.max_steps or traj.length_m > config.max_length_m:
        return None
    return traj


@dataclass
class SamplingStats:
    attempts: int = 0
    accepted: int = 0


def _sample_env(env_id: str, graph: NavGraph, config: SampleConfig, pre_explore: bool = False):
    rng = rng_for(config.seed, "sample", env_id)
    out = []
    stats = SamplingStats()
    if len(graph) < config.waypoints:
        return out, stats
    while len(out) < config.per_env_cap and stats.attempts < config.max_attempts:
        stats.attempts += 1
        traj = sample_trajectory(graph, config, rng, env_id)
        if traj is None:
            continue
        out.append(replace(traj, pre_explore=pre_explore, traj_id=f"{env_id}:{len(out)}"))
    stats.accepted = len(out)
    return out, stats


def sample_dataset(graphs: Mapping[str, NavGraph], config: SampleConfig, pre_explore: bool = False,
                   stats: dict | None = None) -> list[Trajectory]:
    """Sample up to ``per_env_cap`` trajectories per environment, environments in id order.

    Each environment draws from its own seed derived from (seed, env_id).
    """
    if not graphs:
        raise ValueError("no environments to sample from")
    out = []
    for env_id in sorted(graphs):
        trajs, st = _sample_env(env_id, graphs[env_id], config, pre_explore)
        if stats is not None:
            stats[env_id] = st
        out.extend(trajs)
    return out


def pre_exploration_sample(graphs: Mapping[str, NavGraph], splits: Mapping[str, str], config: SampleConfig,
                           stats: dict | None = None) -> list[Trajectory]:
    """Like :func:`sample_dataset` over val_unseen/test environments only, tagged ``pre_explore``."""
    chosen = {k: g for k, g in graphs.items() if splits[k] in PRE_EXPLORE_SPLITS}
    if not chosen:
        return []
    return sample_dataset(chosen, config, pre_explore=True, stats=stats)


def dataset_stats(trajs: Sequence[Trajectory]) -> dict:
    per_env: dict[str, int] = {}
    for t in trajs:
        per_env[t.env_id] = per_env.get(t.env_id, 0) + 1
    return {
        "count": len(trajs),
        "mean_steps": float(np.mean([t.steps for t in trajs])) if trajs else 0.0,
        "mean_length_m": float(np.mean([t.length_m for t in trajs])) if trajs else 0.0,
        "per_env": dict(sorted(per_env.items())),
    }


def write_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_dict()) + "\n")


def read_trajectories(path, graphs: Mapping[str, NavGraph] | None = None,
                      config: SampleConfig | None = None) -> list[Trajectory]:
    """Load a JSONL trajectory file, revalidating each record when graphs are supplied."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        t = Trajectory.from_dict(json.loads(line))
        if graphs is not None:
            try:
                t.validate(graphs[t.env_id], config.max_length_m if config else None,
                           config.max_steps if config else None)
            except (ValueError, KeyError) as err:
                raise ValueError(f"{path}:{lineno}: {err}") from err
        out.append(t)
    return out
