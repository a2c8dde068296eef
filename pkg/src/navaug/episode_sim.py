"""Panoramic navigation simulator over a navigation graph.

Headings are radians clockwise from +y ("north").  The 36 views are
ordered by (elevation, heading): view ``e * 12 + k`` looks at heading
``30 * k`` degrees and elevation ``(-30, 0, 30)[e]``.  Direction bucket 36
is reserved for STOP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .env_synth import N_VIEWS, FeatureStore
from .nav_graph import NavGraph
from .traj_sampler import Trajectory

STOP = -1
STOP_BUCKET = 36
N_BUCKETS = 37
N_HEADINGS = 12
ELEVATIONS_DEG = (-30.0, 0.0, 30.0)
TWO_PI = 2.0 * math.pi


def normalize_heading(theta: float) -> float:
    h = math.fmod(float(theta), TWO_PI)
    if h < 0:
        h += TWO_PI
    return 0.0 if h >= TWO_PI else h


def heading_bin(theta: float) -> int:
    """Nearest 30-degree heading bin; exact half-way ties round up."""
    deg = math.degrees(normalize_heading(theta))
    return int(math.floor(deg / 30.0 + 0.5)) % N_HEADINGS


def elevation_bin(elevation: float) -> int:
    """Nearest of the three elevation rows; angles beyond +-30 degrees clamp to the outer rows."""
    deg = math.degrees(elevation)
    return int(np.argmin([abs(deg - e) for e in ELEVATIONS_DEG]))


def bearing(src_pos, dst_pos) -> float:
    dx = dst_pos[0] - src_pos[0]
    dy = dst_pos[1] - src_pos[1]
    return normalize_heading(math.atan2(dx, dy))


def view_heading(view: int) -> float:
    return math.radians(30.0 * (view % N_HEADINGS))


def abs_view_bucket(view: int) -> int:
    return view


def rel_view_bucket(view: int, agent_heading: float) -> int:
    e = view // N_HEADINGS
    return e * N_HEADINGS + heading_bin(view_heading(view) - agent_heading)


@dataclass(frozen=True)
class EpisodeState:
    env_id: str
    current_node: int
    heading: float
    t: int
    trace: tuple[int, ...]
    done: bool = False
    max_steps: int = 36
    headings: tuple[float, ...] = ()
    actions: tuple[int, ...] = ()
    done_reason: str | None = None


@dataclass(frozen=True)
class View:
    feature: np.ndarray
    abs_bucket: int
    rel_bucket: int


@dataclass(frozen=True)
class Observation:
    views: tuple[View, ...]

    @property
    def features(self) -> np.ndarray:
        return np.stack([v.feature for v in self.views])

    @property
    def rel_buckets(self) -> list[int]:
        return [v.rel_bucket for v in self.views]


@dataclass(frozen=True)
class ActionCandidate:
    target: int
    feature: np.ndarray = field(repr=False)
    abs_bucket: int
    rel_bucket: int

    @property
    def is_stop(self) -> bool:
        return self.target == STOP


def default_max_steps(gt_steps: int) -> int:
    return 2 * gt_steps + 4


class Simulator:
    """Stateless simulator bound to one environment's graph and features."""

    def __init__(self, graph: NavGraph, features: FeatureStore, env_id: str = ""):
        self.graph = graph
        self.features = features
        self.env_id = env_id
        self._zero = np.zeros(features.dim, dtype=np.float32)

    def reset(self, trajectory: Trajectory, init_heading: float, start_node: int | None = None,
              max_steps: int | None = None) -> EpisodeState:
        trajectory.validate(self.graph)
        start = trajectory.start if start_node is None else int(start_node)
        if start not in self.graph:
            raise ValueError(f"start node {start} not in graph")
        heading = normalize_heading(init_heading)
        return EpisodeState(
            env_id=trajectory.env_id or self.env_id,
            current_node=start,
            heading=heading,
            t=0,
            trace=(start,),
            max_steps=default_max_steps(trajectory.steps) if max_steps is None else int(max_steps),
            headings=(heading,),
        )

    def observe(self, state: EpisodeState) -> Observation:
        if state.done:
            raise ValueError("episode is finished")
        feats = self.features.views(state.current_node)
        return Observation(tuple(
            View(feats[v], abs_view_bucket(v), rel_view_bucket(v, state.heading)) for v in range(N_VIEWS)
        ))

    def direction_view(self, src: int, dst: int) -> tuple[int, float]:
        """Nearest view index looking from ``src`` towards ``dst``, plus the exact bearing."""
        a = self.graph.node(src).position
        b = self.graph.node(dst).position
        theta = bearing(a, b)
        horiz = math.hypot(b[0] - a[0], b[1] - a[1])
        e = elevation_bin(math.atan2(b[2] - a[2], horiz))
        return e * N_HEADINGS + heading_bin(theta), theta

    def candidates(self, state: EpisodeState) -> list[ActionCandidate]:
        if state.done:
            raise ValueError("episode is finished")
        feats = self.features.views(state.current_node)
        out = []
        for nb in self.graph.neighbors(state.current_node):
            view, theta = self.direction_view(state.current_node, nb)
            e = view // N_HEADINGS
            out.append(ActionCandidate(nb, feats[view], view, e * N_HEADINGS + heading_bin(theta - state.heading)))
        out.append(ActionCandidate(STOP, self._zero, STOP_BUCKET, STOP_BUCKET))
        return out

    def step(self, state: EpisodeState, action) -> EpisodeState:
        """Apply ``action`` (an :class:`ActionCandidate` or a target node id / ``STOP``)."""
        if state.done:
            raise ValueError("episode is finished")
        target = action.target if isinstance(action, ActionCandidate) else int(action)
        if target == STOP:
            return replace(state, done=True, actions=state.actions + (STOP,), done_reason="stop")
        if not self.graph.has_edge(state.current_node, target):
            raise ValueError(f"node {target} is not a candidate from {state.current_node}")
        heading = bearing(self.graph.node(state.current_node).position, self.graph.node(target).position)
        t = state.t + 1
        capped = t >= state.max_steps
        return replace(
            state,
            current_node=target,
            heading=heading,
            t=t,
            trace=state.trace + (target,),
            headings=state.headings + (heading,),
            actions=state.actions + (target,),
            done=capped,
            done_reason="cap" if capped else None,
        )

    def replay(self, trajectory: Trajectory, init_heading: float, actions: Sequence[int],
               start_node: int | None = None) -> EpisodeState:
        state = self.reset(trajectory, init_heading, start_node)
        for a in actions:
            state = self.step(state, a)
        return state


def episode_record(state: EpisodeState, instruction_id: str = "") -> dict:
    return {
        "env_id": state.env_id,
        "instruction_id": instruction_id,
        "trace": list(state.trace),
        "headings": list(state.headings),
        "actions": list(state.actions),
        "done_reason": state.done_reason,
    }
