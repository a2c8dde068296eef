"""Policy rollouts, DAGGER aggregation and evaluation."""

from __future__ import annotations

from dataclasses import replace
from typing import Mapping, Sequence

import numpy as np

from ..dagger_expert import ExpertContext, expert_action
from ..episode_sim import EpisodeState, Simulator
from ..metrics import EvalResult, aggregate, evaluate_episode
from .examples import Episode, StepExample, emit_step_examples, label_step, observe_step


class RandomPolicy:
    """Uniform choice over the candidate set (STOP included)."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, example: StepExample, state=None, ctx=None) -> int:
        return int(self.rng.integers(len(example.candidates)))


class ExpertPolicy:
    """Acts with the expert oracle; needs the episode's :class:`ExpertContext`."""

    def act(self, example: StepExample, state: EpisodeState, ctx: ExpertContext) -> int:
        return example.candidate_index(expert_action(ctx, state))


class StopPolicy:
    def act(self, example: StepExample, state=None, ctx=None) -> int:
        return len(example.candidates) - 1


def expert_context(episode: Episode, sims: Mapping[str, Simulator]) -> ExpertContext:
    return ExpertContext.build(sims[episode.trajectory.env_id].graph, episode.trajectory)


def rollout(policy, episode: Episode, sim: Simulator, ctx: ExpertContext, label: bool = False):
    """Greedy rollout of ``policy``; with ``label=True`` every visited state is expert-labeled.

    Returns the final state and the (possibly labeled) examples in visit order.
    """
    state = sim.reset(episode.trajectory, episode.init_heading, episode.start_node)
    history = []
    examples = []
    while not state.done:
        ex = observe_step(episode.instruction, state, sim, history)
        k = policy.act(ex, state, ctx)
        chosen = ex.candidates[k]
        if label:
            ex = label_step(ex, expert_action(ctx, state), episode.trajectory.steps)
        examples.append(ex)
        history.append((ex.pooled_obs, chosen.rel_bucket))
        state = sim.step(state, chosen)
    return state, examples


def perturb_start(episode: Episode, sim: Simulator, rng: np.random.Generator) -> Episode:
    """Start the episode one random step away from the GT start."""
    nbs = sim.graph.neighbors(episode.trajectory.start)
    if not nbs:
        return episode
    return replace(episode, start_node=int(nbs[int(rng.integers(len(nbs)))]))


def emit_dataset(episodes: Sequence[Episode], sims: Mapping[str, Simulator], mask_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> list[StepExample]:
    """Expert-labeled examples for every episode, ordered by (env_id, instruction_id, t)."""
    out = []
    for ep in sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id)):
        sim = sims[ep.trajectory.env_id]
        out.extend(emit_step_examples(ep, sim, expert_context(ep, sims), mask_rate, rng))
    return out


def dagger_iteration(policy, examples: Sequence[StepExample], episodes: Sequence[Episode],
                     sims: Mapping[str, Simulator], rng: np.random.Generator | None = None,
                     perturb: bool = False) -> tuple[list[StepExample], list[StepExample]]:
    """Roll out ``policy`` on each episode and label every visited state with the expert.

    Returns ``(original + new, new)``; nothing is deduplicated.  With
    ``perturb=True`` each rollout starts one random step off the GT start.
    """
    new = []
    for ep in sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id)):
        sim = sims[ep.trajectory.env_id]
        if perturb:
            ep = perturb_start(ep, sim, rng)
        _, labeled = rollout(policy, ep, sim, expert_context(ep, sims), label=True)
        new.extend(labeled)
    return list(examples) + new, new


def evaluate_policy(policy, episodes: Sequence[Episode], sims: Mapping[str, Simulator]):
    """Greedy rollouts scored against each episode's GT path.

    Returns ``(summary, results, final_states)``; ``summary`` is :func:`aggregate`'s dict.
    """
    results: list[EvalResult] = []
    finals: list[EpisodeState] = []
    for ep in episodes:
        sim = sims[ep.trajectory.env_id]
        state, _ = rollout(policy, ep, sim, expert_context(ep, sims))
        finals.append(state)
        results.append(evaluate_episode(sim.graph, state.trace, ep.trajectory.nodes, ep.instruction.id))
    return aggregate(results), results, finals


__all__ = ["RandomPolicy", "ExpertPolicy", "StopPolicy", "rollout", "perturb_start", "emit_dataset",
           "dagger_iteration", "evaluate_policy", "expert_context"]
