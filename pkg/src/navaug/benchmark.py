"""Fixed desk-scale learning benchmark: synthetic instructions over generated environments.

Used by the acceptance suite to compare random, BC and one-iteration DAGGER
policies, and by the pipeline to pair sampled trajectories with instructions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ._seeding import rng_for
from .env_synth import EnvParams, Environment, generate_features, generate_suite
from .episode_sim import Simulator
from .il_pipeline import (
    Episode,
    LinearPolicy,
    RandomPolicy,
    dagger_iteration,
    emit_dataset,
    evaluate_policy,
    make_instruction,
    perturb_start,
)
from .il_pipeline.examples import DEFAULT_VOCAB
from .traj_sampler import SampleConfig, Trajectory, sample_dataset


def make_episodes(trajs: Sequence[Trajectory], sims: Mapping[str, Simulator], seed: int,
                  vocab_size: int = DEFAULT_VOCAB, token_noise: float = 0.1) -> list[Episode]:
    """One synthetic instruction and a uniform initial heading per trajectory.

    Every trajectory draws from its own derived stream, so the result does
    not depend on the order or grouping of ``trajs``.
    """
    out = []
    for t in trajs:
        rng = rng_for(seed, "instruction", t.env_id, t.traj_id)
        heading = float(rng.uniform(0.0, 2 * math.pi))
        instr = make_instruction(t, sims[t.env_id], heading, rng, t.traj_id, vocab_size, token_noise)
        out.append(Episode(instr, t, heading))
    return out


def split_episodes(episodes: Sequence[Episode], n_train: int, seed: int) -> tuple[list[Episode], list[Episode]]:
    eps = sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id))
    if not 0 < n_train < len(eps):
        raise ValueError(f"n_train must lie in (0, {len(eps)}), got {n_train}")
    order = rng_for(seed, "split").permutation(len(eps))
    train = sorted((eps[k] for k in order[:n_train]), key=lambda e: (e.trajectory.env_id, e.instruction.id))
    test = sorted((eps[k] for k in order[n_train:]), key=lambda e: (e.trajectory.env_id, e.instruction.id))
    return train, test


def perturb_episodes(episodes: Sequence[Episode], sims: Mapping[str, Simulator], seed: int) -> list[Episode]:
    out = []
    for ep in episodes:
        rng = rng_for(seed, "perturb", ep.trajectory.env_id, ep.instruction.id)
        out.append(perturb_start(ep, sims[ep.trajectory.env_id], rng))
    return out


@dataclass
class Benchmark:
    envs: list[Environment]
    sims: dict[str, Simulator]
    train: list[Episode]
    test: list[Episode]
    seed: int = 0
    perturbed_test: list[Episode] = field(default_factory=list)


def build_benchmark(seed: int = 0, n_envs: int = 10, n_instructions: int = 200, n_train: int = 140,
                    feature_dim: int = 640, env_params: EnvParams | None = None,
                    token_noise: float = 0.1) -> Benchmark:
    envs = generate_suite(n_envs, seed, env_params)
    sims = {e.id: Simulator(e.reference_graph, generate_features(e, seed, feature_dim), e.id) for e in envs}
    cap = math.ceil(n_instructions / n_envs)
    trajs = sample_dataset({e.id: e.reference_graph for e in envs}, SampleConfig(per_env_cap=cap, seed=seed))
    if len(trajs) < n_instructions:
        raise RuntimeError(f"only {len(trajs)} trajectories sampled, need {n_instructions}")
    trajs = trajs[:n_instructions]
    episodes = make_episodes(trajs, sims, seed, token_noise=token_noise)
    train, test = split_episodes(episodes, n_train, seed)
    return Benchmark(envs, sims, train, test, seed, perturb_episodes(test, sims, seed))


def run_learning_benchmark(bench: Benchmark, policy_kw: dict | None = None, dagger_perturb: bool = False) -> dict:
    """SR of random, BC and one-iteration DAGGER policies on clean and perturbed-start test episodes."""
    kw = {"seed": bench.seed, **(policy_kw or {})}
    examples = emit_dataset(bench.train, bench.sims)
    bc = LinearPolicy(**kw).fit(examples)
    agg, new = dagger_iteration(bc, examples, bench.train, bench.sims, rng_for(bench.seed, "dagger"),
                                perturb=dagger_perturb)
    dagger = LinearPolicy(**kw).fit(agg)

    def sr(policy, episodes):
        return evaluate_policy(policy, episodes, bench.sims)[0]["sr"]

    out = {"n_train_examples": len(examples), "n_dagger_examples": len(new),
           "bc_train_accuracy": bc.score(examples)}
    for name, pol in (("random", RandomPolicy(bench.seed)), ("bc", bc), ("dagger", dagger)):
        out[f"{name}_sr"] = sr(pol, bench.test)
        if isinstance(pol, RandomPolicy):
            pol = RandomPolicy(bench.seed)
        out[f"{name}_sr_perturbed"] = sr(pol, bench.perturbed_test)
    out["policies"] = {"bc": bc, "dagger": dagger}
    return out
