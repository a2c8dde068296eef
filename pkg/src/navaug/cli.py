"""``navaug`` command line: one subcommand per stage plus ``pipeline`` and ``report``.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from ._seeding import derive_seed, rng_for
from .benchmark import make_episodes, perturb_episodes
from .config import ConfigError, RunConfig, load_config
from .env_synth import (
    EnvParams,
    generate_features,
    generate_suite,
    list_environment_dirs,
    load_environment,
    load_features,
    oracle_edge_probability,
    save_environment,
)
from .episode_sim import Simulator, episode_record
from .graph_builder import DEFAULT_GRID, EdgeRuleParams, NavGraphBuilder, build_graph
from .il_pipeline import Episode, LinearPolicy, dagger_iteration, emit_dataset, evaluate_policy
from .il_pipeline import read_step_dataset, write_step_dataset
from .nav_graph import NavGraph
from .pipeline import REFERENCE, StageError, evaluate_rollouts, report, resolve_root, run_pipeline
from .traj_sampler import SampleConfig, dataset_stats, read_trajectories, sample_dataset
from .traj_sampler import write_trajectories

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _envs(root):
    dirs = list_environment_dirs(root)
    if not dirs:
        raise ConfigError(f"no environment bundles under {root}")
    return [load_environment(d) for d in dirs]


def load_graphs(path) -> dict[str, NavGraph]:
    """Graphs keyed by env id from a directory of ``<env_id>.json`` files or of environment bundles."""
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{p} is not a directory")
    bundles = list_environment_dirs(p)
    if bundles:
        return {e.id: e.reference_graph for e in map(load_environment, bundles)}
    files = sorted(f for f in p.glob("*.json") if f.name != "params.json")
    if not files:
        raise ConfigError(f"no graphs under {p}")
    return {f.stem: NavGraph.load(f) for f in files}


def _sims(envs_dir, graphs_dir=None) -> dict[str, Simulator]:
    envs = _envs(envs_dir)
    graphs = load_graphs(graphs_dir) if graphs_dir else {e.id: e.reference_graph for e in envs}
    return {e.id: Simulator(graphs[e.id], load_features(Path(envs_dir) / e.id, e), e.id) for e in envs}


def _read_episodes(path) -> list[Episode]:
    return [Episode.from_dict(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]


# -- subcommands ---------------------------------------------------------------

def cmd_generate(a) -> int:
    params = EnvParams(n_rooms=a.n_rooms, pano_density=a.pano_density)
    envs = generate_suite(a.n_envs, a.seed, params, a.splits)
    for env in envs:
        save_environment(env, Path(a.out) / env.id, generate_features(env, derive_seed(a.seed, "features"),
                                                                        a.feature_dim))
    print(f"wrote {len(envs)} environments to {a.out}")
    return EXIT_OK


def cmd_build_graph(a) -> int:
    env = load_environment(a.env)
    prov = oracle_edge_probability(env, a.sigma, a.seed)
    graph = build_graph(env, prov, EdgeRuleParams(a.lambda_d, a.lambda_p))
    graph.save(a.out)
    print(f"{env.id}: {len(graph)} nodes, {len(graph.edges)} edges -> {a.out}")
    return EXIT_OK


def cmd_fit_lambdas(a) -> int:
    envs = [e for d in a.envs for e in _envs(d)]
    scenes = [(e, oracle_edge_probability(e, a.sigma, a.seed)) for e in envs]
    b = NavGraphBuilder(lambda_d_grid=DEFAULT_GRID, lambda_p_grid=DEFAULT_GRID)
    b.fit(scenes, [e.reference_graph for e in envs])
    q = b.quality_
    out = {"lambda_d": b.lambda_d_, "lambda_p": b.lambda_p_, "f1": q.f1, "precision": q.precision,
           "recall": q.recall}
    _dump(out, a.out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_sample(a) -> int:
    graphs = load_graphs(a.graphs or a.envs)
    cfg = SampleConfig(per_env_cap=a.cap, seed=a.seed)
    trajs = sample_dataset(graphs, cfg)
    write_trajectories(a.out, trajs)
    print(f"wrote {len(trajs)} trajectories to {a.out}")
    return EXIT_OK


def cmd_stats(a) -> int:
    st = dataset_stats(read_trajectories(a.input))
    ref = REFERENCE["sample"]
    print(f"count        {st['count']:>10d}   reference (not reproducible at desk scale): "
          f"{ref['count']:,}")
    print(f"mean steps   {st['mean_steps']:>10.2f}   reference (not reproducible at desk scale): "
          f"{ref['mean_steps']}")
    print(f"mean length  {st['mean_length_m']:>10.2f}   reference (not reproducible at desk scale): "
          f"{ref['mean_length_m']} m")
    return EXIT_OK


def cmd_emit(a) -> int:
    sims = _sims(a.envs, a.graphs)
    if a.episodes:
        episodes = _read_episodes(a.episodes)
    elif not a.trajs:
        raise ConfigError("emit needs --trajs or --episodes")
    else:
        trajs = read_trajectories(a.trajs, {k: s.graph for k, s in sims.items()})
        episodes = make_episodes(trajs, sims, derive_seed(a.seed, "instructions"))
    examples = emit_dataset(episodes, sims, a.mask_rate, rng_for(a.seed, "emit"))
    out = write_step_dataset(a.out, examples)
    (out / "episodes.jsonl").write_text("".join(json.dumps(e.to_dict()) + "\n" for e in episodes))
    print(f"wrote {len(examples)} step examples from {len(episodes)} episodes to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    examples = read_step_dataset(a.ds)
    kw = dict(seed=a.seed, epochs=a.epochs, vocab_size=examples[0].vocab_size)
    policy = LinearPolicy(**kw).fit(examples)
    if a.mode == "dagger":
        if not a.envs:
            raise ConfigError("--mode dagger needs --envs")
        sims = _sims(a.envs, a.graphs)
        episodes = _read_episodes(a.episodes or Path(a.ds) / "episodes.jsonl")
        agg, new = dagger_iteration(policy, examples, episodes, sims, rng_for(a.seed, "dagger"), a.perturb_start)
        print(f"dagger: {len(new)} new examples")
        policy = LinearPolicy(**kw).fit(agg)
    policy.save(a.out)
    print(f"final loss {policy.loss_curve_[-1]:.4f}; policy -> {a.out}")
    return EXIT_OK


def cmd_rollout(a) -> int:
    sims = _sims(a.envs, a.graphs)
    policy = LinearPolicy.load(a.policy)
    episodes = _read_episodes(a.episodes)
    if a.perturb_start:
        episodes = perturb_episodes(episodes, sims, a.seed)
    _, _, finals = evaluate_policy(policy, episodes, sims)
    with open(a.out, "w") as fh:
        for ep, st in zip(episodes, finals):
            fh.write(json.dumps(episode_record(st, ep.instruction.id)) + "\n")
    print(f"wrote {len(finals)} rollouts to {a.out}")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    graphs = load_graphs(a.graphs)
    trajs = read_trajectories(a.trajs)
    by_id = {t.traj_id: t for t in trajs}
    records = [json.loads(l) for l in Path(a.rollouts).read_text().splitlines() if l.strip()]
    rep = evaluate_rollouts(graphs, by_id, records)
    _dump(rep, a.out)
    agg = rep["aggregate"]
    print(" ".join(f"{k}={agg[k]:.4g}" for k in ("ne_m", "sr", "spl", "ndtw", "sdtw")))
    return EXIT_OK


def cmd_pipeline(a) -> int:
    cfg = load_config(a.config) if a.config else RunConfig()
    manifest = run_pipeline(cfg, a.out_root, a.jobs, log=lambda m: print(m, file=sys.stderr))
    root = resolve_root(cfg, a.out_root)
    print(f"pipeline finished: {len(manifest['stages'])} stage(s); manifest at {root / 'manifest.json'}")
    return EXIT_OK


def cmd_report(a) -> int:
    try:
        manifest = json.loads(Path(a.manifest).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read manifest {a.manifest}: {err}") from err
    text = report(manifest, a.out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_config(a) -> int:
    cfg = load_config(a.input) if a.input else RunConfig()
    sys.stdout.write(cfg.canonical())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navaug", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="generate environment bundles")
    s.add_argument("--n-envs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-rooms", type=int, default=4)
    s.add_argument("--pano-density", type=float, default=0.35)
    s.add_argument("--feature-dim", type=int, default=640)
    s.add_argument("--splits", nargs="+", default=["train"])
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("build-graph", help="build one graph with the edge rule")
    s.add_argument("--env", required=True)
    s.add_argument("--lambda-d", type=float, required=True)
    s.add_argument("--lambda-p", type=float, required=True)
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_graph)

    s = sub.add_parser("fit-lambdas", help="grid-search lambda_d, lambda_p against reference graphs")
    s.add_argument("--envs", nargs="+", required=True)
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_lambdas)

    s = sub.add_parser("sample", help="sample trajectories")
    s.add_argument("--envs", required=True)
    s.add_argument("--graphs", help="directory of built <env_id>.json graphs (default: reference graphs)")
    s.add_argument("--cap", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("stats", help="trajectory dataset statistics")
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("emit", help="pair trajectories with instructions and emit step examples")
    s.add_argument("--trajs")
    s.add_argument("--episodes", help="episodes JSONL (instead of --trajs)")
    s.add_argument("--envs", required=True)
    s.add_argument("--graphs")
    s.add_argument("--mask-rate", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_emit)

    s = sub.add_parser("train", help="train a policy by BC, optionally followed by one DAGGER iteration")
    s.add_argument("--ds", required=True)
    s.add_argument("--mode", choices=("bc", "dagger"), default="bc")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--envs")
    s.add_argument("--graphs")
    s.add_argument("--episodes")
    s.add_argument("--perturb-start", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("rollout", help="greedy policy rollouts")
    s.add_argument("--policy", required=True)
    s.add_argument("--episodes", required=True)
    s.add_argument("--envs", required=True)
    s.add_argument("--graphs")
    s.add_argument("--perturb-start", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_rollout)

    s = sub.add_parser("evaluate", help="score rollouts against ground-truth trajectories")
    s.add_argument("--trajs", required=True)
    s.add_argument("--rollouts", required=True)
    s.add_argument("--graphs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("pipeline", help="run the configured stages end to end")
    s.add_argument("--config")
    s.add_argument("--out-root", help="overrides the config and $NAVAUG_OUTPUT_ROOT")
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("report", help="render a manifest as markdown")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("config", help="print a config (or the defaults) in canonical form")
    s.add_argument("--in", dest="input")
    s.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as err:
        print(str(err), file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, KeyError, OSError, RuntimeError) as err:
        print(f"{args.command} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
