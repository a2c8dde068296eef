"""End-to-end pipeline: environments -> graphs -> trajectories -> instructions -> IL -> evaluation.

Every stage reads its inputs from, and writes its outputs under, the run's
output root.  ``manifest.json`` records per-stage output hashes, derived
seeds and statistics; wall-clock data lives only under ``timings`` and
``created`` so two runs of one config differ nowhere else.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._seeding import derive_seed, rng_for
from .benchmark import make_episodes, perturb_episodes, split_episodes
from .config import STAGES, RunConfig
from .env_synth import (
    EnvParams,
    generate_environment,
    generate_features,
    list_environment_dirs,
    load_environment,
    load_features,
    oracle_edge_probability,
    save_environment,
)
from .episode_sim import Simulator, episode_record
from .graph_builder import NavGraphBuilder, graph_quality
from .il_pipeline import (
    Episode,
    LinearPolicy,
    dagger_iteration,
    emit_dataset,
    evaluate_policy,
    read_step_dataset,
    write_step_dataset,
)
from .metrics import aggregate, evaluate_episode
from .nav_graph import NavGraph, is_connected
from .traj_sampler import (
    PRE_EXPLORE_SPLITS,
    SampleConfig,
    dataset_stats,
    read_trajectories,
    sample_dataset,
    write_trajectories,
)

OUTPUT_ROOT_ENV = "NAVAUG_OUTPUT_ROOT"
MANIFEST = "manifest.json"

# Paper-scale figures shown next to desk-scale results; never compared against.
REFERENCE = {
    "graphs": {"f1": 0.70, "precision": 0.695, "recall": 0.713, "mean_degree": 4.15},
    "sample": {"count": 1_060_000, "mean_steps": 7.1, "mean_length_m": 19.3},
    "evaluate": {"ne_m": 5.5, "sr": 60.7, "ndtw": 66.8, "sdtw": 53.5},
}
REFERENCE_LABEL = "reference (not reproducible at desk scale)"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _episodes_read(path: Path) -> list[Episode]:
    return [Episode.from_dict(json.loads(l)) for l in path.read_text().splitlines() if l.strip()]


def _episodes_write(path: Path, episodes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(e.to_dict()) + "\n" for e in episodes))


class Run:
    """Paths and lazily loaded artifacts of one output root."""

    def __init__(self, config: RunConfig, root: Path, jobs: int = 1):
        self.config = config
        self.root = root
        self.jobs = jobs
        self._envs = None

    @property
    def seed(self) -> int:
        return self.config.seed

    def require(self, stage: str, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise StageError(stage, f"missing input {p.relative_to(self.root)}; run its producing stage first")

    def envs(self, stage: str):
        if self._envs is None:
            dirs = list_environment_dirs(self.root / "envs")
            if not dirs:
                raise StageError(stage, "no environments under envs/; run 'generate' first")
            self._envs = [load_environment(d) for d in dirs]
        return self._envs

    def graphs(self, stage: str) -> dict[str, NavGraph]:
        """Built graphs when the graphs stage has run, reference graphs otherwise."""
        out = {}
        for env in self.envs(stage):
            p = self.root / "graphs" / f"{env.id}.json"
            out[env.id] = NavGraph.load(p) if p.exists() else env.reference_graph
        return out

    def sims(self, stage: str) -> dict[str, Simulator]:
        graphs = self.graphs(stage)
        return {e.id: Simulator(graphs[e.id], load_features(self.root / "envs" / e.id, e), e.id)
                for e in self.envs(stage)}


# -- stages --------------------------------------------------------------------

def _generate_one(args):
    seed, k, params, split, dim, root = args
    env_id = f"env{k:03d}"
    env = generate_environment(derive_seed(seed, "env", k), params, env_id=env_id, split=split)
    feats = generate_features(env, derive_seed(seed, "features"), dim)
    save_environment(env, Path(root) / "envs" / env_id, feats)
    g = env.reference_graph
    return env_id, len(g), len(g.edges)


def stage_generate(run: Run) -> dict:
    c = run.config.generate
    params = EnvParams(c.n_rooms, c.room_size, c.pano_density, c.cell_size, c.door_width, c.extra_door_prob)
    splits = list(c.splits) or ["train"]
    jobs = [(run.seed, k, params, splits[k % len(splits)], c.feature_dim, str(run.root)) for k in range(c.n_envs)]
    rows = _pmap(_generate_one, jobs, run.jobs)
    n_nodes = [r[1] for r in rows]
    n_edges = [r[2] for r in rows]
    run._envs = None
    return {
        "n_envs": len(rows),
        "panos_total": int(sum(n_nodes)),
        "mean_panos": float(np.mean(n_nodes)),
        "mean_degree": float(2 * sum(n_edges) / sum(n_nodes)),
    }


def _build_one(args):
    env, sigma, seed, params = args
    prov = oracle_edge_probability(env, sigma, seed)
    return NavGraphBuilder(params.lambda_d, params.lambda_p).transform([(env, prov)])[0]


def stage_graphs(run: Run) -> dict:
    c = run.config.graphs
    envs = run.envs("graphs")
    seed = derive_seed(run.seed, "graphs")
    scenes = [(e, oracle_edge_probability(e, c.sigma, seed)) for e in envs]
    grid = c.grid()
    builder = NavGraphBuilder(lambda_d_grid=grid, lambda_p_grid=grid).fit(scenes, [e.reference_graph for e in envs])
    built = _pmap(_build_one, [(e, c.sigma, seed, builder.params_) for e in envs], run.jobs)
    post = None
    degrees = []
    (run.root / "graphs").mkdir(exist_ok=True)
    for env, graph in zip(envs, built):
        graph.save(run.root / "graphs" / f"{env.id}.json")
        q = graph_quality(graph, env.reference_graph)
        post = q if post is None else post + q
        degrees.append(2 * len(graph.edges) / len(graph))
    pre = builder.quality_
    params = {"lambda_d": builder.lambda_d_, "lambda_p": builder.lambda_p_, "f1": pre.f1,
              "precision": pre.precision, "recall": pre.recall}
    _write_json(run.root / "graphs" / "params.json", params)
    connected = [is_connected(g) for g in built]
    return {
        "sigma": c.sigma,
        "lambda_d": builder.lambda_d_,
        "lambda_p": builder.lambda_p_,
        "pre_mst": pre.as_dict(),
        "post_mst": post.as_dict(),
        "connected_fraction": float(np.mean(connected)),
        "mean_degree": float(np.mean(degrees)),
    }


def _sample_one(args):
    env_id, graph, cfg, pre = args
    return sample_dataset({env_id: graph}, cfg, pre_explore=pre)


def stage_sample(run: Run) -> dict:
    c = run.config.sample
    graphs = run.graphs("sample")
    splits = {e.id: e.split for e in run.envs("sample")}
    cfg = SampleConfig(c.waypoints, c.max_length_m, c.max_steps, c.per_env_cap, derive_seed(run.seed, "sample"),
                       c.attempts_factor)
    jobs = [(k, graphs[k], cfg, False) for k in sorted(graphs)]
    if c.pre_explore:
        pre_cfg = replace(cfg, seed=derive_seed(run.seed, "pre_explore"))
        jobs += [(k, graphs[k], pre_cfg, True) for k in sorted(graphs) if splits[k] in PRE_EXPLORE_SPLITS]
    trajs = []
    for part in _pmap(_sample_one, jobs, run.jobs):
        trajs.extend(replace(t, traj_id="pre:" + t.traj_id) if t.pre_explore else t for t in part)
    write_trajectories(run.root / "trajs.jsonl", trajs)
    st = dataset_stats(trajs)
    st["pre_explore"] = sum(t.pre_explore for t in trajs)
    return st


def stage_instructions(run: Run) -> dict:
    c = run.config.instructions
    path = run.root / "trajs.jsonl"
    run.require("instructions", path)
    sims = run.sims("instructions")
    s = run.config.sample
    trajs = read_trajectories(path, {k: v.graph for k, v in sims.items()},
                              SampleConfig(max_length_m=s.max_length_m, max_steps=s.max_steps))
    episodes = make_episodes(trajs, sims, derive_seed(run.seed, "instructions"), c.vocab_size, c.token_noise)
    pre = [e for e in episodes if e.trajectory.pre_explore]
    regular = [e for e in episodes if not e.trajectory.pre_explore]
    if len(regular) < 2:
        raise StageError("instructions", f"need at least 2 sampled trajectories, got {len(regular)}")
    n_train = min(max(1, round(c.train_fraction * len(regular))), len(regular) - 1)
    train, test = split_episodes(regular, n_train, derive_seed(run.seed, "split"))
    train = sorted(train + pre, key=lambda e: (e.trajectory.env_id, e.instruction.id))
    _episodes_write(run.root / "episodes" / "train.jsonl", train)
    _episodes_write(run.root / "episodes" / "eval.jsonl", test)
    return {"train": len(train), "eval": len(test), "pre_explore_train": len(pre)}


def stage_emit(run: Run) -> dict:
    path = run.root / "episodes" / "train.jsonl"
    run.require("emit", path)
    sims = run.sims("emit")
    examples = emit_dataset(_episodes_read(path), sims, run.config.emit.mask_rate, rng_for(run.seed, "emit"))
    write_step_dataset(run.root / "ds", examples)
    masked = sum(1 for ex in examples if ex.labels.masked_tokens)
    return {"examples": len(examples), "examples_with_masked_tokens": masked}


def _policy(c, seed: int, vocab: int) -> LinearPolicy:
    return LinearPolicy(embed_dim=c.embed_dim, vocab_size=vocab, epochs=c.epochs, batch_size=c.batch_size,
                        learning_rate=c.learning_rate, optimizer=c.optimizer, l2=c.l2,
                        loss_weights=tuple(c.loss_weights), seed=seed)


def stage_train(run: Run) -> dict:
    c = run.config.train
    ds = run.root / "ds"
    run.require("train", ds / "index.jsonl")
    examples = read_step_dataset(ds)
    vocab = examples[0].vocab_size
    seed = derive_seed(run.seed, "train")
    bc = _policy(c, seed, vocab).fit(examples)
    bc.save(run.root / "policy_bc.json")
    out = {"mode": c.mode, "examples": len(examples), "bc_final_loss": bc.loss_curve_[-1],
           "bc_train_accuracy": bc.score(examples)}
    policy = bc
    if c.mode == "dagger":
        path = run.root / "episodes" / "train.jsonl"
        run.require("train", path)
        sims = run.sims("train")
        agg, new = dagger_iteration(bc, examples, _episodes_read(path), sims, rng_for(run.seed, "dagger"),
                                    perturb=c.dagger_perturb)
        write_step_dataset(run.root / "ds_dagger", new)
        policy = _policy(c, seed, vocab).fit(agg)
        out.update({"dagger_new_examples": len(new), "dagger_final_loss": policy.loss_curve_[-1]})
    policy.save(run.root / "policy.json")
    return out


def _eval_episodes(run: Run, stage: str, sims) -> list[Episode]:
    path = run.root / "episodes" / "eval.jsonl"
    run.require(stage, path)
    eps = _episodes_read(path)
    if run.config.evaluate.perturb_start:
        eps = perturb_episodes(eps, sims, derive_seed(run.seed, "perturb"))
    return eps


def stage_rollout(run: Run) -> dict:
    run.require("rollout", run.root / "policy.json")
    policy = LinearPolicy.load(run.root / "policy.json")
    sims = run.sims("rollout")
    eps = _eval_episodes(run, "rollout", sims)
    _, _, finals = evaluate_policy(policy, eps, sims)
    with open(run.root / "rollouts.jsonl", "w") as fh:
        for ep, st in zip(eps, finals):
            fh.write(json.dumps(episode_record(st, ep.instruction.id)) + "\n")
    reasons = [st.done_reason for st in finals]
    return {"episodes": len(finals), "stopped": reasons.count("stop"), "capped": reasons.count("cap")}


def evaluate_rollouts(graphs, trajs_by_id, records) -> dict:
    """Per-episode metrics and aggregate for rollout records keyed by instruction id."""
    results = []
    for rec in records:
        gt = trajs_by_id.get(rec["instruction_id"])
        if gt is None:
            raise ValueError(f"no ground-truth trajectory for {rec['instruction_id']!r}")
        results.append(evaluate_episode(graphs[rec["env_id"]], rec["trace"], gt.nodes, rec["instruction_id"]))
    return {"aggregate": aggregate(results), "episodes": [r.as_dict() for r in results]}


def stage_evaluate(run: Run) -> dict:
    path = run.root / "rollouts.jsonl"
    run.require("evaluate", path)
    sims = run.sims("evaluate")
    eps = _eval_episodes(run, "evaluate", sims)
    records = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    graphs = {k: s.graph for k, s in sims.items()}
    rep = evaluate_rollouts(graphs, {e.instruction.id: e.trajectory for e in eps}, records)
    bc_path = run.root / "policy_bc.json"
    if run.config.train.mode == "dagger" and bc_path.exists():
        rep["bc_aggregate"] = evaluate_policy(LinearPolicy.load(bc_path), eps, sims)[0]
    _write_json(run.root / "eval" / "report.json", rep)
    stats = dict(rep["aggregate"])
    if "bc_aggregate" in rep:
        stats["bc_sr"] = rep["bc_aggregate"]["sr"]
        stats["bc_ndtw"] = rep["bc_aggregate"]["ndtw"]
    return stats


def stage_report(run: Run) -> dict:
    manifest_path = run.root / MANIFEST
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"stages": {}}
    text = report(manifest)
    (run.root / "report.md").write_text(text)
    return {"lines": text.count("\n")}


_STAGE_FNS = {
    "generate": (stage_generate, ["envs"]),
    "graphs": (stage_graphs, ["graphs"]),
    "sample": (stage_sample, ["trajs.jsonl"]),
    "instructions": (stage_instructions, ["episodes"]),
    "emit": (stage_emit, ["ds"]),
    "train": (stage_train, ["ds_dagger", "policy_bc.json", "policy.json"]),
    "rollout": (stage_rollout, ["rollouts.jsonl"]),
    "evaluate": (stage_evaluate, ["eval"]),
    "report": (stage_report, ["report.md"]),
}

_STAGE_SEEDS = {
    "generate": ("env", "features"), "graphs": ("graphs",), "sample": ("sample", "pre_explore"),
    "instructions": ("instructions", "split"), "emit": ("emit",), "train": ("train", "dagger"),
    "rollout": ("perturb",), "evaluate": ("perturb",), "report": (),
}


def _hash_outputs(root: Path, names) -> dict:
    out = {}
    for name in names:
        p = root / name
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p] if p.exists() else []
        for f in files:
            out[f.relative_to(root).as_posix()] = file_sha256(f)
    return out


def resolve_root(config: RunConfig, override=None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or config.output_root)


def run_pipeline(config: RunConfig, root=None, jobs: int = 1, log=None) -> dict:
    """Run the configured stages in dependency order and write ``manifest.json``.

    Raises :class:`StageError` naming the first stage that fails; the
    manifest then holds the stages completed so far.
    """
    config.validate()
    root = resolve_root(config, root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(config.canonical())
    run = Run(config, root, max(1, int(jobs)))
    manifest = {
        "config_sha256": hashlib.sha256(config.canonical().encode()).hexdigest(),
        "seed": config.seed,
        "stages": {},
        "timings": {},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    requested = [s for s in STAGES if s in config.stages]

    def flush():
        _write_json(root / MANIFEST, manifest)

    for name in requested:
        fn, outputs = _STAGE_FNS[name]
        t0 = time.perf_counter()
        if log:
            log(f"[{name}] running")
        if name == "report":
            flush()
        try:
            stats = fn(run)
        except StageError:
            flush()
            raise
        except Exception as err:  # any stage bug surfaces with the stage named
            flush()
            raise StageError(name, f"{type(err).__name__}: {err}") from err
        manifest["stages"][name] = {
            "seeds": {k: derive_seed(config.seed, k) for k in _STAGE_SEEDS[name]},
            "stats": stats,
            "outputs": {} if name == "report" else _hash_outputs(root, outputs),
        }
        manifest["timings"][name] = round(time.perf_counter() - t0, 3)
    if "report" in manifest["stages"]:
        manifest["stages"]["report"]["outputs"] = _hash_outputs(root, ["report.md"])
    flush()
    return manifest


# -- report --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _table(rows, ref: dict | None = None) -> list[str]:
    head = ["| quantity | value |" + (f" {REFERENCE_LABEL} |" if ref else ""),
            "|---|---|" + ("---|" if ref else "")]
    body = []
    for k, v in rows:
        line = f"| {k} | {_fmt(v)} |"
        if ref:
            line += f" {_fmt(ref[k]) if k in ref else ''} |"
        body.append(line)
    return head + body


def report(manifest: dict, out=None) -> str:
    """Markdown summary of a manifest; timing data is left out so reports are reproducible."""
    stages = manifest.get("stages", {})
    lines = ["# navaug run report", ""]
    if "seed" in manifest:
        lines += [f"seed: {manifest['seed']}", ""]
    if "generate" in stages:
        lines += ["## Environments", ""] + _table(sorted(stages["generate"]["stats"].items())) + [""]
    if "graphs" in stages:
        st = stages["graphs"]["stats"]
        rows = [("lambda_d", st["lambda_d"]), ("lambda_p", st["lambda_p"]), ("sigma", st["sigma"])]
        rows += [(k, st["pre_mst"][k]) for k in ("f1", "precision", "recall")]
        rows += [(f"post_mst_{k}", st["post_mst"][k]) for k in ("f1", "precision", "recall")]
        rows += [("connected_fraction", st["connected_fraction"]), ("mean_degree", st["mean_degree"])]
        lines += ["## Graph quality (pair rule, before MST repair)", ""] + _table(rows, REFERENCE["graphs"]) + [""]
    if "sample" in stages:
        st = stages["sample"]["stats"]
        rows = [(k, st[k]) for k in ("count", "mean_steps", "mean_length_m", "pre_explore")]
        lines += ["## Sampling", ""] + _table(rows, REFERENCE["sample"]) + [""]
    if "instructions" in stages:
        lines += ["## Instructions", ""] + _table(sorted(stages["instructions"]["stats"].items())) + [""]
    if "emit" in stages:
        lines += ["## Step examples", ""] + _table(sorted(stages["emit"]["stats"].items())) + [""]
    if "train" in stages:
        lines += ["## Training", ""] + _table(sorted(stages["train"]["stats"].items())) + [""]
    if "evaluate" in stages:
        st = stages["evaluate"]["stats"]
        rows = [(k, st[k]) for k in ("episodes", "ne_m", "sr", "spl", "ndtw", "sdtw", "bc_sr", "bc_ndtw")
                if k in st]
        ref = dict(REFERENCE["evaluate"])
        ref["ndtw"] = ref["ndtw"] / 100
        ref["sdtw"] = ref["sdtw"] / 100
        lines += ["## Evaluation", "", "SR is a percentage; NDTW/SDTW/SPL lie in [0, 1].", ""]
        lines += _table(rows, ref) + [""]
        hist = st.get("first_error_histogram", {})
        lines += ["### First error step", "", "| step | episodes |", "|---|---|"]
        lines += [f"| {k} | {v} |" for k, v in hist.items()]
        lines += [""]
    text = "\n".join(lines).rstrip("\n") + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text
