"""Instructions, span masking and per-step imitation-learning examples."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..dagger_expert import ExpertContext, expert_action
from ..episode_sim import N_BUCKETS, STOP_BUCKET, ActionCandidate, EpisodeState, Observation, Simulator
from ..traj_sampler import Trajectory

DEFAULT_VOCAB = 4096
N_PROGRESS = 20
LANGUAGES = ("en", "hi", "te")
# Each language gets its own block of 37 direction words starting at this id.
_DIRECTION_BASE = {"en": 1, "hi": 1 + N_BUCKETS, "te": 1 + 2 * N_BUCKETS}
_FILLER_START = 1 + 3 * N_BUCKETS


@dataclass(frozen=True)
class Instruction:
    id: str
    tokens: tuple[int, ...]
    language_tag: str = "en"
    vocab_size: int = DEFAULT_VOCAB

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"instruction {self.id} is empty")
        if self.language_tag not in LANGUAGES:
            raise ValueError(f"unknown language tag {self.language_tag!r}")
        if min(self.tokens) < 0 or max(self.tokens) > self.vocab_size:
            raise ValueError(f"instruction {self.id}: token ids must lie in [0, {self.vocab_size}]")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def horizon(self) -> int:
        """Steps the instruction describes (one token per move plus a final STOP word)."""
        return max(len(self.tokens) - 1, 1)

    def to_dict(self) -> dict:
        return {"id": self.id, "tokens": list(self.tokens), "language_tag": self.language_tag,
                "vocab_size": self.vocab_size}

    @classmethod
    def from_dict(cls, d) -> "Instruction":
        return cls(d["id"], tuple(int(t) for t in d["tokens"]), d.get("language_tag", "en"),
                   int(d.get("vocab_size", DEFAULT_VOCAB)))


@dataclass(frozen=True)
class Episode:
    """An instruction paired with its GT trajectory and episode start conditions."""

    instruction: Instruction
    trajectory: Trajectory
    init_heading: float
    start_node: int | None = None

    @property
    def start(self) -> int:
        return self.trajectory.start if self.start_node is None else self.start_node

    def to_dict(self) -> dict:
        return {"instruction": self.instruction.to_dict(), "trajectory": self.trajectory.to_dict(),
                "init_heading": self.init_heading, "start_node": self.start_node}

    @classmethod
    def from_dict(cls, d) -> "Episode":
        return cls(Instruction.from_dict(d["instruction"]), Trajectory.from_dict(d["trajectory"]),
                   float(d["init_heading"]), d.get("start_node"))


def gt_relative_buckets(trajectory: Trajectory, sim: Simulator, init_heading: float) -> list[int]:
    """Relative direction bucket of every GT move, then the STOP bucket."""
    state = sim.reset(trajectory, init_heading, max_steps=trajectory.steps + 1)
    out = []
    for nxt in trajectory.nodes[1:]:
        cand = next(c for c in sim.candidates(state) if c.target == nxt)
        out.append(cand.rel_bucket)
        state = sim.step(state, cand)
    out.append(STOP_BUCKET)
    return out


def make_instruction(trajectory: Trajectory, sim: Simulator, init_heading: float, rng: np.random.Generator,
                     instruction_id: str = "", vocab_size: int = DEFAULT_VOCAB, token_noise: float = 0.1,
                     language_tag: str | None = None) -> Instruction:
    """Synthetic instruction: one direction word per GT move, then a STOP word.

    With probability ``token_noise`` a word is replaced by a random filler id.
    """
    if vocab_size <= _FILLER_START:
        raise ValueError(f"vocab_size must exceed {_FILLER_START}")
    lang = language_tag or LANGUAGES[int(rng.integers(len(LANGUAGES)))]
    base = _DIRECTION_BASE[lang]
    tokens = []
    for b in gt_relative_buckets(trajectory, sim, init_heading):
        if rng.uniform() < token_noise:
            tokens.append(int(rng.integers(_FILLER_START, vocab_size)))
        else:
            tokens.append(base + b)
    return Instruction(instruction_id or trajectory.traj_id, tuple(tokens), lang, vocab_size)


def mask_instruction(tokens: Sequence[int], rate: float, rng: np.random.Generator, mask_id: int):
    """Mask positions independently with probability ``rate``; each masked run becomes one ``mask_id``.

    Returns ``(masked_tokens, targets)`` where targets lists ``(position, original_id)``
    for every masked position of the input.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    tokens = list(tokens)
    if rate == 0.0:
        return tokens, []
    hit = rng.uniform(size=len(tokens)) < rate
    out, targets = [], []
    for pos, (tok, m) in enumerate(zip(tokens, hit)):
        if m:
            targets.append((pos, tok))
            if pos == 0 or not hit[pos - 1]:
                out.append(mask_id)
        else:
            out.append(tok)
    return out, targets


def progress_class(t: int, total: int) -> int:
    if total <= 0:
        return N_PROGRESS - 1
    return min(N_PROGRESS * t // total, N_PROGRESS - 1)


@dataclass(frozen=True)
class StepLabels:
    constrained_idx: int
    unconstrained_bucket: int
    progress_class: int
    masked_tokens: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class StepExample:
    instruction_id: str
    env_id: str
    t: int
    horizon: int
    tokens: tuple[int, ...]
    history: tuple[tuple[np.ndarray, int], ...] = field(repr=False)
    current_obs: Observation = field(repr=False)
    candidates: tuple[ActionCandidate, ...] = field(repr=False)
    labels: StepLabels | None = None
    vocab_size: int = DEFAULT_VOCAB

    @property
    def pooled_obs(self) -> np.ndarray:
        return self.current_obs.features.mean(axis=0)

    def candidate_index(self, target: int) -> int:
        for k, c in enumerate(self.candidates):
            if c.target == target:
                return k
        raise ValueError(f"target {target} is not among the candidates")

    def with_labels(self, labels: StepLabels) -> "StepExample":
        return replace(self, labels=labels)


def observe_step(instruction: Instruction, state: EpisodeState, sim: Simulator,
                 history: Sequence[tuple[np.ndarray, int]], tokens: Sequence[int] | None = None) -> StepExample:
    """Unlabeled example describing the agent's current decision."""
    return StepExample(
        instruction_id=instruction.id,
        env_id=state.env_id,
        t=state.t,
        horizon=instruction.horizon,
        tokens=tuple(instruction.tokens if tokens is None else tokens),
        history=tuple(history),
        current_obs=sim.observe(state),
        candidates=tuple(sim.candidates(state)),
        vocab_size=instruction.vocab_size,
    )


def label_step(example: StepExample, action: int, gt_steps: int, masked=()) -> StepExample:
    idx = example.candidate_index(action)
    return example.with_labels(StepLabels(idx, example.candidates[idx].rel_bucket,
                                          progress_class(example.t, gt_steps), tuple(masked)))


def emit_step_examples(episode: Episode, sim: Simulator, ctx: ExpertContext, mask_rate: float = 0.0,
                       rng: np.random.Generator | None = None) -> list[StepExample]:
    """Expert-labeled examples along the expert's own rollout, final STOP decision included."""
    instr = episode.instruction
    tokens, masked = list(instr.tokens), []
    if mask_rate > 0:
        if rng is None:
            raise ValueError("masking needs an rng")
        tokens, masked = mask_instruction(instr.tokens, mask_rate, rng, instr.mask_id)
    state = sim.reset(episode.trajectory, episode.init_heading, episode.start_node)
    history: list[tuple[np.ndarray, int]] = []
    out = []
    while not state.done:
        ex = observe_step(instr, state, sim, history, tokens)
        action = expert_action(ctx, state)
        ex = label_step(ex, action, episode.trajectory.steps, masked)
        out.append(ex)
        history.append((ex.pooled_obs, ex.labels.unconstrained_bucket))
        state = sim.step(state, action)
    return out
