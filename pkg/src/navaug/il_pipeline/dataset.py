"""On-disk StepExample datasets: float32 records plus a JSONL index.

``records.bin`` uses the feature-file layout (16-byte header, then
little-endian float32 rows of width D).  Each example owns a contiguous
block of rows: its history pooled observations, the 36 current views, then
one row per candidate.  ``index.jsonl`` holds everything else.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..env_synth import N_VIEWS, read_float_records, write_float_records
from ..episode_sim import ActionCandidate, Observation, View
from .examples import StepExample, StepLabels, progress_class

STEP_MAGIC = b"NAVSTEP\x00"
RECORDS = "records.bin"
INDEX = "index.jsonl"


def _index_entry(ex: StepExample, offset: int) -> dict:
    d = {
        "instruction_id": ex.instruction_id,
        "env_id": ex.env_id,
        "t": ex.t,
        "horizon": ex.horizon,
        "tokens": list(ex.tokens),
        "vocab_size": ex.vocab_size,
        "offset": offset,
        "history_buckets": [int(b) for _, b in ex.history],
        "views": [[v.abs_bucket, v.rel_bucket] for v in ex.current_obs.views],
        "candidates": [[c.target, c.abs_bucket, c.rel_bucket] for c in ex.candidates],
        "labels": None,
    }
    if ex.labels is not None:
        lab = ex.labels
        d["labels"] = {"constrained_idx": lab.constrained_idx, "unconstrained_bucket": lab.unconstrained_bucket,
                       "progress_class": lab.progress_class,
                       "masked_tokens": [list(p) for p in lab.masked_tokens]}
    return d


def write_step_dataset(directory, examples: Sequence[StepExample]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not examples:
        raise ValueError("refusing to write an empty dataset")
    blocks, lines, offset = [], [], 0
    for ex in examples:
        rows = [h for h, _ in ex.history] + [v.feature for v in ex.current_obs.views] \
            + [c.feature for c in ex.candidates]
        blocks.append(np.asarray(rows, dtype=np.float32))
        lines.append(json.dumps(_index_entry(ex, offset), separators=(",", ":")))
        offset += len(rows)
    write_float_records(d / RECORDS, np.concatenate(blocks), count=len(examples), magic=STEP_MAGIC)
    (d / INDEX).write_text("\n".join(lines) + "\n")
    return d


def check_step_example(ex: StepExample, gt_steps: int | None = None) -> None:
    """Raise ValueError if the labels break bucket consistency or the progress formula."""
    lab = ex.labels
    if lab is None:
        return
    if not 0 <= lab.constrained_idx < len(ex.candidates):
        raise ValueError(f"{ex.instruction_id}@{ex.t}: constrained_idx {lab.constrained_idx} out of range")
    if ex.candidates[lab.constrained_idx].rel_bucket != lab.unconstrained_bucket:
        raise ValueError(f"{ex.instruction_id}@{ex.t}: unconstrained bucket disagrees with labeled candidate")
    if gt_steps is not None and lab.progress_class != progress_class(ex.t, gt_steps):
        raise ValueError(f"{ex.instruction_id}@{ex.t}: progress class {lab.progress_class} is wrong")


def read_step_dataset(directory) -> list[StepExample]:
    d = Path(directory)
    count, rows = read_float_records(d / RECORDS, magic=STEP_MAGIC)
    entries = [json.loads(line) for line in (d / INDEX).read_text().splitlines() if line.strip()]
    if len(entries) != count:
        raise ValueError(f"{d}: index has {len(entries)} entries, records header says {count}")
    out = []
    for e in entries:
        k = e["offset"]
        nh = len(e["history_buckets"])
        hist = tuple((rows[k + i], int(b)) for i, b in enumerate(e["history_buckets"]))
        k += nh
        views = tuple(View(rows[k + v], a, r) for v, (a, r) in enumerate(e["views"]))
        if len(views) != N_VIEWS:
            raise ValueError(f"{d}: example {e['instruction_id']}@{e['t']} has {len(views)} views")
        k += N_VIEWS
        cands = tuple(ActionCandidate(int(tg), rows[k + i], a, r) for i, (tg, a, r) in enumerate(e["candidates"]))
        if k + len(cands) > rows.shape[0]:
            raise ValueError(f"{d}: records file is truncated")
        lab = e["labels"]
        labels = None if lab is None else StepLabels(
            lab["constrained_idx"], lab["unconstrained_bucket"], lab["progress_class"],
            tuple(tuple(p) for p in lab["masked_tokens"]))
        ex = StepExample(e["instruction_id"], e["env_id"], e["t"], e["horizon"], tuple(e["tokens"]), hist,
                         Observation(views), cands, labels, e["vocab_size"])
        check_step_example(ex)
        out.append(ex)
    return out
