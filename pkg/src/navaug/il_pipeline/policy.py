"""Featurized linear navigation policy with fused constrained / unconstrained heads.

Context for step t (shared by every candidate)::

    [mean token embedding, embedding of the token aligned with step t,
     pooled current observation, last pooled history observation,
     t / horizon, [t >= horizon], 1]

Candidate score = 0.5 * w . phi(context, candidate) + 0.5 * U[rel_bucket] . context,
where phi appends the candidate's view feature and one-hot relative bucket.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..episode_sim import N_BUCKETS
from ..validation import check_examples
from .examples import DEFAULT_VOCAB, N_PROGRESS, StepExample

PARAM_NAMES = ("w_ctx", "w_feat", "w_bucket", "U", "V", "E")


def _softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class FeatureBatch:
    """Padded arrays for a list of examples (everything except the token embeddings)."""

    def __init__(self, examples: Sequence[StepExample], vocab_size: int, feature_dim: int | None = None):
        examples = list(examples)
        self.size = B = len(examples)
        D = feature_dim or examples[0].current_obs.views[0].feature.shape[0]
        self.feature_dim = D
        C = max(len(ex.candidates) for ex in examples)
        self.cand_feat = np.zeros((B, C, D))
        self.cand_bucket = np.zeros((B, C), dtype=np.int64)
        self.cand_mask = np.zeros((B, C), dtype=bool)
        self.pooled = np.zeros((B, D))
        self.hist = np.zeros((B, D))
        self.prog = np.zeros((B, 2))
        self.aligned = np.zeros(B, dtype=np.int64)
        rows, cols, vals = [], [], []
        labeled = all(ex.labels is not None for ex in examples)
        self.y_c = np.zeros(B, dtype=np.int64)
        self.y_b = np.zeros(B, dtype=np.int64)
        self.y_p = np.zeros(B, dtype=np.int64)
        self.mlm_rows: list[int] = []
        self.mlm_targets: list[np.ndarray] = []
        for b, ex in enumerate(examples):
            if ex.current_obs.views[0].feature.shape[0] != D:
                raise ValueError(f"example {b}: feature dim {ex.current_obs.views[0].feature.shape[0]} != {D}")
            for k, c in enumerate(ex.candidates):
                self.cand_feat[b, k] = c.feature
                self.cand_bucket[b, k] = c.rel_bucket
                self.cand_mask[b, k] = True
            self.pooled[b] = ex.pooled_obs
            if ex.history:
                self.hist[b] = ex.history[-1][0]
            self.prog[b] = (ex.t / ex.horizon, float(ex.t >= ex.horizon))
            toks = ex.tokens
            if max(toks) > vocab_size:
                raise ValueError(f"example {b}: token id {max(toks)} exceeds vocab size {vocab_size}")
            self.aligned[b] = toks[min(ex.t, len(toks) - 1)]
            for tok in toks:
                rows.append(b)
                cols.append(tok)
                vals.append(1.0 / len(toks))
            if labeled:
                self.y_c[b] = ex.labels.constrained_idx
                self.y_b[b] = ex.labels.unconstrained_bucket
                self.y_p[b] = ex.labels.progress_class
                if ex.labels.masked_tokens:
                    self.mlm_rows.append(b)
                    self.mlm_targets.append(np.array([tok for _, tok in ex.labels.masked_tokens]))
        self.labeled = labeled
        self.bag = csr_matrix((vals, (rows, cols)), shape=(B, vocab_size + 1))

    def subset(self, idx: np.ndarray) -> "FeatureBatch":
        out = object.__new__(FeatureBatch)
        out.size = len(idx)
        out.feature_dim = self.feature_dim
        for name in ("cand_feat", "cand_bucket", "cand_mask", "pooled", "hist", "prog", "aligned",
                     "y_c", "y_b", "y_p"):
            setattr(out, name, getattr(self, name)[idx])
        out.labeled = self.labeled
        out.bag = self.bag[idx]
        pos = {int(b): k for k, b in enumerate(idx)}
        out.mlm_rows, out.mlm_targets = [], []
        for r, tg in zip(self.mlm_rows, self.mlm_targets):
            if r in pos:
                out.mlm_rows.append(pos[r])
                out.mlm_targets.append(tg)
        return out


def init_params(feature_dim: int, vocab_size: int, embed_dim: int, rng: np.random.Generator,
                embed_scale: float = 0.1) -> dict:
    ctx_dim = 2 * embed_dim + 2 * feature_dim + 3
    return {
        "w_ctx": np.zeros(ctx_dim),
        "w_feat": np.zeros(feature_dim),
        "w_bucket": np.zeros(N_BUCKETS),
        "U": np.zeros((N_BUCKETS, ctx_dim)),
        "V": np.zeros((N_PROGRESS, ctx_dim)),
        "E": rng.normal(0.0, embed_scale, size=(vocab_size + 1, embed_dim)),
    }


def _context(params: dict, batch: FeatureBatch) -> np.ndarray:
    E = params["E"]
    mean_emb = batch.bag @ E
    aligned = E[batch.aligned]
    ones = np.ones((batch.size, 1))
    return np.hstack([mean_emb, aligned, batch.pooled, batch.hist, batch.prog, ones])


def forward(params: dict, batch: FeatureBatch):
    """Fused candidate scores (padded with -inf), bucket logits, progress logits and context."""
    ctx = _context(params, batch)
    bucket_logits = ctx @ params["U"].T
    constrained = (ctx @ params["w_ctx"])[:, None] + batch.cand_feat @ params["w_feat"] \
        + params["w_bucket"][batch.cand_bucket]
    fused = 0.5 * constrained + 0.5 * np.take_along_axis(bucket_logits, batch.cand_bucket, axis=1)
    fused = np.where(batch.cand_mask, fused, -np.inf)
    progress_logits = ctx @ params["V"].T
    return fused, bucket_logits, progress_logits, ctx


@dataclass(frozen=True)
class LossWeights:
    constrained: float = 1.0
    unconstrained: float = 1.0
    progress: float = 0.2
    mlm: float = 0.1


def loss_and_grad(params: dict, batch: FeatureBatch, weights: LossWeights = LossWeights(), l2: float = 0.0,
                  need_grad: bool = True):
    """Mean multi-task cross-entropy over the batch and its analytic gradient."""
    B = batch.size
    E = params["E"]
    de = E.shape[1]
    fused, bucket_logits, progress_logits, ctx = forward(params, batch)
    rows = np.arange(B)

    p_c = _softmax(fused, batch.cand_mask)
    p_b = _softmax(bucket_logits)
    p_p = _softmax(progress_logits)
    with np.errstate(divide="ignore"):
        loss_c = -np.log(p_c[rows, batch.y_c]).mean()
        loss_b = -np.log(p_b[rows, batch.y_b]).mean()
        loss_p = -np.log(p_p[rows, batch.y_p]).mean()
    loss = weights.constrained * loss_c + weights.unconstrained * loss_b + weights.progress * loss_p

    mean_emb = ctx[:, :de]
    loss_m = 0.0
    mlm_terms = []
    if weights.mlm and batch.mlm_rows:
        V = E.shape[0] - 1
        for r, targets in zip(batch.mlm_rows, batch.mlm_targets):
            logits = E[:V] @ mean_emb[r]
            pm = _softmax(logits)
            loss_m += -np.log(pm[targets]).mean() / B
            mlm_terms.append((r, targets, pm))
        loss += weights.mlm * loss_m
    if l2:
        loss += 0.5 * l2 * sum(float(np.sum(params[k] ** 2)) for k in PARAM_NAMES)
    parts = {"constrained": float(loss_c), "unconstrained": float(loss_b), "progress": float(loss_p),
             "mlm": float(loss_m)}
    if not need_grad:
        return float(loss), None, parts

    g_fused = p_c.copy()
    g_fused[rows, batch.y_c] -= 1.0
    g_fused *= weights.constrained / B
    g_fused = np.where(batch.cand_mask, g_fused, 0.0)
    g_half = 0.5 * g_fused

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["w_ctx"] = ctx.T @ g_half.sum(axis=1)
    grads["w_feat"] = np.einsum("bc,bcd->d", g_half, batch.cand_feat)
    np.add.at(grads["w_bucket"], batch.cand_bucket, g_half)

    # U receives the fused-score share plus the unconstrained bucket loss
    g_bucket = np.zeros_like(bucket_logits)
    np.add.at(g_bucket, (np.repeat(rows, batch.cand_bucket.shape[1]), batch.cand_bucket.ravel()), g_half.ravel())
    g_b = p_b.copy()
    g_b[rows, batch.y_b] -= 1.0
    g_bucket += g_b * (weights.unconstrained / B)
    grads["U"] = g_bucket.T @ ctx

    g_p = p_p.copy()
    g_p[rows, batch.y_p] -= 1.0
    g_p *= weights.progress / B
    grads["V"] = g_p.T @ ctx

    g_ctx = g_half.sum(axis=1)[:, None] * params["w_ctx"][None, :] + g_bucket @ params["U"] + g_p @ params["V"]
    g_mean = g_ctx[:, :de].copy()
    g_aligned = g_ctx[:, de:2 * de]

    if mlm_terms:
        V = E.shape[0] - 1
        for r, targets, pm in mlm_terms:
            g_logits = np.tile(pm, (len(targets), 1))
            g_logits[np.arange(len(targets)), targets] -= 1.0
            g_logits = g_logits.mean(axis=0) * (weights.mlm / B)
            grads["E"][:V] += np.outer(g_logits, mean_emb[r])
            g_mean[r] += E[:V].T @ g_logits

    grads["E"] += batch.bag.T @ g_mean
    np.add.at(grads["E"], batch.aligned, g_aligned)
    if l2:
        for k in PARAM_NAMES:
            grads[k] += l2 * params[k]
    return float(loss), grads, parts


class LinearPolicy(BaseEstimator):
    """Behavioural-cloning policy with an sklearn-style ``fit`` / ``predict`` surface.

    ``fit`` takes labeled :class:`StepExample` lists; ``predict`` returns the
    chosen candidate index per example.  ``trainable="embeddings"`` freezes
    every weight except the token embedding table.
    """

    def __init__(self, embed_dim=64, vocab_size=DEFAULT_VOCAB, epochs=30, batch_size=64, learning_rate=0.01,
                 optimizer="adam", l2=1e-4, loss_weights=(1.0, 1.0, 0.2, 0.1), trainable="all", seed=0,
                 warm_start=False, verbose=False):
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.l2 = l2
        self.loss_weights = loss_weights
        self.trainable = trainable
        self.seed = seed
        self.warm_start = warm_start
        self.verbose = verbose

    # -- training ----------------------------------------------------------
    def _weights(self) -> LossWeights:
        return LossWeights(*self.loss_weights)

    def _trainable_names(self):
        if self.trainable == "all":
            return PARAM_NAMES
        if self.trainable == "embeddings":
            return ("E",)
        raise ValueError(f"trainable must be 'all' or 'embeddings', got {self.trainable!r}")

    def fit(self, examples, y=None):
        examples = check_examples(examples)
        if any(ex.labels is None for ex in examples):
            raise ValueError("every training example needs labels")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        rng = np.random.default_rng(self.seed)
        full = FeatureBatch(examples, self.vocab_size)
        if not (self.warm_start and hasattr(self, "params_")):
            self.params_ = init_params(full.feature_dim, self.vocab_size, self.embed_dim, rng)
        names = self._trainable_names()
        m = {k: np.zeros_like(self.params_[k]) for k in names}
        v = {k: np.zeros_like(self.params_[k]) for k in names}
        step = 0
        self.loss_curve_ = []
        n = full.size
        bs = min(self.batch_size, n)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = np.sort(order[start:start + bs])
                batch = full.subset(idx)
                loss, grads, _ = loss_and_grad(self.params_, batch, self._weights(), self.l2)
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                        f"max |param| = {max(float(np.abs(p).max()) for p in self.params_.values()):.3g}")
                total += loss * len(idx)
                step += 1
                for k in names:
                    g = grads[k]
                    if self.optimizer == "sgd":
                        self.params_[k] -= self.learning_rate * g
                    else:
                        m[k] = 0.9 * m[k] + 0.1 * g
                        v[k] = 0.999 * v[k] + 0.001 * g * g
                        mh = m[k] / (1 - 0.9 ** step)
                        vh = v[k] / (1 - 0.999 ** step)
                        self.params_[k] -= self.learning_rate * mh / (np.sqrt(vh) + 1e-8)
            self.loss_curve_.append(total / n)
            if self.verbose:
                print(f"epoch {epoch}: loss {total / n:.4f}")
        self.feature_dim_ = full.feature_dim
        return self

    # -- inference ---------------------------------------------------------
    def decision_function(self, examples) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        batch = FeatureBatch(check_examples(examples), self.vocab_size, self.feature_dim_)
        fused = forward(self.params_, batch)[0]
        return [fused[b, batch.cand_mask[b]] for b in range(batch.size)]

    def predict(self, examples) -> np.ndarray:
        return np.array([int(np.argmax(s)) for s in self.decision_function(examples)])

    def act(self, example: StepExample, state=None, ctx=None) -> int:
        return int(self.predict([example])[0])

    def score(self, examples, y=None) -> float:
        """Fraction of examples whose argmax matches the constrained label."""
        examples = check_examples(examples)
        pred = self.predict(examples)
        return float(np.mean([p == ex.labels.constrained_idx for p, ex in zip(pred, examples)]))

    def loss(self, examples) -> float:
        check_is_fitted(self, "params_")
        batch = FeatureBatch(check_examples(examples), self.vocab_size, self.feature_dim_)
        return loss_and_grad(self.params_, batch, self._weights(), self.l2, need_grad=False)[0]

    @property
    def w_(self) -> np.ndarray:
        """Flat constrained-head weights over phi = [context, candidate feature, one-hot bucket]."""
        p = self.params_
        return np.concatenate([p["w_ctx"], p["w_feat"], p["w_bucket"]])

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        check_is_fitted(self, "params_")
        hyper = self.get_params()
        hyper["loss_weights"] = list(hyper["loss_weights"])
        return {
            "hyperparams": hyper,
            "feature_dim": self.feature_dim_,
            "loss_curve": list(getattr(self, "loss_curve_", [])),
            "weights": {k: {"shape": list(self.params_[k].shape), "data": self.params_[k].ravel().tolist()}
                        for k in PARAM_NAMES},
        }

    @classmethod
    def from_dict(cls, d) -> "LinearPolicy":
        hyper = dict(d["hyperparams"])
        hyper["loss_weights"] = tuple(hyper["loss_weights"])
        pol = cls(**hyper)
        pol.params_ = {k: np.array(w["data"], dtype=float).reshape(w["shape"]) for k, w in d["weights"].items()}
        pol.feature_dim_ = int(d["feature_dim"])
        pol.loss_curve_ = list(d.get("loss_curve", []))
        return pol

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "LinearPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))
