import math

import numpy as np
import pytest

from oracles import expert_oracle
from navaug.benchmark import make_episodes
from navaug.episode_sim import STOP, STOP_BUCKET
from navaug.il_pipeline import (ExpertPolicy, FeatureBatch, Instruction, LinearPolicy, LossWeights, RandomPolicy,
                                StopPolicy,
                                check_step_example, dagger_iteration, emit_dataset, emit_step_examples,
                                evaluate_policy, expert_context, loss_and_grad, make_instruction, mask_instruction,
                                progress_class, read_step_dataset, rollout, write_step_dataset)
from navaug.il_pipeline.examples import _DIRECTION_BASE, gt_relative_buckets
from navaug.il_pipeline.policy import PARAM_NAMES, init_params
from navaug.traj_sampler import SampleConfig, sample_dataset

VOCAB = 256


@pytest.fixture(scope="module")
def episodes(small_suite):
    envs, sims = small_suite
    trajs = sample_dataset({e.id: e.reference_graph for e in envs}, SampleConfig(per_env_cap=6, seed=4))
    return make_episodes(trajs, sims, 0, vocab_size=VOCAB)


class TestMasking:
    def test_rate(self):
        rng = np.random.default_rng(0)
        toks = list(range(1, 1001))
        hits = sum(len(mask_instruction(toks, 0.15, rng, 9999)[1]) for _ in range(100))
        assert abs(hits / 100_000 - 0.15) <= 0.01

    def test_span_collapse(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            toks = list(rng.integers(1, 50, size=int(rng.integers(1, 30))))
            out, targets = mask_instruction(toks, 0.4, rng, 99)
            pos = [p for p, _ in targets]
            runs = sum(1 for k, p in enumerate(pos) if k == 0 or pos[k - 1] != p - 1)
            assert len(out) == len(toks) - len(pos) + runs
            assert out.count(99) == runs
            assert all(toks[p] == t for p, t in targets)
            assert [t for k, t in enumerate(toks) if k not in pos] == [t for t in out if t != 99]

    def test_edges(self):
        rng = np.random.default_rng(2)
        assert mask_instruction([1, 2, 3], 0.0, rng, 9) == ([1, 2, 3], [])
        assert mask_instruction([1, 2, 3], 1.0, rng, 9) == ([9], [(0, 1), (1, 2), (2, 3)])
        with pytest.raises(ValueError):
            mask_instruction([1], 1.5, rng, 9)


def test_progress_class():
    for total in range(1, 40):
        for t in range(total):
            assert progress_class(t, total) == math.floor(20 * t / total)
        assert progress_class(total, total) == 19
    assert progress_class(0, 0) == 19


class TestInstructions:
    def test_noise_free_tokens(self, small_suite, episodes):
        _, sims = small_suite
        ep = episodes[0]
        sim = sims[ep.trajectory.env_id]
        ins = make_instruction(ep.trajectory, sim, ep.init_heading, np.random.default_rng(0), "x", VOCAB, 0.0, "hi")
        buckets = gt_relative_buckets(ep.trajectory, sim, ep.init_heading)
        assert list(ins.tokens) == [_DIRECTION_BASE["hi"] + b for b in buckets]
        assert buckets[-1] == STOP_BUCKET and ins.horizon == ep.trajectory.steps

    def test_validation(self):
        with pytest.raises(ValueError):
            Instruction("a", ())
        with pytest.raises(ValueError):
            Instruction("a", (1,), "fr")
        with pytest.raises(ValueError):
            Instruction("a", (300,), vocab_size=VOCAB)
        assert Instruction("a", (VOCAB,), vocab_size=VOCAB).mask_id == VOCAB


class TestExamples:
    def test_emitted_labels(self, small_suite, episodes):
        _, sims = small_suite
        for ep in episodes:
            sim = sims[ep.trajectory.env_id]
            exs = emit_step_examples(ep, sim, expert_context(ep, sims))
            gt = ep.trajectory.nodes
            assert len(exs) == len(gt)
            for t, ex in enumerate(exs):
                check_step_example(ex, ep.trajectory.steps)
                assert ex.t == t and len(ex.history) == t
                target = ex.candidates[ex.labels.constrained_idx].target
                assert target == (gt[t + 1] if t + 1 < len(gt) else STOP)
                assert ex.labels.progress_class == progress_class(t, ep.trajectory.steps)

    def test_masked_examples_share_targets(self, small_suite, episodes):
        _, sims = small_suite
        ep = episodes[1]
        exs = emit_step_examples(ep, sims[ep.trajectory.env_id], expert_context(ep, sims), 0.5,
                                 np.random.default_rng(3))
        assert len({ex.labels.masked_tokens for ex in exs}) == 1
        assert len({ex.tokens for ex in exs}) == 1
        with pytest.raises(ValueError):
            emit_step_examples(ep, sims[ep.trajectory.env_id], expert_context(ep, sims), 0.5)

    def test_check_rejects_inconsistent_bucket(self, small_suite, episodes):
        _, sims = small_suite
        ep = episodes[0]
        ex = emit_step_examples(ep, sims[ep.trajectory.env_id], expert_context(ep, sims))[0]
        bad = ex.with_labels(ex.labels.__class__(ex.labels.constrained_idx, (ex.labels.unconstrained_bucket + 1) % 36,
                                                 ex.labels.progress_class))
        with pytest.raises(ValueError, match="bucket"):
            check_step_example(bad)

    def test_dataset_round_trip(self, small_suite, episodes, tmp_path):
        _, sims = small_suite
        exs = emit_dataset(episodes[:4], sims, 0.3, np.random.default_rng(5))
        write_step_dataset(tmp_path / "ds", exs)
        back = read_step_dataset(tmp_path / "ds")
        assert len(back) == len(exs)
        for a, b in zip(exs, back):
            assert (a.instruction_id, a.env_id, a.t, a.horizon, a.tokens, a.labels) == \
                (b.instruction_id, b.env_id, b.t, b.horizon, b.tokens, b.labels)
            assert np.array_equal(a.current_obs.features, b.current_obs.features)
            assert [c.target for c in a.candidates] == [c.target for c in b.candidates]
            assert all(np.array_equal(x.feature, y.feature) for x, y in zip(a.candidates, b.candidates))
            assert all(np.array_equal(x[0].astype(np.float32), y[0]) and x[1] == y[1]
                       for x, y in zip(a.history, b.history))
        with pytest.raises(ValueError):
            write_step_dataset(tmp_path / "empty", [])


def _examples(small_suite, episodes, mask_rate=0.0):
    _, sims = small_suite
    return emit_dataset(episodes, sims, mask_rate, np.random.default_rng(0))


class TestPolicy:
    def test_zero_weights_tie(self, small_suite, episodes):
        exs = _examples(small_suite, episodes)
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=0).fit(exs)
        for s in pol.decision_function(exs[:20]):
            assert np.all(s == 0.0)
        assert np.all(pol.predict(exs[:20]) == 0)

    def test_fused_score_recomputed(self, small_suite, episodes):
        exs = _examples(small_suite, episodes)
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=3).fit(exs)
        p = pol.params_
        for ex in exs[:15]:
            toks = ex.tokens
            ctx = np.concatenate([
                np.mean([p["E"][t] for t in toks], axis=0), p["E"][toks[min(ex.t, len(toks) - 1)]],
                ex.pooled_obs, ex.history[-1][0] if ex.history else np.zeros(ex.pooled_obs.shape),
                [ex.t / ex.horizon, float(ex.t >= ex.horizon), 1.0]])
            want = []
            for c in ex.candidates:
                onehot = np.zeros(37)
                onehot[c.rel_bucket] = 1.0
                phi = np.concatenate([ctx, c.feature, onehot])
                want.append(0.5 * pol.w_ @ phi + 0.5 * p["U"][c.rel_bucket] @ ctx)
            assert np.allclose(pol.decision_function([ex])[0], want, rtol=0, atol=1e-9)

    def test_gradient_matches_finite_differences(self, small_suite, episodes):
        exs = _examples(small_suite, episodes[:4], mask_rate=0.3)[:12]
        batch = FeatureBatch(exs, VOCAB)
        rng = np.random.default_rng(0)
        params = init_params(batch.feature_dim, VOCAB, 6, rng, 0.3)
        for k in ("w_ctx", "w_feat", "w_bucket", "U", "V"):
            params[k] = rng.normal(0, 0.3, params[k].shape)
        w = LossWeights(1.0, 0.7, 0.3, 0.5)
        _, grads, _ = loss_and_grad(params, batch, w, l2=1e-3)
        h = 1e-6
        for k in PARAM_NAMES:
            flat = params[k].reshape(-1)
            g = grads[k].reshape(-1)
            picks = rng.choice(flat.size, min(flat.size, 15), replace=False)
            if k == "E":
                picks = np.concatenate([picks, [exs[0].tokens[0] * params[k].shape[1]]])
            for i in picks:
                old = flat[i]
                flat[i] = old + h
                up = loss_and_grad(params, batch, w, 1e-3, need_grad=False)[0]
                flat[i] = old - h
                down = loss_and_grad(params, batch, w, 1e-3, need_grad=False)[0]
                flat[i] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-3), (k, i, fd, g[i])

    def test_fits_one_example(self, small_suite, episodes):
        exs = [ex for ex in _examples(small_suite, episodes) if ex.labels.constrained_idx > 0][:1]
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=50, batch_size=1, learning_rate=0.05).fit(exs)
        assert pol.score(exs) == 1.0
        assert pol.loss_curve_[-1] < pol.loss_curve_[0]

    def test_save_load(self, small_suite, episodes, tmp_path):
        exs = _examples(small_suite, episodes)
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=2).fit(exs)
        pol.save(tmp_path / "p.json")
        back = LinearPolicy.load(tmp_path / "p.json")
        assert np.array_equal(back.predict(exs), pol.predict(exs))
        assert back.get_params() == pol.get_params()

    def test_errors(self, small_suite, episodes):
        exs = _examples(small_suite, episodes)
        with pytest.raises(ValueError):
            LinearPolicy(vocab_size=VOCAB, optimizer="lbfgs").fit(exs)
        with pytest.raises(ValueError):
            LinearPolicy(vocab_size=VOCAB).fit([])
        with pytest.raises(ValueError):
            LinearPolicy(vocab_size=10).fit(exs)
        with pytest.raises(ValueError):
            LinearPolicy(vocab_size=VOCAB).fit([exs[0].with_labels(None)])


class TestLoops:
    def test_expert_policy_reaches_every_goal(self, small_suite, episodes):
        _, sims = small_suite
        summary, results, _ = evaluate_policy(ExpertPolicy(), episodes, sims)
        assert summary["sr"] == 100.0 and all(r.ndtw == 1.0 for r in results)

    def test_dagger_sizes(self, small_suite, episodes):
        _, sims = small_suite
        base = emit_dataset(episodes, sims)
        agg, new = dagger_iteration(StopPolicy(), base, episodes, sims)
        assert len(new) == len(episodes) and len(agg) == len(base) + len(episodes)
        assert agg[:len(base)] == base
        for ex, ep in zip(new, sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id))):
            assert ex.t == 0 and ex.candidates[ex.labels.constrained_idx].target == ep.trajectory.nodes[1]

    def test_dagger_with_expert_repeats_bc_labels(self, small_suite, episodes):
        _, sims = small_suite
        base = emit_dataset(episodes, sims)
        _, new = dagger_iteration(ExpertPolicy(), [], episodes, sims)
        assert [e.labels for e in new] == [e.labels for e in base]

    def test_rollout_lengths(self, small_suite, episodes):
        _, sims = small_suite
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=2).fit(emit_dataset(episodes, sims))
        _, new = dagger_iteration(pol, [], episodes, sims, np.random.default_rng(0), perturb=True)
        for ep in sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id)):
            state, _ = rollout(pol, ep, sims[ep.trajectory.env_id], expert_context(ep, sims))
            assert len(state.trace) - 1 <= state.max_steps
        assert all(ex.labels is not None for ex in new)
        assert len(new) >= len(episodes)


class TestSpecExamples:
    def test_stop_bucket_weights_choose_stop(self, small_suite, episodes):
        exs = _examples(small_suite, episodes)
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=0).fit(exs)
        pol.params_["w_bucket"][STOP_BUCKET] = 5.0
        assert all(ex.candidates[k].target == STOP for ex, k in zip(exs, pol.predict(exs)))

    def test_always_stop_error_is_start_goal_distance(self, small_suite, episodes):
        _, sims = small_suite
        _, results, _ = evaluate_policy(StopPolicy(), episodes, sims)
        for ep, r in zip(episodes, results):
            assert r.ne_m == sims[ep.trajectory.env_id].graph.distance(ep.trajectory.start, ep.trajectory.goal)

    def test_random_below_expert(self, small_suite, episodes):
        _, sims = small_suite
        assert len(episodes) >= 18
        rand = evaluate_policy(RandomPolicy(0), episodes, sims)[0]["sr"]
        assert rand < evaluate_policy(ExpertPolicy(), episodes, sims)[0]["sr"]

    def test_progress_non_decreasing(self, small_suite, episodes):
        _, sims = small_suite
        for ep in episodes:
            classes = [ex.labels.progress_class for ex in
                       emit_step_examples(ep, sims[ep.trajectory.env_id], expert_context(ep, sims))]
            assert classes[0] == 0 and classes == sorted(classes)

    def test_loss_decreases_on_fixed_batch(self, small_suite, episodes):
        exs = _examples(small_suite, episodes)[:32]
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=15, batch_size=32, optimizer="sgd",
                           learning_rate=0.05, l2=0.0).fit(exs)
        curve = pol.loss_curve_
        assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))

    def test_dagger_labels_match_oracle(self, small_suite, episodes):
        _, sims = small_suite
        pol = LinearPolicy(embed_dim=8, vocab_size=VOCAB, epochs=1).fit(emit_dataset(episodes, sims))
        by_id = {ep.instruction.id: ep for ep in episodes}
        for ep in sorted(episodes, key=lambda e: (e.trajectory.env_id, e.instruction.id)):
            sim = sims[ep.trajectory.env_id]
            state, exs = rollout(pol, ep, sim, expert_context(ep, sims), label=True)
            trace = state.trace
            for ex in exs:
                gt = by_id[ex.instruction_id].trajectory
                want = expert_oracle(sim.graph, list(gt.nodes), list(trace[:ex.t + 1]), gt.length_m)
                assert ex.candidates[ex.labels.constrained_idx].target == want
