"""Acceptance suite: one test per release criterion.

Each test prints a `[ACCEPTANCE] <name>: PASS` line on success so the
whole gate can be read off the test log. The desk-scale learning run is
shared between the criteria that need a trained model; its thresholds
(random-walk baseline, learned success rates, attention-progress rank
correlation) were pinned from the seeded reference run recorded in the
fixtures below.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from navformer import autodiff as ad
from navformer import agent as ag
from navformer import envsim as es
from navformer import metrics as mt
from navformer import training as tr
from navformer import transformer as tf
from navformer.agent import make_agent
from navformer.autodiff import Tensor
from navformer.checkpoint import save_checkpoint
from navformer.cli import main as cli_main
from navformer.model import ModelConfig, ModelParams
from navformer.training import Trainer
from gradcheck import check_grads, max_rel_err, numerical_grad

# Reference-run pins (seeded; see the desk_learning fixture). The reference
# run (suite seed 42, model seed 1, trainer seed 7, 3000 iterations) reached
# train SR 0.975, held-out SR 0.66 against a 0.035 random-walk baseline, and
# a mean progress rank correlation of 0.134 on the held-out episodes.
TRAIN_ITERATIONS = 3000
TRAIN_SR_FLOOR = 0.90
HELDOUT_MARGIN = 0.20
PROGRESS_RHO_FLOOR = 0.10
TRAIN_TIME_BUDGET_S = 30 * 60


def ok(name):
    print(f"[ACCEPTANCE] {name}: PASS")


# ---------------------------------------------------------------------------
# 1. autodiff suite


class TestAutodiffSuite:
    def test_every_op_and_composed_encoder(self):
        t0 = time.perf_counter()
        cases = 0

        def tns(rng, *shape, shift=0.0):
            return Tensor(rng.standard_normal(shape) + shift, requires_grad=True)

        for seed in range(7):
            rng = np.random.default_rng(seed)
            w = rng.standard_normal((3, 4))
            x = tns(rng, 3, 4)
            y = tns(rng, 3, 4)
            row = tns(rng, 1, 4)
            gain = Tensor(rng.standard_normal(4), requires_grad=True)
            bias = Tensor(rng.standard_normal(4), requires_grad=True)
            matmul_rhs = tns(rng, 4, 2)
            ops = [
                lambda: ad.tensor_sum(ad.matmul(x, matmul_rhs)),
                lambda: ad.tensor_sum(ad.mul(ad.add(x, row), Tensor(w))),
                lambda: ad.tensor_sum(ad.mul(x, y)),
                lambda: ad.tensor_sum(ad.scale(x, 1.7)),
                lambda: ad.tensor_sum(ad.mul(ad.relu(x), Tensor(w))),
                lambda: ad.tensor_sum(ad.mul(ad.softmax_rows(x), Tensor(w))),
                lambda: ad.tensor_sum(ad.mul(ad.softmax_rows(
                    x, np.eye(3, 4, dtype=bool) | (w > 0)), Tensor(w))),
                lambda: ad.tensor_sum(ad.mul(ad.layer_norm(x, gain, bias), Tensor(w))),
                lambda: ad.tensor_sum(ad.concat_rows([x, y])),
                lambda: ad.tensor_sum(ad.mul(ad.concat_cols([x, y]),
                                             Tensor(np.hstack([w, w])))),
                lambda: ad.tensor_sum(ad.mul(ad.slice_rows(x, 1, 3), Tensor(w[1:3]))),
                lambda: ad.tensor_sum(ad.mul(ad.slice_cols(x, 1, 4), Tensor(w[:, 1:4]))),
                lambda: ad.tensor_sum(ad.matmul(ad.transpose(x), y)),
                lambda: ad.tensor_sum(ad.mul(ad.embedding_lookup(x, [2, 0, 2, 1]),
                                             Tensor(np.vstack([w, w[:1]])))),
                lambda: ad.tensor_sum(ad.log_clamped(ad.add(ad.mul(x, x),
                                                            Tensor(np.full((3, 4), 0.5))))),
                lambda: ad.tensor_sum(ad.row_max(x)),
                lambda: ad.tensor_sum(ad.dropout(
                    x, 0.3, np.random.default_rng(seed + 70))),
            ]
            for f in ops:
                x.grad = y.grad = row.grad = None
                check_grads(f, [x], tol=1e-4)
                cases += 1

        # composed check: a 2-layer encoder, every parameter
        for seed in range(3):
            layers = [tf.make_encoder_layer(np.random.default_rng(seed * 2 + i),
                                            8, 2, 4, 12) for i in range(2)]
            rng = np.random.default_rng(seed + 30)
            x0 = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
            w = rng.standard_normal((4, 8))

            def f():
                h = x0
                for layer in layers:
                    h, _ = tf.encoder_layer(h, h, layer)
                return ad.tensor_sum(ad.mul(h, Tensor(w)))

            leaves = [x0]
            for layer in layers:
                for head in layer.heads:
                    leaves += [head.wq, head.wk, head.wv]
                leaves += [layer.wo, layer.ffn_in, layer.ffn_out, layer.ln1_gain,
                           layer.ln1_bias, layer.ln2_gain, layer.ln2_bias]
            check_grads(f, leaves, tol=1e-3)
            cases += 1

        elapsed = time.perf_counter() - t0
        assert cases >= 100, cases
        assert elapsed < 120.0, f"autodiff suite took {elapsed:.1f} s"
        ok(f"autodiff suite ({cases} seeded cases, {elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 2. attention contracts


def small_suite(seed, episodes, **kw):
    kw.setdefault("n_nodes", 12)
    kw.setdefault("n_landmarks", 16)
    kw.setdefault("feat_dim", 8)
    kw.setdefault("rep_factor", 2)
    kw.setdefault("min_hops", 1)
    kw.setdefault("max_hops", 3)
    kw.setdefault("min_dist", 0.0)
    return es.make_suite(seed, n_episodes=episodes, **kw)


def small_params(suite, seed=0, **kw):
    kw.setdefault("hidden", 16)
    kw.setdefault("n_heads", 4)
    kw.setdefault("head_dim", 4)
    kw.setdefault("ffn_dim", 24)
    kw.setdefault("n_layers", 2)
    cfg = ModelConfig(vocab_size=len(suite.vocab), scene_feat_dim=suite.env.feat_dim,
                      obj_feat_dim=suite.env.feat_dim, dir_dim=suite.env.dir_dim, **kw)
    return ModelParams(cfg, seed=seed)


class TestAttentionContracts:
    def test_softmax_sums_masks_and_language_freeze(self):
        # masked softmax: exact zeros, rows sum to one
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = Tensor(rng.standard_normal((5, 7)) * 10)
            mask = rng.random((5, 7)) < 0.6
            mask[:, 0] = True
            y = ad.softmax_rows(x, mask)
            np.testing.assert_allclose(y.data.sum(axis=1), np.ones(5), atol=1e-6)
            assert (y.data[~mask] == 0.0).all()

        # encode-once language freeze + distribution contracts, 100 episodes
        suite = small_suite(1, episodes=100)
        agent = make_agent(small_params(suite, seed=5))
        tcfg = tr.TrainConfig(max_steps=4)
        checked = 0
        for ep in suite.episodes:
            state = agent.init_episode(ep.instruction, ep.episode_id)
            frozen = state.lang_init.data.tobytes()
            pose = ep.start_pose()
            for _ in range(3):
                obs = es.observe(suite.env, pose)
                out = agent.step(state, obs)
                assert out.debug.lang_input_data.tobytes() == frozen
                assert abs(out.p_a.data.sum() - 1.0) <= 1e-6
                assert abs(out.attn_lang.data.sum() - 1.0) <= 1e-6
                assert ((out.p_a.data >= 0) & (out.p_a.data <= 1)).all()
                a = ag.select_action(out.p_a.data, "greedy")
                state = agent.advance(state, out, a, obs)
                if a == obs.stop_index:
                    break
                pose = es.take_action(suite.env, pose, obs.candidates[a].node)
                checked += 1
        assert checked > 50
        ok("attention contracts (sums, exact masking, language freeze x100 episodes)")


# ---------------------------------------------------------------------------
# 3. mask economy


class TestMaskEconomy:
    def test_mac_ratio_exact_on_20_shapes(self):
        rng = np.random.default_rng(2)
        hid, heads, dh, ffn = 16, 4, 4, 24
        layers = [tf.make_encoder_layer(np.random.default_rng(i), hid, heads, dh, ffn)
                  for i in range(2)]
        for _ in range(20):
            n_lang = int(rng.integers(1, 40))
            n_scene = int(rng.integers(1, 12))
            n_obj = int(rng.integers(0, 10))

            def run(policy):
                mask = tf.build_nav_mask(n_lang, n_scene, n_obj, policy)
                x = Tensor(np.random.default_rng(0).standard_normal((mask.n_keys, hid)))
                counter = tf.FlopCounter()
                tf.run_nav_encoder(x, layers, mask, counter)
                return counter.attn_scores

            ours = run(tf.LangAttnPolicy.INIT_ONLY)
            re_encode = run(tf.LangAttnPolicy.EMB_ATTN)
            assert Fraction(ours, re_encode) == Fraction(
                1 + n_scene + n_obj, 1 + n_lang + n_scene + n_obj)
        ok("mask economy (exact MAC ratio on 20 shapes)")


# ---------------------------------------------------------------------------
# 4. decision head


class TestDecisionHead:
    def test_oracle_equivalence_and_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(1, 9))
            n = int(rng.integers(2, 12))
            lo = int(rng.integers(0, n - 1))
            hi = int(rng.integers(lo + 1, n + 1))
            heads = [rng.standard_normal((2, n)) * 3 for _ in range(k)]
            w, _ = ag.mean_head_attention([Tensor(h) for h in heads],
                                          slice(lo, hi), query_row=1)
            mean = np.mean([h[1] for h in heads], axis=0)[lo:hi]
            e = np.exp(mean - mean.max())
            oracle = e / e.sum()
            assert np.abs(w.data[0] - oracle).max() <= 1e-12

            c = float(rng.uniform(0.05, 25.0))
            w2, _ = ag.mean_head_attention([Tensor(c * h) for h in heads],
                                           slice(lo, hi), query_row=1)
            assert int(np.argmax(w.data[0])) == int(np.argmax(w2.data[0]))
        ok("decision head (1000 oracle matches at 1e-12; argmax scale-invariant)")


# ---------------------------------------------------------------------------
# 5. reward units


class TestRewardUnits:
    def test_constants_at_every_branch(self):
        # step progress: +/-1 under both sign conventions
        assert tr.progress_reward(5.0, 4.0, False) == 1.0
        assert tr.progress_reward(4.0, 5.0, False) == -1.0
        assert tr.progress_reward(5.0, 4.0, False, sign_verbatim=True) == -1.0
        assert tr.progress_reward(4.0, 5.0, False, sign_verbatim=True) == 1.0
        # final: +/-2 with a strict 3.0 m boundary
        assert tr.progress_reward(9.0, 2.999999, True) == 2.0
        assert tr.progress_reward(9.0, 3.0, True) == -2.0
        assert tr.progress_reward(9.0, 3.000001, True) == -2.0
        # fidelity: delta on steps, 2 * score on a successful stop
        assert tr.fidelity_rewards(0.5, 0.8, 9.0, 8.0, False)[0] == pytest.approx(0.3)
        assert tr.fidelity_rewards(0.5, 0.8, 2.0, 2.0, True)[0] == pytest.approx(1.6)
        assert tr.fidelity_rewards(0.5, 0.8, 4.0, 3.5, True)[0] == 0.0
        # stop penalty: -2 * (1 - d_prev) under its gate only
        assert tr.fidelity_rewards(0.5, 0.5, 0.5, 2.0, False)[1] == pytest.approx(-1.0)
        assert tr.fidelity_rewards(0.5, 0.5, 1.0, 1.2, False)[1] == pytest.approx(0.0)
        assert tr.fidelity_rewards(0.5, 0.5, 1.5, 2.0, False)[1] == 0.0
        assert tr.fidelity_rewards(0.5, 0.5, 0.5, 0.4, False)[1] == 0.0

        # distance-only ablation drops both fidelity terms
        full = tr.total_reward(1.0, 0.25, -0.5, False)
        assert full == pytest.approx(0.75)
        bare = tr.total_reward(1.0, 0.25, -0.5, False,
                               use_ndtw_reward=False, use_stop_penalty=False)
        assert bare == 1.0
        assert tr.total_reward(2.0, 1.2, 0.0, True,
                               use_ndtw_reward=False, use_stop_penalty=False) == 2.0
        cfg = tr.TrainConfig(use_ndtw_reward=False, use_stop_penalty=False)
        assert not cfg.use_ndtw_reward and not cfg.use_stop_penalty
        ok("reward units (every branch constant, strict boundary, ablation toggle)")


# ---------------------------------------------------------------------------
# 6. warping similarity


class TestNdtwAcceptance:
    def test_dp_exact_vs_enumeration_and_range(self):
        from test_training import brute_force_dtw

        def dist(a, b):
            return abs(a - b)

        rng = np.random.default_rng(4)
        for n in range(1, 7):
            for m in range(1, 7):
                for _ in range(4):
                    pred = list(rng.uniform(0, 9, n))
                    ref = list(rng.uniform(0, 9, m))
                    got = tr.ndtw(pred, ref, dist)
                    want = math.exp(-brute_force_dtw(pred, ref, dist) / (m * 3.0))
                    assert got == want
        for _ in range(200):
            ref = list(rng.uniform(0, 9, rng.integers(1, 7)))
            assert tr.ndtw(ref, ref, dist) == pytest.approx(1.0)
        for _ in range(10_000):
            pred = list(rng.uniform(0, 99, rng.integers(1, 8)))
            ref = list(rng.uniform(0, 99, rng.integers(1, 8)))
            assert 0.0 <= tr.ndtw(pred, ref, dist) <= 1.0
        ok("warping similarity (exact DP vs enumeration <=6; identity; range fuzz)")


# ---------------------------------------------------------------------------
# 7. metric laws


class TestMetricLaws:
    def test_laws_over_1000_random_rollouts(self):
        rng = np.random.default_rng(5)
        total = 0
        for mode, seed in (("r2r", 50), ("reverie", 51)):
            suite = small_suite(seed, episodes=20, mode=mode)
            env = suite.env
            results = []
            for ep in suite.episodes:
                for _ in range(25):
                    node, traj = ep.start, [ep.start]
                    for _ in range(int(rng.integers(0, 8))):
                        node = env.neighbors[node][
                            int(rng.integers(0, len(env.neighbors[node])))]
                        traj.append(node)
                    grounded = None
                    if mode == "reverie" and env.objects[traj[-1]] and rng.random() < 0.8:
                        objs = env.objects[traj[-1]]
                        grounded = objs[int(rng.integers(0, len(objs)))].obj_id
                    results.append(mt.evaluate_trajectory(
                        suite, tr.EpisodeTrace(episode_id=ep.episode_id, mode="greedy",
                                               trajectory=traj, stopped=True,
                                               grounded_object=grounded)))
            total += len(results)
            for r in results:
                assert 0.0 <= r.spl <= 1.0
                assert r.spl <= float(r.success)
                assert r.oracle_success >= r.success
                assert r.rgs <= r.success
            agg = mt.aggregate(results, reverie=(mode == "reverie"))
            assert agg["SPL"] <= agg["SR"] + 1e-9
            assert agg["OSR"] >= agg["SR"] - 1e-9
            if mode == "reverie":
                assert agg["RGS"] <= agg["SR"] + 1e-9
        assert total == 1000
        ok("metric laws (1000 random rollouts, both task modes)")


# ---------------------------------------------------------------------------
# 8 + 9. desk-scale learning and attention progress (shared reference run)


@pytest.fixture(scope="module")
def desk_learning():
    suite = es.make_suite(42, n_nodes=20, n_episodes=200, n_landmarks=29,
                          feat_dim=32, rep_factor=4)
    heldout = es.make_suite(42, n_nodes=20, n_episodes=50, n_landmarks=29,
                            feat_dim=32, rep_factor=4, episode_seed=43)
    assert len(suite.vocab) == 40
    cfg = ModelConfig(vocab_size=40, hidden=32, n_heads=4, head_dim=8, ffn_dim=64,
                      n_layers=2, scene_feat_dim=32, obj_feat_dim=32, dir_dim=16)
    params = ModelParams(cfg, seed=1)
    tcfg = tr.TrainConfig(batch_size=8, max_steps=8, lr=1e-3,
                          iterations=TRAIN_ITERATIONS, eval_every=10**9)
    trainer = Trainer(params, suite, heldout, tcfg, seed=7)
    t0 = time.perf_counter()
    for i in range(1, TRAIN_ITERATIONS + 1):
        trainer.train_iteration(i)
    elapsed = time.perf_counter() - t0
    baseline = tr.random_walk_success_rate(heldout, tcfg.max_steps, trials=20, seed=9)
    return params, suite, heldout, tcfg, baseline, elapsed


class TestDeskScaleLearning:
    def test_learns_past_baseline(self, desk_learning):
        params, suite, heldout, tcfg, baseline, elapsed = desk_learning
        agent = make_agent(params)
        train_traces = tr.greedy_traces(agent, suite, tcfg)
        train_sr = float(np.mean([mt.evaluate_trajectory(suite, t).success
                                  for t in train_traces]))
        held_traces = tr.greedy_traces(agent, heldout, tcfg)
        held_sr = float(np.mean([mt.evaluate_trajectory(heldout, t).success
                                 for t in held_traces]))
        assert elapsed < TRAIN_TIME_BUDGET_S, f"training took {elapsed:.0f} s"
        assert TRAIN_ITERATIONS <= 20_000
        assert train_sr >= TRAIN_SR_FLOOR, f"train SR {train_sr:.3f}"
        assert held_sr > baseline + HELDOUT_MARGIN, \
            f"held-out SR {held_sr:.3f} vs baseline {baseline:.3f}"
        ok(f"desk-scale learning (train SR {train_sr:.3f}, held-out {held_sr:.3f} "
           f"vs baseline {baseline:.3f}, {elapsed:.0f} s)")


class TestAttentionProgress:
    def test_mean_rank_correlation_positive(self, desk_learning):
        params, suite, heldout, tcfg, _, _ = desk_learning
        agent = make_agent(params)
        traces = tr.greedy_traces(agent, heldout, tcfg, collect_attention=True)
        rhos = []
        for trace in traces:
            stat = mt.attention_progress_stat(trace)
            if stat.rho is not None:
                rhos.append(stat.rho)
        mean_rho = float(np.mean(rhos))
        assert len(rhos) >= 30
        assert mean_rho > 0.0
        assert mean_rho >= PROGRESS_RHO_FLOOR, f"mean rho {mean_rho:.3f}"
        ok(f"attention progress (mean Spearman rho {mean_rho:.3f} over {len(rhos)} episodes)")


# ---------------------------------------------------------------------------
# 10. determinism


class TestDeterminism:
    def test_bit_identical_stats_csv(self, tmp_path):
        env_dir = tmp_path / "env"
        assert cli_main(["gen-env", "--seed", "3", "--nodes", "10", "--episodes", "6",
                         "--val-episodes", "3", "--out", str(env_dir),
                         "--landmarks", "12", "--feat-dim", "8", "--rep-factor", "2",
                         "--min-hops", "1", "--max-hops", "3", "--min-dist", "0",
                         "--baseline-trials", "1"]) == 0
        cfg = {"seed": 21,
               "train_suite": str(env_dir / "suite_train.json"),
               "val_suite": str(env_dir / "suite_val.json"),
               "model": {"hidden": 16, "n_heads": 2, "head_dim": 8,
                         "ffn_dim": 24, "n_layers": 1},
               "train": {"iterations": 10, "batch_size": 2, "eval_every": 5,
                         "checkpoint_every": 10, "max_steps": 5}}
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        assert cli_main(["train", "--config", str(cfg_path),
                         "--out", str(tmp_path / "r1")]) == 0
        assert cli_main(["train", "--config", str(cfg_path),
                         "--out", str(tmp_path / "r2")]) == 0
        b1 = (tmp_path / "r1" / "stats.csv").read_bytes()
        b2 = (tmp_path / "r2" / "stats.csv").read_bytes()
        assert b1 == b2
        ok("determinism (bit-identical stats CSV across runs)")


# ---------------------------------------------------------------------------
# 11. two-stream variant


class TestTwoStreamVariant:
    def test_matching_toggle_trains_and_checkpoints_differ(self, tmp_path):
        suite = small_suite(60, episodes=10)
        heldout = small_suite(60, episodes=4, episode_seed=61)
        paths = {}
        for matching in (True, False):
            cfg = ModelConfig(vocab_size=len(suite.vocab), hidden=16, n_heads=4,
                              head_dim=4, ffn_dim=24, variant="two_stream",
                              cross_modal_matching=matching,
                              scene_feat_dim=suite.env.feat_dim,
                              obj_feat_dim=suite.env.feat_dim,
                              dir_dim=suite.env.dir_dim)
            params = ModelParams(cfg, seed=13)
            tcfg = tr.TrainConfig(batch_size=4, max_steps=6, iterations=25,
                                  eval_every=10**9, lr=1e-3)
            trainer = Trainer(params, suite, heldout, tcfg, seed=17)
            for i in range(1, 26):
                parts = trainer.train_iteration(i)
                assert all(np.isfinite(v) for v in parts.values())
            path = tmp_path / f"two_stream_{matching}.bin"
            save_checkpoint(params, path)
            paths[matching] = path.read_bytes()
        assert paths[True] != paths[False]
        ok("two-stream variant (matching on/off both train; checkpoints differ)")
