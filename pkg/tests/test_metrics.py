import math

import numpy as np
import pytest

from navformer import envsim as es
from navformer import metrics as mt
from navformer import training as tr
from navformer.autodiff import ContractError


def line_env(spacing=4.0, n=5):
    """Nodes on a line, spacing meters apart."""
    positions = np.array([[i * spacing, 0.0, 0.0] for i in range(n)])
    edges = [(i, i + 1) for i in range(n - 1)]
    return es.Environment(seed=0, positions=positions, edges=edges,
                          landmarks=np.arange(n), objects=[[] for _ in range(n)])


def line_suite(spacing=4.0, n=5, start=0, goal=3):
    env = line_env(spacing, n)
    vocab = es.Vocab.build(n)
    path = env.shortest_path_nodes(start, goal)
    ep = es.Episode(episode_id=0, start=start, goal=goal, start_heading=0.0,
                    path=path, instruction=[vocab.id("stop")])
    return es.EpisodeSuite(env=env, vocab=vocab, episodes=[ep], mode="r2r", seed=0)


def trace_of(traj, stopped=True, grounded=None, episode_id=0):
    return tr.EpisodeTrace(episode_id=episode_id, mode="greedy", trajectory=list(traj),
                           stopped=stopped, grounded_object=grounded)


class TestEvaluateTrajectory:
    def test_perfect_run(self):
        suite = line_suite()
        r = mt.evaluate_trajectory(suite, trace_of([0, 1, 2, 3]))
        assert r.success and r.spl == pytest.approx(1.0)
        assert r.ne == 0.0 and r.tl == pytest.approx(12.0)
        assert r.ndtw == pytest.approx(1.0)

    def test_never_moves(self):
        suite = line_suite(spacing=5.0, goal=2)  # start 10 m out
        r = mt.evaluate_trajectory(suite, trace_of([0]))
        assert r.ne == pytest.approx(10.0)
        assert not r.success and r.spl == 0.0

    def test_detour_discounts_success(self):
        # reach the goal, walk one extra edge (2 m) and come back
        suite = line_suite(spacing=2.0, goal=3)
        r = mt.evaluate_trajectory(suite, trace_of([0, 1, 2, 3, 4, 3]))
        ideal = 6.0
        assert r.success
        assert r.spl == pytest.approx(ideal / (ideal + 4.0))

    def test_oracle_counts_passing_viewpoints(self):
        suite = line_suite(spacing=4.0, goal=2)
        # walks through the goal and beyond, ends far away
        r = mt.evaluate_trajectory(suite, trace_of([0, 1, 2, 3, 4]))
        assert not r.success and r.oracle_success

    def test_wrong_start_rejected(self):
        suite = line_suite()
        with pytest.raises(ContractError):
            mt.evaluate_trajectory(suite, trace_of([1, 2]))

    def test_non_edge_rejected(self):
        suite = line_suite()
        with pytest.raises(ContractError):
            mt.evaluate_trajectory(suite, trace_of([0, 2]))

    def test_purity(self):
        suite = line_suite()
        a = mt.evaluate_trajectory(suite, trace_of([0, 1, 2]))
        b = mt.evaluate_trajectory(suite, trace_of([0, 1, 2]))
        assert a == b


def reverie_fixture():
    suite = es.make_suite(40, n_nodes=10, n_episodes=8, mode="reverie",
                          n_landmarks=12, feat_dim=4, rep_factor=1,
                          min_hops=1, max_hops=3, min_dist=0.0, extent_m=15.0)
    return suite


class TestGroundingMetrics:
    def test_rgs_requires_correct_object(self):
        suite = reverie_fixture()
        ep = suite.episodes[0]
        path = ep.path
        good = mt.evaluate_trajectory(suite, trace_of(path, grounded=ep.target_object))
        assert good.success and good.rgs
        assert good.rgspl == pytest.approx(good.spl)
        other = [o.obj_id for o in suite.env.objects[ep.goal]
                 if o.obj_id != ep.target_object][0]
        bad = mt.evaluate_trajectory(suite, trace_of(path, grounded=other))
        assert bad.success and not bad.rgs and bad.rgspl == 0.0

    def test_metric_laws_random_rollouts(self):
        rng = np.random.default_rng(3)
        for mode in ("r2r", "reverie"):
            suite = es.make_suite(41, n_nodes=10, n_episodes=40, mode=mode,
                                  n_landmarks=12, feat_dim=4, rep_factor=1,
                                  min_hops=1, max_hops=3, min_dist=0.0, extent_m=15.0)
            env = suite.env
            results = []
            for ep in suite.episodes:
                for _ in range(25):
                    node = ep.start
                    traj = [node]
                    for _ in range(rng.integers(0, 7)):
                        node = env.neighbors[node][rng.integers(0, len(env.neighbors[node]))]
                        traj.append(node)
                    grounded = None
                    if mode == "reverie" and env.objects[traj[-1]]:
                        objs = env.objects[traj[-1]]
                        grounded = objs[rng.integers(0, len(objs))].obj_id
                    results.append(mt.evaluate_trajectory(
                        suite, trace_of(traj, grounded=grounded,
                                        episode_id=ep.episode_id)))
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


class TestAttentionProgress:
    @staticmethod
    def trace_with_weights(weight_rows):
        trace = trace_of([0])
        for w in weight_rows:
            trace.records.append(tr.StepRecord(
                action=0, teacher=0, is_stop=False, d_prev=0, d_cur=0,
                p_prev=0, p_cur=0, lang_weights=np.asarray(w, dtype=float)))
        return trace

    def test_uniform_attention_gives_zero(self):
        stat = mt.attention_progress_stat(
            self.trace_with_weights([[0.25] * 4] * 5))
        assert stat.rho == 0.0
        assert all(c == pytest.approx(1.5) for c in stat.centroids)

    def test_one_hot_advance_gives_one(self):
        rows = [np.eye(6)[i] for i in range(5)]
        stat = mt.attention_progress_stat(self.trace_with_weights(rows))
        assert stat.rho == pytest.approx(1.0)
        assert stat.centroids == pytest.approx([0, 1, 2, 3, 4])

    def test_single_step_undefined(self):
        stat = mt.attention_progress_stat(self.trace_with_weights([[1.0, 0.0]]))
        assert stat.rho is None

    def test_matches_naive_spearman(self):
        def naive_spearman(xs, ys):
            def ranks(v):
                order = np.argsort(v, kind="stable")
                r = np.empty(len(v))
                r[order] = np.arange(1, len(v) + 1)
                # average ranks over exact ties
                for val in set(v):
                    ix = [i for i, x in enumerate(v) if x == val]
                    r[ix] = np.mean(r[ix])
                return r
            rx, ry = ranks(list(xs)), ranks(list(ys))
            rx -= rx.mean()
            ry -= ry.mean()
            denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
            return float(rx @ ry) / denom if denom else 0.0

        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(3, 9))
            rows = []
            for _ in range(n):
                w = rng.random(7)
                rows.append(w / w.sum())
            stat = mt.attention_progress_stat(self.trace_with_weights(rows))
            want = naive_spearman(range(1, n + 1), stat.centroids)
            assert stat.rho == pytest.approx(want, abs=1e-9)


class TestAggregate:
    def test_column_order_and_percentages(self):
        suite = line_suite()
        results = [mt.evaluate_trajectory(suite, trace_of([0, 1, 2, 3]))]
        agg = mt.aggregate(results)
        csv_text = mt.table_csv(agg)
        header = csv_text.splitlines()[0]
        assert header == "TL,NE,SR,SPL,OSR,RGS,RGSPL,nDTW"
        assert agg["SR"] == 100.0
        txt = mt.table_text(agg)
        assert "TL" in txt and "nDTW" in txt

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            mt.aggregate([])
