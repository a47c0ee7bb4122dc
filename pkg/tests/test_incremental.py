import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, small_config
from harness import probe_run
from oracles import rank_ap
from ttprompt.data import Dataset
from ttprompt.errors import ConfigError, ValidationError
from ttprompt.incremental import (SessionPlan, apply_freeze_schedule, assign_samples, default_base,
                                  evaluate, infer, make_batch, partition_classes, prepare,
                                  run_experiment, session_loss, simulate_missing, summarize,
                                  train_session, zero_impute)
from ttprompt.metrics import average_precision, f1_scores, mean_average_precision
from ttprompt.model import Batch, ModelConfig, PromptModel
from ttprompt.numcore import Rng


def complete_dataset(N=1000, n=6, dim=2, C=4, seed=0):
    g = np.random.default_rng(seed)
    labels = (g.random((N, C)) < 0.4).astype(np.uint8)
    return Dataset([g.normal(size=(N, dim)) for _ in range(n)], np.ones((N, n), dtype=np.uint8), labels)


class TestPartition:
    def test_espgame(self):
        plan = partition_classes(268, 208, 7, np.random.default_rng(0))
        assert plan.C_inc == 10 and [len(c) for c in plan.class_sets] == [208] + [10] * 6

    def test_iaprtc12(self):
        assert partition_classes(291, 231, 7, np.random.default_rng(0)).C_inc == 10

    def test_single_session(self):
        plan = partition_classes(10, 10, 1, np.random.default_rng(0))
        assert plan.T == 1 and sorted(plan.class_sets[0]) == list(range(10))

    def test_remainder_reported(self):
        with pytest.raises(ConfigError, match="remainder 1"):
            partition_classes(12, 3, 3, np.random.default_rng(0))

    def test_inconsistent_mirflickr_split_rejected(self):
        with pytest.raises(ConfigError):
            partition_classes(38, 7, 7, np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 10), st.integers(0, 1000))
    def test_disjoint_cover(self, T, inc, base, seed):
        C = base + inc * (T - 1)
        plan = partition_classes(C, base, T, np.random.default_rng(seed))
        flat = [c for cs in plan.class_sets for c in cs]
        assert sorted(flat) == list(range(C))
        assert sum(len(c) for c in plan.class_sets) == C

    def test_default_base(self):
        assert default_base(12, 3) == 4
        assert default_base(10, 3) == 4
        assert default_base(7, 1) == 7

    def test_shuffle_deterministic(self):
        a = partition_classes(20, 8, 4, np.random.default_rng(3)).class_sets
        b = partition_classes(20, 8, 4, np.random.default_rng(3)).class_sets
        assert a == b


class TestAssign:
    plan = SessionPlan([[0, 1], [2], [3]], 2, 1)

    def test_single_session_sample(self):
        labels = np.array([[0, 0, 0, 1]])
        out = assign_samples(labels, self.plan)
        assert [list(o) for o in out] == [[], [], [0]]

    def test_multi_session_sample(self):
        labels = np.array([[1, 0, 0, 1]])
        out = assign_samples(labels, self.plan)
        assert [list(o) for o in out] == [[0], [], [0]]

    def test_empty_row_excluded(self, caplog):
        labels = np.array([[0, 0, 0, 0], [0, 1, 0, 0]])
        with caplog.at_level(logging.WARNING):
            out = assign_samples(labels, self.plan)
        assert all(0 not in o for o in out)
        assert "excluded 1" in caplog.text

    def test_class_count_mismatch(self):
        with pytest.raises(ConfigError):
            assign_samples(np.zeros((2, 5)), self.plan)


class TestSimulateMissing:
    def test_p_zero(self):
        ds = complete_dataset(N=50)
        out = simulate_missing(ds, 0.0, np.random.default_rng(0))
        assert np.all(out.indicators == 1)
        for a, b in zip(ds.views, out.views):
            assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("p", [0.3, 0.5, 0.7])
    def test_counts_and_coverage(self, p):
        ds = complete_dataset()
        for seed in range(10):
            out = simulate_missing(ds, p, np.random.default_rng(seed))
            assert np.all((out.indicators == 0).sum(axis=0) == round(p * 1000))
            assert np.all(out.indicators.sum(axis=1) >= 1)
            for v, x in enumerate(out.views):
                assert np.all(x[out.indicators[:, v] == 0] == 0)

    def test_infeasible(self):
        ds = complete_dataset(N=20, n=1)
        with pytest.raises(ConfigError):
            simulate_missing(ds, 0.5, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            simulate_missing(complete_dataset(N=20), 1.0, np.random.default_rng(0))

    def test_needs_complete_indicators(self):
        ds = simulate_missing(complete_dataset(N=30), 0.3, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            simulate_missing(ds, 0.3, np.random.default_rng(0))

    def test_idempotent_zeroing(self):
        ds = simulate_missing(complete_dataset(N=60), 0.5, np.random.default_rng(1))
        once = zero_impute(ds)
        twice = zero_impute(once)
        for a, b in zip(once.views, twice.views):
            assert a.tobytes() == b.tobytes()

    def test_deterministic(self):
        ds = complete_dataset(N=100)
        a = simulate_missing(ds, 0.4, np.random.default_rng(5)).indicators
        b = simulate_missing(ds, 0.4, np.random.default_rng(5)).indicators
        assert a.tobytes() == b.tobytes()


class TestMetrics:
    def test_perfect(self):
        y = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        assert mean_average_precision(y.astype(float), y)[0] == 1.0
        assert f1_scores(y.astype(float), y) == (1.0, 1.0)

    def test_inverted_matches_oracle(self):
        g = np.random.default_rng(0)
        y = (g.random((30, 3)) < 0.4).astype(int)
        y[0], y[1] = 1, 0
        scores = 1.0 - y
        ref = np.mean([rank_ap(scores[:, c], y[:, c]) for c in range(3)])
        assert mean_average_precision(scores, y)[0] == pytest.approx(ref, abs=1e-12)

    def test_oracle_random(self):
        g = np.random.default_rng(1)
        for _ in range(30):
            N, C = g.integers(2, 40), g.integers(1, 6)
            scores = np.round(g.random((N, C)), 1)  # force ties
            y = (g.random((N, C)) < 0.3).astype(int)
            for c in range(C):
                a, b = average_precision(scores[:, c], y[:, c]), rank_ap(scores[:, c], y[:, c])
                assert (np.isnan(a) and np.isnan(b)) or abs(a - b) <= 1e-10

    def test_random_scores_near_prevalence(self):
        for seed in range(10):
            g = np.random.default_rng(seed)
            y = np.zeros(1000, dtype=int)
            y[g.permutation(1000)[:500]] = 1
            assert abs(average_precision(g.random(1000), y) - 0.5) <= 0.05

    def test_zero_positive_classes_skipped(self):
        y = np.array([[1, 0], [0, 0], [1, 0]])
        s = np.array([[0.9, 0.1], [0.2, 0.4], [0.8, 0.3]])
        mAP, skipped = mean_average_precision(s, y)
        assert skipped == 1 and mAP == 1.0
        cf1, _ = f1_scores(s, y)
        assert cf1 == 1.0

    def test_threshold_inclusive(self):
        assert f1_scores(np.array([[0.5]]), np.array([[1]])) == (1.0, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_invariances(self, seed):
        g = np.random.default_rng(seed)
        N, C = g.integers(3, 30), g.integers(1, 6)
        s, y = g.random((N, C)), (g.random((N, C)) < 0.5).astype(int)
        m, _ = mean_average_precision(s, y)
        cf1, of1 = f1_scores(s, y)
        for val in (m, cf1, of1):
            assert np.isnan(val) or 0.0 <= val <= 1.0
        perm = g.permutation(C)
        m2, _ = mean_average_precision(s[:, perm], y[:, perm])
        assert (np.isnan(m) and np.isnan(m2)) or abs(m - m2) <= 1e-12
        rows = g.permutation(N)
        assert f1_scores(s[rows], y[rows])[1] == of1


def two_task_model():
    model = PromptModel(ModelConfig(**TINY), np.random.default_rng(0))
    model.add_task(2)
    model.add_task(3)
    g = np.random.default_rng(4)
    batch = Batch([g.normal(size=(5, 3)), g.normal(size=(5, 4))],
                  np.array([[1, 1], [1, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8))
    return model, batch


class TestInfer:
    def test_concatenation_length(self):
        model, batch = two_task_model()
        probs, preds = infer(model, batch)
        assert probs.shape == (5, 5) and preds.shape == (5, 5)
        np.testing.assert_array_equal(probs[:, :2], model.forward(batch, 0).probs)
        np.testing.assert_array_equal(probs[:, 2:], model.forward(batch, 1).probs)

    def test_pathway_independence(self):
        model, batch = two_task_model()
        ref, _ = infer(model, batch)
        model.task_prompts[1].value[...] = 0.0
        out, _ = infer(model, batch)
        assert out[:, :2].tobytes() == ref[:, :2].tobytes()
        assert not np.array_equal(out[:, 2:], ref[:, 2:])

    def test_half_is_positive(self):
        model, batch = two_task_model()
        model.heads[0]["weight"].value[...] = 0.0
        model.heads[0]["bias"].value[...] = 0.0
        probs, preds = infer(model, batch, through=0)
        assert np.all(probs == 0.5) and np.all(preds)


class TestTraining:
    def test_freeze_bytes(self):
        cfg = small_config(epochs=2)
        prep = prepare(cfg, 0)
        model = PromptModel(cfg.model_config(prep.ds.view_dims), np.random.default_rng(0))
        sets = assign_samples(prep.ds.labels[prep.train], prep.plan)
        train_session(model, prep.ds, prep.train[sets[0]], 0, prep.plan.class_sets[0], cfg, np.random.default_rng(1))
        named = model.named_params()
        snap = {k: p.value.tobytes() for k, p in named.items()}
        train_session(model, prep.ds, prep.train[sets[1]], 1, prep.plan.class_sets[1], cfg, np.random.default_rng(2))
        for k, b in snap.items():
            assert model.named_params()[k].value.tobytes() == b, k
        assert model.n_tasks == 2

    def test_descent_small_lr(self):
        wins = 0
        for seed in range(5):
            cfg = small_config(lr=1e-3, epochs=1, batch_size=4)
            prep = prepare(cfg, seed)
            model = PromptModel(cfg.model_config(prep.ds.view_dims), np.random.default_rng(seed))
            classes = prep.plan.class_sets[0]
            idx = prep.train[assign_samples(prep.ds.labels[prep.train], prep.plan)[0]][:4]
            model.add_task(len(classes), np.random.default_rng(seed))
            before = session_loss(model, prep.ds, idx, 0, classes, cfg)
            train_session(model, prep.ds, idx, 0, classes, cfg, np.random.default_rng(seed))
            wins += session_loss(model, prep.ds, idx, 0, classes, cfg) < before
        assert wins >= 3

    def test_lambda_zero_logs_zero_dcl(self):
        cfg = small_config(lam=0.0, epochs=2, T=1)
        res = run_experiment(cfg, 0)
        assert all(e.dcl == 0.0 for log in res.logs for e in log.epochs)
        cfg = small_config(lam=0.01, epochs=2, T=1)
        assert any(e.dcl > 0 for log in run_experiment(cfg, 0).logs for e in log.epochs)

    def test_empty_session(self):
        cfg = small_config()
        prep = prepare(cfg, 0)
        model = PromptModel(cfg.model_config(prep.ds.view_dims), np.random.default_rng(0))
        with pytest.raises(ValidationError):
            train_session(model, prep.ds, [], 0, [0], cfg, np.random.default_rng(0))

    def test_freeze_schedule_switches(self):
        model, _ = two_task_model()
        cfg = small_config()
        live = {id(p) for p in apply_freeze_schedule(model, 1, cfg)}
        named = model.named_params()
        assert live == {id(named[k]) for k in ("prompts.1", "heads.1.weight", "heads.1.bias")}
        cfg = small_config(train_ept_every_session=True, train_encoders_every_session=True)
        live = {id(p) for p in apply_freeze_schedule(model, 1, cfg)}
        assert id(named["bank.basis"]) in live and id(named["encoders.0.weight"]) in live
        assert id(named["prompts.0"]) not in live

    def test_early_stopping_restores_best(self):
        cfg = small_config(epochs=8, patience=2, lr=0.05)
        res = run_experiment(cfg, 0)
        for log in res.logs:
            vals = [e.val_map for e in log.epochs]
            assert log.best_epoch == 1 + int(np.argmax(vals))


class TestRunExperiment:
    def test_single_session(self):
        cfg = small_config(T=1)
        res = run_experiment(cfg, 0)
        assert len(res.report["sessions"]) == 1
        m = evaluate(res.model, res.prepared.ds, res.prepared.test, res.prepared.plan, 0)
        assert res.report["last_mAP"] == m.mAP == res.report["average_mAP"]

    def test_deterministic_report(self):
        cfg = small_config()
        a = json.dumps(run_experiment(cfg, 1).report)
        b = json.dumps(run_experiment(cfg, 1).report)
        assert a == b
        assert json.dumps(run_experiment(cfg, 2).report) != a

    def test_report_invariants(self):
        cfg = small_config()
        rep = run_experiment(cfg, 0).report
        maps = [s["mAP"] for s in rep["sessions"]]
        assert abs(rep["average_mAP"] - np.mean(maps)) <= 1e-12
        assert rep["sessions"][-1]["cumulative_classes"] == 6
        for s in rep["sessions"]:
            for key in ("mAP", "CF1", "OF1"):
                assert 0.0 <= s[key] <= 1.0
        assert rep["config_hash"] == cfg.digest() and rep["seed"] == 0
        assert rep["data"]["missing_per_view"] == [round(0.3 * 240)] * 3

    def test_freeze_across_sessions(self):
        maps, freeze_ok = probe_run(small_config(), 0)
        assert all(freeze_ok) and len(maps) == 3

    def test_probe_run_matches_run_experiment(self):
        cfg = small_config()
        maps, _ = probe_run(cfg, 3)
        assert maps == [s["mAP"] for s in run_experiment(cfg, 3).report["sessions"]]

    def test_summarize(self):
        out = summarize([{"seed": 0, "average_mAP": 0.5, "last_mAP": 0.4},
                         {"seed": 1, "average_mAP": 0.7, "last_mAP": 0.6}])
        assert out["last_mAP"]["mean"] == pytest.approx(0.5)
        assert out["average_mAP"]["std"] == pytest.approx(0.1)

    def test_make_batch_restricts_labels(self):
        cfg = small_config()
        prep = prepare(cfg, 0)
        b = make_batch(prep.ds, [0, 1, 2], [4, 1])
        np.testing.assert_array_equal(b.labels, prep.ds.labels[[0, 1, 2]][:, [4, 1]])

    def test_prepare_deterministic(self):
        cfg = small_config()
        a, b = prepare(cfg, 4), prepare(cfg, 4)
        assert a.ds.indicators.tobytes() == b.ds.indicators.tobytes()
        assert a.plan.class_sets == b.plan.class_sets
        assert a.test.tobytes() == b.test.tobytes()

    def test_rng_streams_per_seed(self):
        assert Rng(0).stream("batches", 1).random() == Rng(0).stream("batches", 1).random()
