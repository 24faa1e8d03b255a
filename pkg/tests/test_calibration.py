from datetime import timedelta

import numpy as np
import pytest
import scipy.optimize

from wxpipe.calibration import (
    ExperimentOutput, KExceedsN, TooFewRows, candidates_for_kind,
    correct_dataset, final_correction, kfold_indices, learning_pipeline,
    out_of_fold_matrix, pair_hourly, paired_csv_lines, parse_paired_csv,
    postprocess_predictions, rank_models, run_experiments, split_dataset,
    super_learner,
)
from wxpipe.learners import FeatureMismatch, LearnerSpec, default_candidates
from wxpipe.metrics import r2
from wxpipe.records import SENSORS, HourlyRecord

from conftest import T0, affine_paired

FAST = default_candidates(n_trees=10, max_depth=8)


class TestSplit:
    def test_sixty_forty(self):
        train, test = split_dataset(10, 0.6, "random", 1)
        assert len(train) == 6 and len(test) == 4
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))

    def test_deterministic(self):
        a = split_dataset(100, 0.6, "random", 7)
        b = split_dataset(100, 0.6, "random", 7)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_chronological_is_prefix(self, paired_at):
        train, test = split_dataset(paired_at, 0.6, "chronological", 0)
        assert np.array_equal(train, np.arange(432))
        assert np.array_equal(test, np.arange(432, 720))
        # 60% of 30 days is exactly the first 18 days
        assert paired_at.hours[train[-1]] < T0 + timedelta(days=18)
        assert paired_at.hours[test[0]] >= T0 + timedelta(days=18)

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            split_dataset(4, 0.6, "random", 0)


class TestKfold:
    def test_singletons(self):
        folds = kfold_indices(10, 10, 0)
        assert sorted(len(f) for f in folds) == [1] * 10

    def test_balanced_23_10(self):
        folds = kfold_indices(23, 10, 5)
        assert sorted(len(f) for f in folds) == [2] * 7 + [3] * 3

    def test_partition_law(self):
        folds = kfold_indices(57, 10, 2)
        joined = np.concatenate(folds)
        assert len(joined) == 57
        assert np.array_equal(np.sort(joined), np.arange(57))

    def test_k_exceeds_n(self):
        with pytest.raises(KExceedsN):
            kfold_indices(5, 10, 0)


class TestSuperLearner:
    def test_single_candidate_gets_weight_one(self, paired_at):
        model = super_learner(paired_at.covariates, paired_at.pws,
                              SENSORS.index("AT"), [LearnerSpec("lm")],
                              n_folds=10, seed=3)
        assert model.meta["weights"] == {"lm": 1.0}

    def test_noiseless_linear_puts_weight_on_lm(self):
        data = affine_paired(sigma=0.0, seed=4)
        X, y = data.covariates, data.pws
        candidates = [LearnerSpec("mean"), LearnerSpec("lm")]
        model = super_learner(X, y, SENSORS.index("AT"), candidates,
                              n_folds=10, seed=1)
        assert model.meta["weights"]["lm"] == pytest.approx(1.0, abs=1e-6)
        # cross-check the stacking weights against an external NNLS oracle
        Z = out_of_fold_matrix(X, y, SENSORS.index("AT"), candidates, 10, 1)
        w_ref, _ = scipy.optimize.nnls(Z, y)
        w_ref = w_ref / w_ref.sum()
        assert model.meta["weights"]["mean"] == pytest.approx(w_ref[0], abs=1e-6)
        assert model.meta["weights"]["lm"] == pytest.approx(w_ref[1], abs=1e-6)

    def test_ensemble_cv_mse_never_beaten_by_candidate(self, paired_at):
        model = super_learner(paired_at.covariates, paired_at.pws,
                              SENSORS.index("AT"), FAST, n_folds=10, seed=2)
        best_single = min(model.meta["candidate_cv_mse"].values())
        assert model.meta["cv_mse"] <= best_single + 1e-9

    def test_weights_form_simplex(self, paired_at):
        model = super_learner(paired_at.covariates, paired_at.pws,
                              SENSORS.index("AT"), FAST, n_folds=10, seed=5)
        weights = np.array(list(model.meta["weights"].values()))
        assert (weights >= 0).all()
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)


class TestLearningPipeline:
    def test_deterministic(self, paired_at):
        a = learning_pipeline(paired_at, "ensemble", seed=1, base=FAST)
        b = learning_pipeline(paired_at, "ensemble", seed=1, base=FAST)
        assert np.array_equal(a.yhat, b.yhat)
        assert a.metrics == b.metrics
        assert np.array_equal(a.train_idx, b.train_idx)

    def test_correction_beats_raw_r2(self):
        data = affine_paired(gain=1.07, offset=-1.0, sigma=0.3, seed=6)
        out = learning_pipeline(data, "ensemble", seed=1, base=FAST)
        raw = r2(data.pws[out.test_idx], data.lcaws[out.test_idx])
        assert out.metrics.r2 >= raw

    def test_ensemble_average_of_two_members(self, paired_at):
        out = learning_pipeline(paired_at, "ensemble", seed=1, base=FAST)
        pl = out.model.payload
        X = paired_at.covariates[out.test_idx]
        manual = sum(w * m.predict(X) for w, m in zip(pl["weights"], pl["models"]))
        assert np.allclose(out.yhat, manual)


class TestRunExperiments:
    def test_product_count_and_seed_sharing(self, paired_at):
        res = run_experiments(paired_at, ["lm", "mlr"], [1, 2], base=FAST)
        assert len(res) == 4
        assert np.array_equal(res[("lm", 1)].train_idx,
                              res[("mlr", 1)].train_idx)
        assert not np.array_equal(res[("lm", 1)].train_idx,
                                  res[("lm", 2)].train_idx)

    def test_shared_path_equals_independent_runs(self, paired_at):
        res = run_experiments(paired_at, ["lm", "forest", "ensemble"], [3],
                              base=FAST)
        for kind in ("lm", "forest", "ensemble"):
            solo = learning_pipeline(paired_at, kind, seed=3, base=FAST)
            assert np.array_equal(res[(kind, 3)].yhat, solo.yhat), kind
            assert res[(kind, 3)].metrics == solo.metrics


class TestRanking:
    def test_dominant_kind_ranks_first_with_significance(self):
        data = affine_paired(sigma=0.5, seed=8)
        res = run_experiments(data, ["lm", "mean"], list(range(1, 13)),
                              base=FAST)
        rows = rank_models(res)
        assert rows[0].kind == "lm" and rows[0].rank == 1
        assert rows[0].t_value is None
        assert all(row.r2_sd > 0 for row in rows)
        mean_row = rows[1]
        assert mean_row.kind == "mean"
        assert mean_row.p_value < 0.001

    def test_identical_kinds_tie(self, paired_at):
        res = run_experiments(paired_at, ["lm"], [1, 2, 3], base=FAST)
        duplicated = {("lm", s): o for (_k, s), o in res.items()}
        duplicated |= {("copy", s): ExperimentOutput(
            kind="copy", seed=o.seed, sensor=o.sensor, model=o.model,
            train_idx=o.train_idx, test_idx=o.test_idx, yhat=o.yhat,
            metrics=o.metrics) for (_k, s), o in res.items()}
        rows = rank_models(duplicated)
        assert rows[1].tie and rows[1].t_value is None

    def test_baseline_entry_participates(self, paired_at):
        res = run_experiments(paired_at, ["lm"], [1, 2], base=FAST)
        baseline = {}
        for (_k, seed), out in res.items():
            baseline[seed] = r2(paired_at.pws[out.test_idx],
                                paired_at.lcaws[out.test_idx])
        rows = rank_models(res, baseline_r2=baseline)
        assert {r.kind for r in rows} == {"lm", "raw"}

    def test_mismatched_seed_sets_rejected(self, paired_at):
        res = run_experiments(paired_at, ["lm"], [1, 2], base=FAST)
        res.pop(("lm", 2))
        res |= {("mlr", 3): learning_pipeline(paired_at, "mlr", 3, base=FAST)}
        with pytest.raises(ValueError):
            rank_models(res)


def _hourly_rows(n=48):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n):
        rows.append(HourlyRecord(
            hour_start=T0 + timedelta(hours=i),
            ap_mean=1013.0 + rng.normal(), at_mean=22.0 + rng.normal(),
            rh_mean=60.0 + rng.normal(), rg_sum=float(abs(rng.normal()) / 5),
            ws_mean=float(abs(rng.normal())), wd_mean=float(rng.uniform(0, 360)),
            n_samples=60))
    return rows


class TestCorrection:
    def test_identity_model_keeps_column(self):
        rows = _hourly_rows()
        from wxpipe.learners import FittedModel
        identity = FittedModel(kind="lm", target_col=SENSORS.index("AT"),
                               n_features=6,
                               payload={"intercept": 0.0, "coef": 1.0})
        out = correct_dataset(identity, rows, "AT")
        assert [r.at_mean for r in out] == [r.at_mean for r in rows]
        assert [r.ap_mean for r in out] == [r.ap_mean for r in rows]

    def test_negative_ws_clamped(self):
        rows = _hourly_rows()
        from wxpipe.learners import FittedModel
        pessimist = FittedModel(kind="mean", target_col=SENSORS.index("WS"),
                                n_features=6, payload={"value": -0.02})
        out = correct_dataset(pessimist, rows, "WS")
        assert all(r.ws_mean == 0.0 for r in out)

    def test_wd_normalized(self):
        assert postprocess_predictions("WD", np.array([-10.0, 370.0])) == \
            pytest.approx([350.0, 10.0])

    def test_sensor_mismatch_rejected(self):
        from wxpipe.learners import FittedModel
        model = FittedModel(kind="mean", target_col=SENSORS.index("WS"),
                            n_features=6, payload={"value": 1.0})
        with pytest.raises(FeatureMismatch):
            correct_dataset(model, _hourly_rows(), "AT")

    def test_end_to_end_correction_reduces_rmse(self):
        data = affine_paired(gain=1.1, offset=1.5, sigma=0.4, seed=10)
        fc = final_correction(data, base=FAST)
        assert fc.corrected_metrics.rmse < fc.raw_metrics.rmse
        assert fc.corrected_metrics.r2 > fc.raw_metrics.r2

    def test_corrected_r2_close_to_raw_even_without_distortion(self):
        # identity channel: correction may not help but must not hurt much
        data = affine_paired(gain=1.0, offset=0.0, sigma=0.3, seed=11)
        fc = final_correction(data, base=FAST)
        assert fc.corrected_metrics.r2 >= fc.raw_metrics.r2 - 0.02


class TestPairing:
    def test_inner_join_on_hours(self):
        lc = _hourly_rows(10)
        pws = _hourly_rows(10)[3:]
        data = pair_hourly(lc, pws, "AT")
        assert len(data) == 7
        assert data.hours[0] == pws[0].hour_start
        assert data.covariates.shape == (7, 6)
        assert np.array_equal(data.covariates[:, SENSORS.index("AT")],
                              data.lcaws)

    def test_csv_round_trip(self, paired_at):
        text = "".join(paired_csv_lines(paired_at))
        again = parse_paired_csv(text, "AT")
        assert again.hours == paired_at.hours
        assert np.allclose(again.lcaws, paired_at.lcaws)
        assert np.allclose(again.pws, paired_at.pws)
        assert np.allclose(again.covariates, paired_at.covariates)


def test_candidates_for_kind_ensemble_is_pool():
    assert candidates_for_kind("ensemble", FAST) == list(FAST)
    assert candidates_for_kind("lm", FAST) == [LearnerSpec("lm")]
    with pytest.raises(ValueError):
        candidates_for_kind("svm", FAST)
