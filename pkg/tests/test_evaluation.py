import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import harmonic, kth_distance_brute, weighted_prf_brute
from zsiot.contrastive import TrainConfig
from zsiot.errors import StateError, ValidationError
from zsiot.evaluation import (baseline_knn, baseline_mcm, baseline_msp, detection_metrics, gzsl_metrics,
                              harmonic_mean, kfold_aggregate, weighted_group_accuracy)
from zsiot.evaluation.baselines import (CEClassifier, distance_threshold, knn_scores, mcm_scores, score_threshold,
                                        supcon_loss, train_knn_model)
from zsiot.evaluation.experiment import (ABLATION_ROWS, aggregate_rows, format_ablation_table,
                                         format_detection_table, row_name)
from zsiot.iot import IoTEncoderConfig


# --- detection metrics -----------------------------------------------------------

def test_perfect_detection():
    assert detection_metrics([True, False, True], [True, False, True]) == {"precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_all_seen_predictions_on_balanced_truth():
    assert detection_metrics([True] * 4, [True, True, False, False])["recall"] == 0.5


def test_hand_confusion_matrix():
    # TP=8, FN=2, FP=1, TN=9 with Seen positive
    true = [True] * 10 + [False] * 10
    pred = [True] * 8 + [False] * 2 + [True] * 1 + [False] * 9
    m = detection_metrics(pred, true)
    p_seen, r_seen = 8 / 9, 8 / 10
    p_un, r_un = 9 / 11, 9 / 10
    f = lambda p, r: 2 * p * r / (p + r)
    assert m["precision"] == pytest.approx((p_seen + p_un) / 2, abs=1e-12)
    assert m["recall"] == pytest.approx((r_seen + r_un) / 2, abs=1e-12)
    assert m["f1"] == pytest.approx((f(p_seen, r_seen) + f(p_un, r_un)) / 2, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_weighted_f1_matches_confusion_matrix_oracle(pairs):
    pred, true = zip(*pairs)
    m = detection_metrics(pred, true)
    P, R, F = weighted_prf_brute(pred, true)
    assert (m["precision"], m["recall"], m["f1"]) == pytest.approx((P, R, F), abs=1e-12)


def test_empty_detection_input():
    with pytest.raises(ValidationError):
        detection_metrics([], [])


# --- GZSL metrics -------------------------------------------------------------------

def test_harmonic_mean_examples():
    assert harmonic_mean(0.5, 0.5) == 0.5
    assert harmonic_mean(0.9, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert abs(harmonic_mean(0.8, 0.4) - 8 / 15) < 1e-9


@settings(max_examples=300, deadline=None)
@given(s=st.floats(1e-6, 1.0), u=st.floats(1e-6, 1.0))
def test_harmonic_mean_bounds(s, u):
    h = harmonic_mean(s, u)
    assert h == pytest.approx(harmonic(s, u))
    assert min(s, u) - 1e-12 <= h <= (s + u) / 2 + 1e-12


def test_weighted_group_accuracy_is_support_weighted_recall():
    truth = np.array([0, 0, 0, 1])
    pred = np.array([0, 0, 1, 0])
    # recalls 2/3 (support 3) and 0 (support 1)
    assert weighted_group_accuracy(pred, truth, [0, 1]) == pytest.approx(0.5)


def test_missing_class_is_excluded_with_warning(caplog):
    acc = weighted_group_accuracy(np.array([0, 0]), np.array([0, 0]), [0, 5])
    assert acc == 1.0 and "missing" in caplog.text


def test_gzsl_metrics():
    m = gzsl_metrics([0, 1, 2, 3], [0, 0, 2, 2], [0, 1], [2, 3])
    assert m == {"acc_s": 0.5, "acc_u": 0.5, "acc_h": 0.5}


def test_kfold_aggregate():
    agg = kfold_aggregate([{"gzsl": {"acc_h": 0.6}, "tag": "x"}, {"gzsl": {"acc_h": 0.8}, "tag": "y"}])
    assert agg["gzsl"]["acc_h"]["mean"] == pytest.approx(0.7)
    assert agg["gzsl"]["acc_h"]["var"] == pytest.approx(0.01)
    assert "tag" not in agg
    one = kfold_aggregate([{"a": 0.3}])
    assert one["a"] == {"mean": 0.3, "var": 0.0}
    rev = kfold_aggregate([{"gzsl": {"acc_h": 0.8}}, {"gzsl": {"acc_h": 0.6}}])
    assert rev["gzsl"] == agg["gzsl"]


def test_aggregate_uses_mean_of_fold_harmonic_means():
    folds = [gzsl_metrics([0, 2], [0, 2], [0], [2]), gzsl_metrics([0, 0], [0, 2], [0], [2])]
    agg = kfold_aggregate(folds)
    assert agg["acc_h"]["mean"] == pytest.approx(0.5)  # (1 + 0) / 2, not H(1, 0.5)


# --- thresholds and baselines -------------------------------------------------------

def test_thresholds_follow_retention():
    scores = np.arange(1, 11) / 10
    thr = score_threshold(scores, 0.8)
    assert thr == pytest.approx(0.3) and (scores >= thr).mean() == 0.8
    assert distance_threshold(np.arange(1, 11), 0.8) == 8


def test_msp_examples():
    assert baseline_msp(np.eye(3)[[0]], 0.5).tolist() == [True]
    assert baseline_msp(np.full((1, 9), 1 / 9), 0.5).tolist() == [False]
    assert baseline_msp(np.random.default_rng(0).dirichlet(np.ones(4), 10), 0.0).all()


def test_msp_classifier_requires_training():
    clf = CEClassifier(IoTEncoderConfig(2, 8, patch=4, width=8, depth=1, heads=2, feature_dim=8), [0, 1])
    with pytest.raises(StateError):
        clf.predict_proba(np.zeros((1, 2, 8)))


def test_msp_classifier_learns_separable_set():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(2, 0.1, (20, 2, 8)), rng.normal(-2, 0.1, (20, 2, 8))]).astype(np.float32)
    y = np.repeat([3, 5], 20)
    clf = CEClassifier(IoTEncoderConfig(2, 8, patch=4, width=8, depth=1, heads=2, feature_dim=8), [3, 5])
    clf.fit(X, y, TrainConfig(epochs=20, batch_size=8), lr=1e-2)
    assert (np.asarray([3, 5])[clf.predict_proba(X).argmax(1)] == y).all()


def test_knn_examples():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
    assert baseline_knn(E[:1], E, 1, 0.0).tolist() == [True]
    q = np.array([[0.0, 1.0]])
    assert knn_scores(q, E, 3)[0] == pytest.approx(2.0)  # max distance
    assert knn_scores(q, E, 2)[0] == pytest.approx(sorted([1.0, math.sqrt(2), 2.0])[1])
    assert knn_scores(q, E, 2)[0] == pytest.approx(kth_distance_brute(q[0], E, 2))


def test_knn_model_trains_on_noisy_views():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(16, 2, 8)).astype(np.float32)
    m = train_knn_model(X, np.repeat([0, 1], 8), IoTEncoderConfig(2, 8, patch=4, width=8, depth=1, heads=2,
                                                                  feature_dim=8), 4, TrainConfig(epochs=1, batch_size=8))
    assert m.embed(X).shape == (16, 4)


def test_supcon_loss_lower_for_clustered_views():
    lab = torch.tensor([0, 0, 1, 1])
    good = torch.nn.functional.normalize(torch.tensor([[1.0, 0.01], [1.0, -0.01], [0.01, 1.0], [-0.01, 1.0]]), dim=-1)
    bad = good[[0, 2, 1, 3]]
    assert supcon_loss(good, lab, 0.2) < supcon_loss(bad, lab, 0.2)


def test_mcm_examples():
    T = np.eye(3)
    assert baseline_mcm(T[:1], T, 0.99, temperature=0.01).tolist() == [True]
    e = np.array([[0.0, 0.0, 0.0, 1.0]])
    s = mcm_scores(e, np.eye(3, 4), 0.2)
    assert s[0] == pytest.approx(1 / 3)
    assert baseline_mcm(e, np.eye(3, 4), 0.4, 0.2).tolist() == [False]
    E = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(mcm_scores(E, T, 0.5), mcm_scores(E, T[[2, 0, 1]], 0.5))


# --- reporting ------------------------------------------------------------------------

def test_ablation_rows_and_tables():
    assert [row_name(*r) for r in ABLATION_ROWS] == [
        "PE=off,OS=on,DA=on", "PE=on,OS=off,DA=on", "PE=on,OS=on,DA=off", "PE=on,OS=on,DA=on"]
    fold = {row_name(*r): {"gzsl": {"acc_s": 0.5, "acc_u": 0.5, "acc_h": 0.5}} for r in ABLATION_ROWS}
    table = format_ablation_table(aggregate_rows([fold, fold]), "synthetic-imu")
    assert len(table.splitlines()) == 5 and "50.0±0.0%" in table
    det = {m: {"precision": 0.9, "recall": 0.8, "f1": 0.85} for m in ("ours", "msp", "knn", "mcm")}
    assert "MSP" in format_detection_table(aggregate_rows([det]), "x")
