import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import detect_brute, kth_distance_brute
from zsiot.detector import (SEEN, UNSEEN, ClusterStore, build_clusters, calibrate, ceil_quantile, detect,
                            kth_distance, score_matrix, state_fingerprint)
from zsiot.errors import StateError, ValidationError


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_store(rng, n_classes=3, d=4, lo=2, hi=12):
    sizes = rng.integers(lo, hi, size=n_classes)
    clusters = [unit(rng, int(n), d) for n in sizes]
    ks = [int(rng.integers(1, n + 1)) for n in sizes]
    lams = rng.uniform(0.2, 1.6, size=n_classes).tolist()
    return ClusterStore(list(range(n_classes)), clusters, ks, lams, 0.8)


def test_k_rule():
    rng = np.random.default_rng(0)
    E = unit(rng, 155, 3)
    labels = np.array([0] * 100 + [1] * 50 + [2] * 5)
    store = build_clusters(E, labels, 0.08)
    assert store.k == [8, 4, 1]


def test_empty_class_rejected():
    with pytest.raises(ValidationError):
        build_clusters(np.eye(2), [0, 0], 0.08, classes=[0, 1])


def test_k_must_fit_cluster():
    with pytest.raises(ValidationError):
        ClusterStore([0], [np.eye(2)], [3])


def test_kth_distance_examples():
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert kth_distance(np.array([1.0, 0.0]), C, 1) == 0.0
    assert kth_distance(np.array([1.0, 0.0]), C, 2) == pytest.approx(math.sqrt(2))
    assert kth_distance(np.array([1.0, 0.0]), C[::-1], 2) == pytest.approx(math.sqrt(2))


def test_ceil_quantile_by_hand():
    assert ceil_quantile(np.arange(10, 0, -1), 0.8) == 8
    assert ceil_quantile(np.arange(1, 11), 1.0) == 10
    assert ceil_quantile([5.0], 0.01) == 5.0


def test_full_retention_keeps_every_validation_sample():
    rng = np.random.default_rng(1)
    E = unit(rng, 60, 4)
    y = np.repeat([0, 1, 2], 20)
    store = calibrate(build_clusters(E[::2], y[::2]), E[1::2], y[1::2], p=1.0)
    assert detect(E[1::2], store).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.floats(0.05, 1.0))
def test_calibration_retention_per_class(seed, p):
    rng = np.random.default_rng(seed)
    E = unit(rng, 90, 5)
    y = rng.integers(0, 3, size=90)
    y[:6] = [0, 1, 2, 0, 1, 2]
    tr, va = np.arange(90) % 3 != 0, np.arange(90) % 3 == 0
    store = build_clusters(E[tr], y[tr])
    store = calibrate(store, E[va], y[va], p)
    S = score_matrix(store, E[va])
    for i, c in enumerate(store.classes):
        own = S[y[va] == c, i]
        if len(own):
            assert (own <= store.thresholds[i]).mean() >= p - 1e-12


def test_missing_validation_class_falls_back_to_train(caplog):
    rng = np.random.default_rng(0)
    E = unit(rng, 20, 3)
    y = np.repeat([0, 1], 10)
    store = calibrate(build_clusters(E, y), E[:5], y[:5], 0.8)
    assert "absent" in caplog.text
    assert store.calibrated and len(store.thresholds) == 2


def test_detect_examples():
    C = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
    store = ClusterStore([0, 1], C, [1, 1], [0.1, 0.1])
    assert detect(np.array([-1.0, 0.0]), store) == UNSEEN
    assert detect(np.array([0.995, 0.0998]), store) == SEEN  # only class 0 passes
    assert detect(np.array([0.0, 1.0]), store) == SEEN  # exact member


def test_zero_thresholds_reject_points_off_the_clusters():
    rng = np.random.default_rng(0)
    store = random_store(rng)
    store.thresholds = [0.0] * 3
    assert not detect(unit(rng, 20, 4), store).any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng)
    Q = unit(rng, 6, 4)
    batch = detect(Q, store)
    for q, b in zip(Q, batch):
        expected = detect_brute(q.tolist(), [C.tolist() for C in store.clusters], store.k, store.thresholds)
        assert detect(q, store) == expected
        assert (expected == SEEN) == bool(b)
    for C, k in zip(store.clusters, store.k):
        assert kth_distance(Q, C, k) == pytest.approx([kth_distance_brute(q, C, k) for q in Q])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_threshold_monotonicity(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng)
    Q = unit(rng, 30, 4)
    base = detect(Q, store)
    delta = rng.uniform(0, 0.5, size=3)
    up = ClusterStore(store.classes, store.clusters, store.k, (np.array(store.thresholds) + delta).tolist())
    down = ClusterStore(store.classes, store.clusters, store.k, (np.array(store.thresholds) - delta).tolist())
    assert np.all(detect(Q, up) >= base)
    assert np.all(detect(Q, down) <= base)


def test_uncalibrated_store_is_state_error(tmp_path):
    store = build_clusters(np.eye(3), [0, 1, 2])
    with pytest.raises(StateError):
        detect(np.eye(3)[0], store)
    with pytest.raises(StateError):
        store.save(tmp_path / "d.bin")


def test_save_load_checks_fingerprint(tmp_path):
    import torch

    fp = state_fingerprint({"w": torch.ones(2)})
    assert fp == state_fingerprint({"w": torch.ones(2)}) != state_fingerprint({"w": torch.zeros(2)})
    store = random_store(np.random.default_rng(0))
    store.fingerprint = fp
    store.save(tmp_path / "detector.bin")
    back = ClusterStore.load(tmp_path / "detector.bin", fp)
    assert back.k == store.k and back.thresholds == store.thresholds
    assert all(np.array_equal(a, b) for a, b in zip(back.clusters, store.clusters))
    with pytest.raises(StateError, match="calibrate"):
        ClusterStore.load(tmp_path / "detector.bin", "0" * 64)
