"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
Criteria 8-11 train full models on the three synthetic modalities (about 20 min
on one CPU core) and share one module-scoped run.
"""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_report import report
from oracles import contrastive_loss_literal, detect_brute, harmonic, window_offsets_brute
from test_augmentation import ConstantCritic, LinearUnitCritic
from test_cli import tiny
from test_contrastive import _gradient_error, lib_loss, random_batch
from test_text import _fusion_gradient_error
from zsiot.augmentation import Generator, wgan_loss
from zsiot.cli import main
from zsiot.config import load_config, run_dir
from zsiot.data import prepare_dataset
from zsiot.data.windows import expected_window_count, window_offsets
from zsiot.detector import ClusterStore, build_clusters, calibrate, detect, score_matrix
from zsiot.evaluation import harmonic_mean
from zsiot.evaluation.experiment import make_folds, run_ablation_fold, run_baselines_fold, selected_folds


def C(n):
    return f"C{n}"


# --- C1: gradients ----------------------------------------------------------------

def test_c1_gradients():
    loss_err = [_gradient_error(s) for s in range(20)]
    fuse_err = [_fusion_gradient_error(s) for s in range(20)]
    ok = max(loss_err) < 1e-4 and max(fuse_err) < 1e-4
    assert report(C(1), ok, f"gradient vs central differences: loss worst {max(loss_err):.1e}, "
                           f"fusion worst {max(fuse_err):.1e} (20 instances each, tol 1e-4)")


# --- C2: literal loss ---------------------------------------------------------------

def test_c2_literal_loss():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n, d, c = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 5))
        E, labels, T = random_batch(rng, n, d, c)
        tau = float(rng.choice([0.1, 0.2, 0.5, 1.0]))
        worst = max(worst, abs(lib_loss(E, labels, T, tau) - contrastive_loss_literal(E, labels, T, range(c), tau)))
    assert report(C(2), worst < 1e-6, f"loss vs literal summation: worst abs err {worst:.1e} on 100 batches "
                                      "(N_B<=8, d<=8, tol 1e-6)")


# --- C3: WGAN-GP ----------------------------------------------------------------------

def test_c3_wgan_gp():
    G = Generator(2, 3, (2, 3)).double()
    x = torch.randn(16, 2, 3, dtype=torch.float64)
    t = torch.randn(16, 3, dtype=torch.float64)
    const = [float(wgan_loss(ConstantCritic(1.5), G, x, t, xi).value) for xi in (0.5, 1.0, 10.0)]
    const_ok = all(abs(v + xi) < 1e-12 for v, xi in zip(const, (0.5, 1.0, 10.0)))
    pens = [float(wgan_loss(LinearUnitCritic((2, 3), seed=s), G, x, t, 10.0).penalty) for s in range(10)]
    ok = const_ok and max(pens) < 1e-6
    assert report(C(3), ok, f"constant critic gives -xi: {const_ok}; unit-gradient critic penalty max "
                           f"{max(pens):.1e} (tol 1e-6)")


# --- C4: detector ------------------------------------------------------------------------

def _unit(rng, n, d):
    E = rng.normal(size=(n, d))
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def test_c4_detector():
    rng = np.random.default_rng(4)
    brute_ok = retention_ok = mono_ok = True
    for _ in range(50):
        E = _unit(rng, 120, 4)
        y = rng.integers(0, 3, size=120)
        y[:6] = [0, 1, 2, 0, 1, 2]
        p = float(rng.uniform(0.1, 1.0))
        tr = np.arange(120) % 3 != 0
        store = calibrate(build_clusters(E[tr], y[tr]), E[~tr], y[~tr], p)
        Q = _unit(rng, 10, 4)
        fast = detect(Q, store)
        slow = [detect_brute(q.tolist(), [Cl.tolist() for Cl in store.clusters], store.k, store.thresholds) == "Seen"
                for q in Q]
        brute_ok &= bool(np.array_equal(fast, slow))
        S = score_matrix(store, E[~tr])
        for i, c in enumerate(store.classes):
            own = S[y[~tr] == c, i]
            retention_ok &= bool((own <= store.thresholds[i]).mean() >= p - 1e-12)
        delta = rng.uniform(0, 0.3, size=3)
        up = ClusterStore(store.classes, store.clusters, store.k, (np.array(store.thresholds) + delta).tolist())
        mono_ok &= bool(np.all(detect(Q, up) >= fast))
    ok = brute_ok and retention_ok and mono_ok
    assert report(C(4), ok, f"detector on 50 instances: brute force {brute_ok}, per-class retention >= p "
                           f"{retention_ok}, threshold monotonicity {mono_ok}")


# --- C5: harmonic mean -----------------------------------------------------------------------

def test_c5_harmonic_mean():
    rng = np.random.default_rng(5)
    s, u = rng.uniform(1e-6, 1, 1000), rng.uniform(1e-6, 1, 1000)
    H = np.array([harmonic_mean(a, b) for a, b in zip(s, u)])
    bounds = bool(np.all(H >= np.minimum(s, u) - 1e-12) and np.all(H <= (s + u) / 2 + 1e-12))
    oracle = bool(np.allclose(H, [harmonic(a, b) for a, b in zip(s, u)], atol=1e-12))
    s[:100] = u[:100]  # equal pairs
    H = np.array([harmonic_mean(a, b) for a, b in zip(s, u)])
    tight = np.isclose(H, np.minimum(s, u), rtol=0, atol=1e-12) | np.isclose(H, (s + u) / 2, rtol=0, atol=1e-12)
    iff = bool(np.array_equal(tight, s == u))
    ex = abs(harmonic_mean(0.8, 0.4) - 8 / 15)
    ok = bounds and oracle and iff and ex < 1e-9
    assert report(C(5), ok, f"harmonic mean within [min, arithmetic mean] on 1000 pairs: {bounds}, "
                           f"equality iff equal: {iff}; H(0.8, 0.4) - 8/15 = {ex:.1e}")


# --- C6: windowing ------------------------------------------------------------------------------

def test_c6_window_count():
    L = round(1.28 * 100)
    ok = all(expected_window_count(T, L, 0.5) == len(window_offsets(T, L, 0.5)) == len(window_offsets_brute(T, L, 0.5))
             for T in range(0, 3000, 7))
    assert report(C(6), ok, f"closed-form count equals enumeration for L={L} at 50% overlap, T in [0, 3000)")


def test_c6_usc_had_total():
    root = Path(os.environ.get("ZSIOT_DATA_ROOT", "data"))
    if not (root / "usc-had" / "raw").exists():
        report("C6b", True, f"USC-HAD total (no data under {root / 'usc-had' / 'raw'})", skipped=True)
        pytest.skip("USC-HAD not available")
    n = len(prepare_dataset("usc-had", root))
    assert report("C6b", n == 42_708, f"USC-HAD window total {n} (expected 42708)")


# --- C7: deterministic training ----------------------------------------------------------------

def test_c7_bit_identical_checkpoints(tmp_path):
    args = ["train", *tiny(tmp_path)]
    ckpt = run_dir(load_config(overrides=args[2::2])) / "fold_0" / "model.ckpt"
    assert main(args) == 0
    first = ckpt.read_bytes()
    assert main(args) == 0
    second = ckpt.read_bytes()
    assert report(C(7), first == second, f"two `train` runs give identical checkpoints ({len(first)} bytes)")


# --- C8-C11: synthetic three-modality corpus -----------------------------------------------------

MODALITIES = ("imu", "mmwave", "wifi")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    out = {}
    for mod in MODALITIES:
        cfg = load_config(dataset=f"synthetic-{mod}", overrides=[f"dataset.root={root}", "train.epochs=40"])
        ws = prepare_dataset(cfg["dataset"]["name"], root, **cfg["dataset"]["synthetic"])
        for fold in selected_folds(cfg, make_folds(cfg, ws)):
            rows = run_ablation_fold(cfg, ws, fold, keep_models=True)
            models = rows.pop("_models")
            det = run_baselines_fold(cfg, ws, fold, models["full"], models["template"][0])
            out[(mod, fold.fold_index)] = (rows, det)
    return out


def _acc(rows, row, key):
    return rows[row]["gzsl"][key]


FULL, NO_OS, NO_DA, NO_PE = "PE=on,OS=on,DA=on", "PE=on,OS=off,DA=on", "PE=on,OS=on,DA=off", "PE=off,OS=on,DA=on"


@pytest.mark.slow
def test_c8_open_set_gain(corpus):
    ratios = {k: (_acc(r, FULL, "acc_h"), _acc(r, NO_OS, "acc_h")) for k, (r, _) in corpus.items()}
    bad = [f"{m}/{f}: {on:.3f} vs {off:.3f}" for (m, f), (on, off) in ratios.items() if on < 1.5 * off]
    ok = not bad
    assert report(C(8), ok, "ACC_H with O.S. >= 1.5 x without, every fold: "
                           + ("all 9 folds" if ok else f"{len(bad)}/9 folds short ({'; '.join(bad)})"))


@pytest.mark.slow
def test_c9_augmentation_keeps_unseen_accuracy(corpus):
    on = np.mean([_acc(r, FULL, "acc_u") for r, _ in corpus.values()])
    off = np.mean([_acc(r, NO_DA, "acc_u") for r, _ in corpus.values()])
    assert report(C(9), on >= off - 0.01, f"mean ACC_U with D.A. {on:.3f} vs without {off:.3f} (allowance 1 pt)")


@pytest.mark.slow
def test_c10_fused_prompts_beat_template(corpus):
    fused = np.mean([_acc(r, FULL, "acc_h") for r, _ in corpus.values()])
    templ = np.mean([_acc(r, NO_PE, "acc_h") for r, _ in corpus.values()])
    assert report(C(10), fused >= templ, f"mean ACC_H fused {fused:.3f} vs template {templ:.3f}")


@pytest.mark.slow
def test_c11_detector_beats_msp(corpus):
    ours = np.mean([d["ours"]["f1"] for _, d in corpus.values()])
    msp = np.mean([d["msp"]["f1"] for _, d in corpus.values()])
    assert report(C(11), ours >= msp, f"mean detection F1 ours {ours:.3f} vs MSP {msp:.3f}")


def test_c12_full_data_targets():
    report(C(12), True, "full-data targets are documented only (see README)", skipped=True)
    pytest.skip("full-data reproduction targets are documented, not tested")
