import json

import numpy as np
import pytest

from zsiot.cli import main
from zsiot.pipeline import CLOUD, EDGE
from zsiot.config import load_config, run_dir


def tiny(tmp_path, *extra):
    ov = [f"run_root={tmp_path / 'runs'}", f"dataset.root={tmp_path / 'data'}",
          "dataset.synthetic.seconds=8", "dataset.synthetic.n_subjects=2", "dataset.folds=2", "eval.folds=[0]",
          "text.embed_dim=16", "text.width=16", "iot.width=16", "iot.depth=1", "iot.feature_dim=16",
          "train.epochs=2", "augment.gan_epochs=1", "augment.finetune_epochs=1", "augment.gen_hidden=[16]",
          "augment.critic_hidden=[16]", "specialist.epochs=5", "baselines.msp_epochs=1", "baselines.knn_epochs=1",
          *extra]
    return [a for o in ov for a in ("-o", o)]


def rundir(tmp_path, *extra):
    ov = tiny(tmp_path, *extra)[1::2]
    return run_dir(load_config(overrides=ov))


def test_eval_before_train_fails_cleanly(tmp_path, capsys):
    assert main(["eval", *tiny(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "StateError" and "finetuned.ckpt" in err["message"]


def test_unknown_override_exits_with_config_error(tmp_path, capsys):
    assert main(["train", "-o", "train.bogus=1"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    for cmd in ("prepare", "train", "augment", "calibrate", "eval"):
        assert main([cmd, *tiny(tmp)]) == 0, cmd
    return tmp, rundir(tmp)


def test_run_directory_contents(pipeline_run):
    _, rd = pipeline_run
    for f in ("config.yaml", "metrics.json", "metrics.txt", "fold_0.split", "fold_1.split"):
        assert (rd / f).exists(), f
    fd = rd / "fold_0"
    for f in ("model.ckpt", "finetuned.ckpt", "specialist.ckpt", "detector.bin", "train.log", "aug.bin",
              "predictions.jsonl"):
        assert (fd / f).exists(), f
    assert not (rd / "fold_1").exists()  # eval.folds=[0]
    m = json.loads((rd / "metrics.json").read_text())
    assert set(m["folds"][0]["gzsl"]) == {"acc_s", "acc_u", "acc_h"}
    assert 0 <= m["aggregate"]["gzsl"]["acc_h"]["mean"] <= 1


def test_eval_reproduces_metrics(pipeline_run):
    tmp, rd = pipeline_run
    before = (rd / "metrics.json").read_bytes()
    assert main(["eval", *tiny(tmp)]) == 0
    assert (rd / "metrics.json").read_bytes() == before


def test_predictions_cover_the_test_split(pipeline_run):
    _, rd = pipeline_run
    from zsiot.data import FoldSplit

    fold = FoldSplit.load(rd / "fold_0.split")
    recs = [json.loads(l) for l in (rd / "fold_0" / "predictions.jsonl").read_text().splitlines()]
    assert [r["window"] for r in recs] == list(map(int, fold.test))
    assert {r["route"] for r in recs} <= {EDGE, CLOUD}


def test_baseline_and_dump(pipeline_run):
    tmp, rd = pipeline_run
    assert main(["baseline", *tiny(tmp)]) == 0
    assert {"ours", "msp", "knn", "mcm"} <= set(json.loads((rd / "baselines.json").read_text())["folds"][0])
    assert main(["dump-embeddings", *tiny(tmp)]) == 0
    z = np.load(rd / "fold_0" / "embeddings.npz")
    assert np.allclose(np.linalg.norm(z["embeddings"], axis=1), 1, atol=1e-5)
    assert len(z["labels"]) == len(z["index"])


def test_offline_prompts(pipeline_run):
    tmp, rd = pipeline_run
    assert main(["prompts", "--offline", *tiny(tmp)]) == 0
    assert (rd / "prompts.yaml").exists()


def test_ablate(tmp_path):
    assert main(["ablate", *tiny(tmp_path)]) == 0
    rd = rundir(tmp_path)
    rows = json.loads((rd / "ablation.json").read_text())["aggregate"]
    assert len(rows) == 4
    assert len((rd / "ablation.txt").read_text().strip().splitlines()) == 5
