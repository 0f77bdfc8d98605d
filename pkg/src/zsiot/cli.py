"""Command line entry point: ``zsiot <command> [-c config.yaml] [-o key.path=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .config import load_config, run_dir, save_snapshot
from .data import FoldSplit, WindowSet, prepare_dataset
from .detector import ClusterStore
from .errors import StateError, ZSIoTError
from .evaluation import experiment as ex
from .evaluation.metrics import kfold_aggregate
from .iot import Specialist
from .pipeline import write_records

logger = logging.getLogger("zsiot")


# --- artifact helpers ----------------------------------------------------------

def load_windows(cfg: dict, refresh: bool = False) -> WindowSet:
    d = cfg["dataset"]
    kw = d["synthetic"] if d["name"].startswith("synthetic") else {}
    if not refresh and not d["name"].startswith("synthetic"):
        from .data import cache_path

        if not cache_path(d["root"], d["name"]).exists():
            raise StateError(f"no cached windows for {d['name']} under {d['root']}; run `zsiot prepare` first")
    return prepare_dataset(d["name"], d["root"], refresh=refresh, **kw)


def fold_dir(rd: Path, k: int) -> Path:
    return rd / f"fold_{k}"


def load_folds(cfg: dict, ws: WindowSet, rd: Path) -> list[FoldSplit]:
    """Split files written by ``prepare``; recomputed (and written) if absent."""
    n = cfg["dataset"]["folds"]
    paths = [rd / f"fold_{k}.split" for k in range(n)]
    if all(p.exists() for p in paths):
        folds = [FoldSplit.load(p) for p in paths]
    else:
        folds = ex.make_folds(cfg, ws)
        for f, p in zip(folds, paths):
            f.save(p)
    return ex.selected_folds(cfg, folds)


def final_checkpoint(cfg: dict, fd: Path) -> Path:
    return fd / ("finetuned.ckpt" if cfg["augment"]["enabled"] else "model.ckpt")


def save_specialist(spec: Specialist, path: Path) -> None:
    save_file({k: v.contiguous() for k, v in spec.state_dict().items()}, str(path),
              metadata={"seen": json.dumps(spec.seen_classes)})


def load_specialist(path: Path, feature_dim: int) -> Specialist:
    if not path.exists():
        raise StateError(f"missing {path}; run `zsiot calibrate` first")
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        seen = json.loads(f.metadata()["seen"])
    spec = Specialist(feature_dim, seen)
    spec.load_state_dict(load_file(str(path)))
    return spec


def load_system(cfg: dict, fold: FoldSplit, fd: Path):
    fm = ex.FoldModel.load(final_checkpoint(cfg, fd), fold)
    det_path = fd / "detector.bin"
    if not det_path.exists():
        raise StateError(f"missing {det_path}; run `zsiot calibrate` first")
    store = ClusterStore.load(det_path, fm.fingerprint())
    spec = load_specialist(fd / "specialist.ckpt", fm.model.cfg.feature_dim)
    return fm, spec, store


# --- commands -----------------------------------------------------------------

def cmd_prepare(cfg, rd, args):
    ws = load_windows(cfg, refresh=True)
    folds = ex.make_folds(cfg, ws)
    for f in folds:
        f.save(rd / f"fold_{f.fold_index}.split")
    counts = np.bincount(ws.labels, minlength=len(ws.class_list)).tolist()
    print(json.dumps({"dataset": cfg["dataset"]["name"], "windows": len(ws), "shape": list(ws.data.shape[1:]),
                      "per_class": counts, "folds": len(folds)}))


def cmd_train(cfg, rd, args):
    ws = load_windows(cfg)
    encoder = ex.build_encoder(cfg)
    for fold in load_folds(cfg, ws, rd):
        fd = fold_dir(rd, fold.fold_index)
        fd.mkdir(parents=True, exist_ok=True)
        log = fd / "train.log"
        log.unlink(missing_ok=True)
        fm = ex.train_fold(cfg, ws, fold, cfg["text"]["mode"], encoder, log_path=log)
        fm.save(fd / "model.ckpt", cfg)
        print(f"fold {fold.fold_index}: best epoch {fm.history.best_epoch}, checkpoint {fd / 'model.ckpt'}")


def cmd_augment(cfg, rd, args):
    if not cfg["augment"]["enabled"]:
        print("augment.enabled is false; nothing to do")
        return
    ws = load_windows(cfg)
    for fold in load_folds(cfg, ws, rd):
        fd = fold_dir(rd, fold.fold_index)
        fm = ex.FoldModel.load(fd / "model.ckpt", fold)
        log = fd / "finetune.log"
        log.unlink(missing_ok=True)
        fm2, (X_aug, y_aug), gan = ex.augment_fold(cfg, ws, fm, log_path=log)
        WindowSet(X_aug.reshape(len(y_aug), *ws.data.shape[1:]), y_aug, ws.spec).save(fd / "aug.bin")
        fm2.save(fd / "finetuned.ckpt", cfg)
        print(f"fold {fold.fold_index}: {len(y_aug)} synthetic windows, checkpoint {fd / 'finetuned.ckpt'}")


def cmd_calibrate(cfg, rd, args):
    ws = load_windows(cfg)
    for fold in load_folds(cfg, ws, rd):
        fd = fold_dir(rd, fold.fold_index)
        fm = ex.FoldModel.load(final_checkpoint(cfg, fd), fold)
        spec, store = ex.calibrate_fold(cfg, ws, fm)
        save_specialist(spec, fd / "specialist.ckpt")
        store.save(fd / "detector.bin")
        print(f"fold {fold.fold_index}: thresholds {np.round(store.thresholds, 4).tolist()}")


def cmd_eval(cfg, rd, args):
    ws = load_windows(cfg)
    per_fold = []
    for fold in load_folds(cfg, ws, rd):
        fd = fold_dir(rd, fold.fold_index)
        fm, spec, store = load_system(cfg, fold, fd)
        rep = ex.evaluate_fold(ws, ex.system_state(fm, spec, store), fold, cfg["eval"]["open_set"])
        write_records(fd / "predictions.jsonl", fold.test, rep["_routes"], rep["_pred"], ws.labels[fold.test])
        per_fold.append(ex.public(rep))
    agg = kfold_aggregate(per_fold)
    ex.dump_json({"folds": per_fold, "aggregate": agg}, rd / "metrics.json")
    table = ex.format_metrics_table(agg, cfg["dataset"]["name"])
    (rd / "metrics.txt").write_text(table + "\n")
    print(table)


def _ablate_one(cfg, fold):
    ws = load_windows(cfg)
    return ex.run_ablation_fold(cfg, ws, fold)


def cmd_ablate(cfg, rd, args):
    ws = load_windows(cfg)
    folds = load_folds(cfg, ws, rd)
    workers = int(cfg["eval"]["workers"] or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_fold = list(pool.map(_ablate_one, [cfg] * len(folds), folds))
    else:
        encoder = ex.build_encoder(cfg)
        per_fold = [ex.run_ablation_fold(cfg, ws, f, encoder) for f in folds]
    agg = ex.aggregate_rows(per_fold)
    ex.dump_json({"folds": per_fold, "aggregate": agg}, rd / "ablation.json")
    table = ex.format_ablation_table(agg, cfg["dataset"]["name"])
    (rd / "ablation.txt").write_text(table + "\n")
    print(table)


def cmd_baseline(cfg, rd, args):
    ws = load_windows(cfg)
    encoder = ex.build_encoder(cfg)
    per_fold = []
    for fold in load_folds(cfg, ws, rd):
        full = load_system(cfg, fold, fold_dir(rd, fold.fold_index))
        per_fold.append(ex.run_baselines_fold(cfg, ws, fold, full, encoder=encoder))
    agg = ex.aggregate_rows(per_fold)
    ex.dump_json({"folds": per_fold, "aggregate": agg}, rd / "baselines.json")
    table = ex.format_detection_table(agg, cfg["dataset"]["name"])
    (rd / "baselines.txt").write_text(table + "\n")
    print(table)


def cmd_prompts(cfg, rd, args):
    from .text import HTTPChatClient, generate_hard_prompts
    from .data.loaders import LOADERS

    ws = load_windows(cfg) if cfg["dataset"]["name"].startswith("synthetic") or args.from_cache else None
    if ws is not None:
        classes = ws.class_list
    else:
        from .data import loaders

        spec_fn = {"usc-had": loaders.usc_had_spec, "pamap2": loaders.pamap2_spec,
                   "mmfi-mmwave": lambda: loaders.mmfi_spec("mmwave"), "mmfi-wifi": lambda: loaders.mmfi_spec("wifi")}
        name = cfg["dataset"]["name"]
        if name not in LOADERS:
            raise StateError(f"unknown dataset {name}")
        classes = spec_fn[name]().class_list
    out = cfg["text"]["prompt_file"] or str(rd / "prompts.yaml")
    if not Path(out).exists():
        # start from the shipped descriptions so only genuinely new classes hit the LLM
        from .text.prompts import default_prompts

        try:
            default_prompts(cfg["dataset"]["name"]).save(out)
        except ZSIoTError:
            pass
    client = None if args.offline else HTTPChatClient(args.endpoint, args.model)
    prompts = generate_hard_prompts(classes, client, out, refresh=args.refresh)
    print(f"{len(classes)} descriptions ({prompts.provenance}) in {out}")


def cmd_dump_embeddings(cfg, rd, args):
    ws = load_windows(cfg)
    for fold in load_folds(cfg, ws, rd):
        fd = fold_dir(rd, fold.fold_index)
        fm = ex.FoldModel.load(final_checkpoint(cfg, fd), fold)
        idx = np.asarray(fold.test)
        E = fm.model.embed(fm.standardizer(ws.data[idx]))
        np.savez(fd / "embeddings.npz", embeddings=E, labels=ws.labels[idx], index=idx,
                 prototypes=fm.prototypes, class_list=np.array(ws.class_list))
        print(f"fold {fold.fold_index}: {len(idx)} embeddings -> {fd / 'embeddings.npz'}")


COMMANDS = {
    "prepare": (cmd_prepare, "ingest, window and split a dataset"),
    "train": (cmd_train, "contrastive alignment of IoT and text branches"),
    "augment": (cmd_augment, "GAN synthesis of unseen classes and fine-tuning"),
    "calibrate": (cmd_calibrate, "fit the specialist and calibrate the detector"),
    "eval": (cmd_eval, "GZSL and detection metrics over folds"),
    "ablate": (cmd_ablate, "P.E./O.S./D.A. ablation matrix"),
    "baseline": (cmd_baseline, "MSP/KNN/MCM detection baselines"),
    "prompts": (cmd_prompts, "generate or refresh hard prompts"),
    "dump-embeddings": (cmd_dump_embeddings, "write test embeddings for visualisation"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zsiot", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("-d", "--dataset", help="dataset preset when no config file is given")
        p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. train.epochs=20 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "prompts":
            p.add_argument("--refresh", action="store_true", help="regenerate entries already in the file")
            p.add_argument("--offline", action="store_true", help="do not contact the LLM provider")
            p.add_argument("--from-cache", action="store_true", help="take the class list from the dataset cache")
            p.add_argument("--endpoint", default=None)
            p.add_argument("--model", default="gpt-3.5-turbo")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.dataset)
        torch.manual_seed(cfg["seed"])
        rd = run_dir(cfg)
        rd.mkdir(parents=True, exist_ok=True)
        save_snapshot(cfg, rd)
        COMMANDS[args.command][0](cfg, rd, args)
    except ZSIoTError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
