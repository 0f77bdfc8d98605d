"""Fold-level experiment stages shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from ..augmentation import GanConfig, default_n_aug, filter_synthetic, finetune, synthesize_unseen, train_gan
from ..contrastive import TrainConfig, TrainResult, train
from ..data import FoldSplit, WindowSet, make_fold_splits, partition_and_balance
from ..detector import ClusterStore, build_clusters, calibrate, detect, state_fingerprint
from ..errors import StateError
from ..iot import IoTEncoderConfig, IoTModel, Specialist
from ..pipeline import CLOUD, EDGE, Standardizer, SystemState, classify_batch, gzsl_predict_all, route_report
from ..text import HardPromptSet, TextBranch, build_text_encoder, default_prompts
from ..text.prompts import generate_hard_prompts
from . import baselines as bl
from .metrics import detection_metrics, gzsl_metrics, kfold_aggregate

logger = logging.getLogger(__name__)

ABLATION_ROWS = [
    # (P.E., O.S., D.A.)
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, True, True),
]


def row_name(pe: bool, os_: bool, da: bool) -> str:
    return f"PE={'on' if pe else 'off'},OS={'on' if os_ else 'off'},DA={'on' if da else 'off'}"


# --- builders ------------------------------------------------------------

def build_encoder(cfg: dict):
    t = cfg["text"]
    if t["backend"] == "clip":
        return build_text_encoder({"backend": "clip", "path": t["path"]})
    return build_text_encoder({"backend": "toy", "embed_dim": t["embed_dim"], "width": t["width"],
                               "layers": t["layers"], "heads": t["heads"], "seed": t["encoder_seed"]})


def load_prompts(cfg: dict, class_list: Sequence[str]) -> HardPromptSet:
    pf = cfg["text"]["prompt_file"]
    if pf:
        return generate_hard_prompts(class_list, None, pf)
    return default_prompts(cfg["dataset"]["name"])


def train_config(cfg: dict, seed: int, **kw) -> TrainConfig:
    return TrainConfig(**{**cfg["train"], "seed": seed, **kw})


def make_folds(cfg: dict, ws: WindowSet) -> list[FoldSplit]:
    d = cfg["dataset"]
    folds = make_fold_splits(ws.class_list, d["n_unseen"], d["folds"], cfg["seed"])
    return [partition_and_balance(f, ws.labels, ws.subjects, d["subject_wise"]) for f in folds]


def selected_folds(cfg: dict, folds: list[FoldSplit]) -> list[FoldSplit]:
    sel = cfg["eval"]["folds"]
    return folds if sel is None else [folds[i] for i in sel]


# --- fold state ----------------------------------------------------------

@dataclass
class FoldModel:
    """Everything produced by training on one fold."""

    fold: FoldSplit
    model: IoTModel
    prototypes: np.ndarray
    standardizer: Standardizer
    mode: str
    text_state: dict = field(default_factory=dict)
    history: TrainResult | None = None

    def save(self, path: str | Path, config: dict | None = None) -> None:
        tensors = {f"iot.{k}": v.detach().contiguous().clone() for k, v in self.model.state_dict().items()}
        tensors.update({f"text.{k}": v.detach().contiguous().clone() for k, v in self.text_state.items()})
        tensors["prototypes"] = torch.as_tensor(self.prototypes).contiguous()
        tensors["std.mean"] = torch.as_tensor(self.standardizer.mean.ravel().copy())
        tensors["std.std"] = torch.as_tensor(self.standardizer.std.ravel().copy())
        meta = {"iot": self.model.cfg.to_dict(), "embed_dim": self.model.embed_dim, "mode": self.mode,
                "fold_index": self.fold.fold_index, "seen": self.fold.seen_classes,
                "unseen": self.fold.unseen_classes}
        if config is not None:
            meta["config"] = config
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        # one sorted JSON entry: safetensors does not preserve metadata key order,
        # which would make otherwise identical checkpoints differ byte-wise
        save_file(tensors, str(path), metadata={"zsiot": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path: str | Path, fold: FoldSplit) -> "FoldModel":
        if not Path(path).exists():
            raise StateError(f"missing checkpoint {path}; run the `train` command first")
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as f:
            meta = json.loads(f.metadata()["zsiot"])
        tensors = load_file(str(path))
        model = IoTModel(IoTEncoderConfig(**meta["iot"]), int(meta["embed_dim"]))
        model.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("iot.")})
        model.eval()
        text_state = {k[5:]: v for k, v in tensors.items() if k.startswith("text.")}
        std = Standardizer(tensors["std.mean"].numpy(), tensors["std.std"].numpy())
        return cls(fold, model, tensors["prototypes"].numpy(), std, meta["mode"], text_state)

    def fingerprint(self) -> str:
        return state_fingerprint(self.model.state_dict())


def train_fold(cfg: dict, ws: WindowSet, fold: FoldSplit, mode: str = "fused", encoder=None,
               prompts: HardPromptSet | None = None, log_path=None) -> FoldModel:
    """Contrastive alignment of the IoT model with fused or template prototypes."""
    seed = fold.rng_seed
    encoder = encoder or build_encoder(cfg)
    t = cfg["text"]
    if mode == "fused" and prompts is None:
        prompts = load_prompts(cfg, ws.class_list)
    tb = TextBranch(encoder, ws.class_list, prompts if mode == "fused" else None, n_ctx=t["n_ctx"], mode=mode,
                    seed=seed, init_std=t["init_std"], attn_init_scale=t["attn_init_scale"])
    std = Standardizer.fit(ws.data[fold.train])
    X = std(ws.data)
    torch.manual_seed(seed)
    iot_cfg = IoTEncoderConfig(ws.data.shape[1], ws.data.shape[2], **cfg["iot"])
    model = IoTModel(iot_cfg, encoder.embed_dim)
    res = train(model, tb, X[fold.train], ws.labels[fold.train], train_config(cfg, seed),
                X[fold.val], ws.labels[fold.val], log_path=log_path)
    P = tb.prototypes().numpy()
    state = {k: v for k, v in tb.state_dict().items()}
    return FoldModel(fold, model, P, std, mode, state, res)


def augment_fold(cfg: dict, ws: WindowSet, fm: FoldModel, log_path=None):
    """GAN on seen training windows, synthesis for unseen classes, then fine-tuning.

    Returns a new FoldModel (the input is left untouched) and the synthetic set.
    """
    import copy

    a = cfg["augment"]
    fold = fm.fold
    seed = fold.rng_seed
    X = fm.standardizer(ws.data)
    Xtr, ytr = X[fold.train], ws.labels[fold.train]
    P = torch.as_tensor(fm.prototypes)
    gcfg = GanConfig(noise_dim=a["noise_dim"], gen_hidden=a["gen_hidden"], critic_hidden=a["critic_hidden"],
                     xi=a["xi"], critic_steps=a["critic_steps"], n_aug=a["n_aug"], gan_lr=a["gan_lr"],
                     gan_epochs=a["gan_epochs"], batch_size=a["batch_size"], cls_weight=a["cls_weight"],
                     filter_synthetic=a["filter_synthetic"], seed=seed)
    gan = train_gan(Xtr, ytr, P, fold.seen_classes, gcfg)
    n_aug = gcfg.n_aug if gcfg.n_aug is not None else default_n_aug(ytr)
    X_aug, y_aug = synthesize_unseen(gan.generator, P, fold.unseen_classes, n_aug, seed=seed)
    if a["filter_synthetic"]:
        keep = filter_synthetic(fm.model, X_aug, y_aug, P)
        logger.info("fold %d: kept %d of %d synthetic windows", fold.fold_index, keep.sum(), len(keep))
        X_aug, y_aug = X_aug[keep], y_aug[keep]
    model = copy.deepcopy(fm.model)
    ft_cfg = train_config(cfg, seed, epochs=a["finetune_epochs"], learning_rate=a["finetune_lr"], select_best=False)
    res = finetune(model, P, Xtr, ytr, X_aug, y_aug, ft_cfg, log_path=log_path)
    out = FoldModel(fold, model, fm.prototypes, fm.standardizer, fm.mode, fm.text_state, res)
    return out, (X_aug, y_aug), gan


def calibrate_fold(cfg: dict, ws: WindowSet, fm: FoldModel, embeddings: dict | None = None):
    """Fit the edge specialist on frozen features and calibrate the detector."""
    fold = fm.fold
    X = fm.standardizer(ws.data)
    s = cfg["specialist"]
    feats = fm.model.embed_features(X[fold.train])
    spec = Specialist(fm.model.cfg.feature_dim, fold.seen_classes)
    spec.fit(feats, ws.labels[fold.train], epochs=s["epochs"], lr=s["lr"], weight_decay=s["weight_decay"],
             seed=fold.rng_seed)
    E_tr = fm.model.embed(X[fold.train])
    E_val = fm.model.embed(X[fold.val])
    store = build_clusters(E_tr, ws.labels[fold.train], cfg["detector"]["k_fraction"], fold.seen_classes)
    store.fingerprint = fm.fingerprint()
    store = calibrate(store, E_val, ws.labels[fold.val], cfg["detector"]["retention"])
    return spec, store


def system_state(fm: FoldModel, spec: Specialist, store: ClusterStore) -> SystemState:
    return SystemState(fm.model, fm.prototypes, fm.fold.seen_classes, fm.fold.unseen_classes, spec, store,
                       fm.standardizer)


def evaluate_fold(ws: WindowSet, state: SystemState, fold: FoldSplit, open_set: bool = True) -> dict:
    idx = np.asarray(fold.test)
    truth = ws.labels[idx]
    true_seen = np.isin(truth, fold.seen_classes)
    if open_set:
        routes, pred, _ = classify_batch(ws.data[idx], state)
    else:
        E = state.model.embed(state.standardizer(ws.data[idx]))
        pred = gzsl_predict_all(E, state.prototypes)
        routes = np.where(np.isin(pred, fold.unseen_classes), CLOUD, EDGE)
    rep = {"gzsl": gzsl_metrics(pred, truth, fold.seen_classes, fold.unseen_classes),
           "detection": detection_metrics(routes != CLOUD, true_seen),
           "routing": route_report(routes, truth, fold.unseen_classes)}
    rep["_pred"] = pred
    rep["_routes"] = routes
    return rep


def public(rep: dict) -> dict:
    return {k: v for k, v in rep.items() if not k.startswith("_")}


# --- ablation ----------------------------------------------------------------

def run_ablation_fold(cfg: dict, ws: WindowSet, fold: FoldSplit, encoder=None, prompts=None,
                      keep_models: bool = False) -> dict:
    """The four P.E./O.S./D.A. rows on one fold.

    The full, O.S.-off and D.A.-off rows share the fused training run; the
    P.E.-off row retrains with template prototypes.
    """
    encoder = encoder or build_encoder(cfg)
    out, models = {}, {}
    for mode in ("template", "fused"):
        fm = train_fold(cfg, ws, fold, mode, encoder, prompts)
        if mode == "fused":
            spec, store = calibrate_fold(cfg, ws, fm)
            out[row_name(True, True, False)] = public(evaluate_fold(ws, system_state(fm, spec, store), fold))
            models["fused_pre_da"] = fm
        fm_da, _, _ = augment_fold(cfg, ws, fm)
        spec, store = calibrate_fold(cfg, ws, fm_da)
        st = system_state(fm_da, spec, store)
        if mode == "template":
            out[row_name(False, True, True)] = public(evaluate_fold(ws, st, fold))
            models["template"] = (fm_da, spec, store)
        else:
            out[row_name(True, True, True)] = public(evaluate_fold(ws, st, fold))
            out[row_name(True, False, True)] = public(evaluate_fold(ws, st, fold, open_set=False))
            models["full"] = (fm_da, spec, store)
    if keep_models:
        out["_models"] = models
    return out


# --- baselines ---------------------------------------------------------------

def run_baselines_fold(cfg: dict, ws: WindowSet, fold: FoldSplit, full, template_fm: FoldModel | None = None,
                       encoder=None) -> dict:
    """Detection metrics of ours, MSP, KNN and MCM on the fold's balanced test set.

    ``full`` is (FoldModel, Specialist, ClusterStore) of the main method.
    """
    fm, spec, store = full
    b = cfg["baselines"]
    p = cfg["detector"]["retention"]
    seed = fold.rng_seed
    X = fm.standardizer(ws.data)
    test = np.asarray(fold.test)
    true_seen = np.isin(ws.labels[test], fold.seen_classes)
    Xtr, ytr = X[fold.train], ws.labels[fold.train]
    Xval = X[fold.val]
    out = {}

    out["ours"] = detection_metrics(detect(fm.model.embed(X[test]), store), true_seen)

    ce = bl.CEClassifier(fm.model.cfg, fold.seen_classes)
    ce.fit(Xtr, ytr, train_config(cfg, seed, epochs=b["msp_epochs"]), lr=b["msp_lr"])
    thr = bl.score_threshold(bl.msp_scores(ce.predict_proba(Xval)), p)
    out["msp"] = detection_metrics(bl.baseline_msp(ce.predict_proba(X[test]), thr), true_seen)

    knn_model = bl.train_knn_model(Xtr, ytr, fm.model.cfg, fm.model.embed_dim,
                                   train_config(cfg, seed, epochs=b["knn_epochs"]), b["knn_noise_std"])
    E_tr = knn_model.embed(Xtr)
    k = max(1, int(round(cfg["detector"]["k_fraction"] * len(E_tr))))
    thr = bl.distance_threshold(bl.knn_scores(knn_model.embed(Xval), E_tr, k), p)
    out["knn"] = detection_metrics(bl.baseline_knn(knn_model.embed(X[test]), E_tr, k, thr), true_seen)

    if template_fm is None:
        template_fm = train_fold(cfg, ws, fold, "template", encoder)
    Xt = template_fm.standardizer(ws.data)
    T_seen = template_fm.prototypes[fold.seen_classes]
    temp = b["mcm_temperature"] or cfg["train"]["temperature"]
    thr = bl.score_threshold(bl.mcm_scores(template_fm.model.embed(Xt[fold.val]), T_seen, temp), p)
    out["mcm"] = detection_metrics(bl.baseline_mcm(template_fm.model.embed(Xt[test]), T_seen, thr, temp), true_seen)
    return out


# --- reporting -----------------------------------------------------------------

def aggregate_rows(per_fold: list[dict]) -> dict:
    rows = [k for k in per_fold[0] if not k.startswith("_")]
    return {r: kfold_aggregate([f[r] for f in per_fold]) for r in rows}


def _pct(stat: dict) -> str:
    return f"{100 * stat['mean']:.1f}±{100 * np.sqrt(stat['var']):.1f}%"


def format_ablation_table(agg: dict, dataset: str) -> str:
    lines = [f"{'Dataset':<18}{'P.E.':<6}{'O.S.':<6}{'D.A.':<6}{'ACC_S':>14}{'ACC_U':>14}{'ACC_H':>14}"]
    for pe, os_, da in ABLATION_ROWS:
        r = agg[row_name(pe, os_, da)]["gzsl"]
        mark = lambda f: "x" if f else ""
        lines.append(f"{dataset:<18}{mark(pe):<6}{mark(os_):<6}{mark(da):<6}"
                     f"{_pct(r['acc_s']):>14}{_pct(r['acc_u']):>14}{_pct(r['acc_h']):>14}")
    return "\n".join(lines)


def format_detection_table(agg: dict, dataset: str) -> str:
    lines = [f"{'Dataset':<18}{'Method':<8}{'Precision':>14}{'Recall':>14}{'F1':>14}"]
    for m in ("msp", "knn", "mcm", "ours"):
        if m in agg:
            r = agg[m]
            lines.append(f"{dataset:<18}{m.upper() if m != 'ours' else 'Ours':<8}"
                         f"{_pct(r['precision']):>14}{_pct(r['recall']):>14}{_pct(r['f1']):>14}")
    return "\n".join(lines)


def format_metrics_table(agg: dict, dataset: str) -> str:
    g, d = agg["gzsl"], agg["detection"]
    return (f"{'Dataset':<18}{'ACC_S':>14}{'ACC_U':>14}{'ACC_H':>14}{'Det. F1':>14}\n"
            f"{dataset:<18}{_pct(g['acc_s']):>14}{_pct(g['acc_u']):>14}{_pct(g['acc_h']):>14}{_pct(d['f1']):>14}")


def dump_json(obj, path: str | Path) -> None:
    def conv(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=conv) + "\n")
