"""Supervised contrastive alignment of IoT embeddings with class prototypes."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    temperature: float = 0.2
    batch_size: int = 64
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    seed: int = 0
    select_best: bool = True
    text_lr_scale: float = 1.0  # learning-rate multiplier for soft prompt and cross-attention maps

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")


def supervised_contrastive_loss(E: torch.Tensor, labels, T: torch.Tensor, proto_labels, tau: float,
                                norm_tol: float = 1e-4) -> torch.Tensor:
    """Summed multi-positive contrastive loss between embeddings and prototypes.

    For sample i of class j the positives are the other same-class samples and
    the prototype t_j, averaged with weight 1/(|P(i)| + 1). The log-partition
    runs over every other sample, the prototypes of the other batch classes,
    and the prototype-prototype terms t_j . t_n. Prototype rows whose class is
    absent from the batch are ignored.
    """
    labels = torch.as_tensor(labels).reshape(-1)
    proto_labels = [int(c) for c in torch.as_tensor(proto_labels).reshape(-1)]
    n = E.shape[0]
    if n < 2 or labels.shape[0] != n:
        raise ValidationError("need at least two embeddings with one label each")
    batch_classes = sorted(set(int(c) for c in labels))
    if len(batch_classes) < 2:
        raise ValidationError("contrastive batch must contain at least two distinct classes")
    row_of = {c: r for r, c in enumerate(proto_labels)}
    missing = [c for c in batch_classes if c not in row_of]
    if missing:
        raise ValidationError(f"no prototype for batch classes {missing}")
    for name, M in (("embeddings", E), ("prototypes", T)):
        norms = M.detach().norm(dim=-1)
        if (norms - 1).abs().max() > norm_tol:
            raise ValidationError(f"{name} must be unit-norm (max deviation {float((norms - 1).abs().max()):.2e})")

    Tb = T[[row_of[c] for c in batch_classes]]
    col = {c: k for k, c in enumerate(batch_classes)}
    j = torch.tensor([col[int(c)] for c in labels])
    nt = len(batch_classes)

    s_ee = E @ E.T / tau
    s_et = E @ Tb.T / tau
    s_tt = Tb @ Tb.T / tau

    eye = torch.eye(n, dtype=torch.bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    own = torch.zeros(n, nt, dtype=torch.bool)
    own[torch.arange(n), j] = True

    numer = (s_ee * pos).sum(1) + s_et[torch.arange(n), j]
    numer = numer / (pos.sum(1) + 1)

    neg_inf = torch.tensor(float("-inf"), dtype=E.dtype)
    part = torch.cat([
        torch.where(eye, neg_inf, s_ee),
        torch.where(own, neg_inf, s_et),
        torch.where(own, neg_inf, s_tt[j]),
    ], dim=1)
    return (-numer + torch.logsumexp(part, dim=1)).sum()


class ClassBalancedBatches:
    """Batches that hold at least two classes and, where possible, pairs per class."""

    def __init__(self, labels: Sequence[int], batch_size: int, seed: int = 0):
        self.labels = np.asarray(labels)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        if len(np.unique(self.labels)) < 2:
            raise ValidationError("need at least two classes to form contrastive batches")

    def __iter__(self) -> Iterator[np.ndarray]:
        chunks = []
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[self.rng.permutation(len(idx))]
            pairs = [idx[k:k + 2] for k in range(0, len(idx), 2)]
            if len(pairs) > 1 and len(pairs[-1]) == 1:
                last = pairs.pop()
                pairs[-1] = np.concatenate([pairs[-1], last])
            chunks.extend(pairs)
        order = self.rng.permutation(len(chunks))
        batches, cur = [], []
        for k in order:
            if cur and sum(len(c) for c in cur) + len(chunks[k]) > self.batch_size:
                batches.append(np.concatenate(cur))
                cur = []
            cur.append(chunks[k])
        if cur:
            batches.append(np.concatenate(cur))
        merged = []
        for b in batches:
            if len(np.unique(self.labels[b])) < 2 and merged:
                merged[-1] = np.concatenate([merged[-1], b])
            else:
                merged.append(b)
        if len(merged) > 1 and len(np.unique(self.labels[merged[0]])) < 2:
            merged[1] = np.concatenate([merged[0], merged[1]])
            merged = merged[1:]
        return iter(merged)

    def __len__(self):
        return int(np.ceil(len(self.labels) / self.batch_size))


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _val_loss(model, X_val, y_val, protos_fn, proto_labels, tau, chunk=256) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        T = protos_fn()
        for s in range(0, len(y_val), chunk):
            yb = y_val[s:s + chunk]
            if len(np.unique(yb)) < 2:
                continue
            E = model(torch.as_tensor(X_val[s:s + chunk]))
            total += float(supervised_contrastive_loss(E, yb, T, proto_labels, tau))
            count += len(yb)
    model.train()
    return total / max(count, 1)


def fit_contrastive(model: nn.Module, X: np.ndarray, y: np.ndarray, protos_fn: Callable[[], torch.Tensor],
                    proto_labels: Sequence[int], params: list, cfg: TrainConfig,
                    X_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
                    extra_modules: Sequence[nn.Module] = (), log_path: str | Path | None = None) -> TrainResult:
    """SGD-with-momentum loop shared by alignment training and fine-tuning.

    ``protos_fn`` is re-evaluated every step so prototype gradients reach the
    text-side parameters when they are in ``params``.
    """
    torch.manual_seed(cfg.seed)
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sampler = ClassBalancedBatches(y, cfg.batch_size, cfg.seed)
    modules = [model, *extra_modules]
    result = TrainResult()
    best, best_state = float("inf"), None
    log = open(log_path, "a") if log_path else None
    Xt = torch.from_numpy(X)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            total, count = 0.0, 0
            for idx in sampler:
                E = model(Xt[idx])
                loss = supervised_contrastive_loss(E, y[idx], protos_fn(), proto_labels, cfg.temperature)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}; batch indices {idx.tolist()[:16]}..., "
                                          f"classes {sorted(set(y[idx].tolist()))}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach())
                count += len(idx)
            result.losses.append(total / count)
            rec = {"epoch": epoch, "mean_loss": result.losses[-1], "wall_time": round(time.perf_counter() - t0, 4)}
            if X_val is not None and len(X_val):
                v = _val_loss(model, X_val, y_val, protos_fn, proto_labels, cfg.temperature)
                result.val_losses.append(v)
                rec["val_loss"] = v
                if cfg.select_best and v < best:
                    best, result.best_epoch = v, epoch
                    best_state = [copy.deepcopy(m.state_dict()) for m in modules]
            if log:
                log.write(json.dumps(rec) + "\n")
            logger.debug("epoch %d loss %.4f", epoch, result.losses[-1])
    finally:
        if log:
            log.close()
    if best_state is not None:
        for m, s in zip(modules, best_state):
            m.load_state_dict(s)
    model.eval()
    return result


def train(model: nn.Module, text_branch: nn.Module, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          X_val=None, y_val=None, log_path=None) -> TrainResult:
    """Jointly train the soft prompt, cross-attention maps, feature extractor and projector."""
    text_params = [p for p in text_branch.parameters() if p.requires_grad]
    params = [{"params": list(model.parameters())}]
    if text_params:
        params.append({"params": text_params, "lr": cfg.learning_rate * cfg.text_lr_scale})
    labels = list(range(len(text_branch.class_names)))
    text_branch.train()
    res = fit_contrastive(model, X, y, text_branch, labels, params, cfg, X_val, y_val,
                          extra_modules=[text_branch], log_path=log_path)
    text_branch.eval()
    return res
