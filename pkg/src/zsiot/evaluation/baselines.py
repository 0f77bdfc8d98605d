"""Detection baselines: maximum softmax probability, pooled k-NN distance, and MCM."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..contrastive import ClassBalancedBatches, TrainConfig
from ..detector import kth_distance
from ..errors import StateError, ValidationError
from ..iot import ARCHITECTURES, IoTEncoderConfig, IoTModel


def score_threshold(scores: np.ndarray, p: float) -> float:
    """Largest threshold that keeps at least a fraction p of (seen) scores >= it."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    if len(s) == 0:
        raise ValidationError("no calibration scores")
    idx = max(1, math.ceil(p * len(s) - 1e-9))
    return float(s[min(idx, len(s)) - 1])


def distance_threshold(distances: np.ndarray, p: float) -> float:
    s = np.sort(np.asarray(distances, dtype=np.float64))
    idx = max(1, math.ceil(p * len(s) - 1e-9))
    return float(s[min(idx, len(s)) - 1])


# --- MSP ---------------------------------------------------------------

class CEClassifier(nn.Module):
    """IoT encoder plus linear head trained end to end with cross-entropy."""

    def __init__(self, cfg: IoTEncoderConfig, classes: Sequence[int]):
        super().__init__()
        self.classes = [int(c) for c in classes]
        self.mu = ARCHITECTURES[cfg.architecture](cfg)
        self.head = nn.Linear(cfg.feature_dim, len(self.classes))
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, x):
        return self.head(self.mu(x))

    def fit(self, X, y, cfg: TrainConfig, lr: float = 1e-3):
        torch.manual_seed(cfg.seed)
        index = {c: i for i, c in enumerate(self.classes)}
        Xt = torch.as_tensor(np.asarray(X, np.float32))
        yt = torch.tensor([index[int(c)] for c in y])
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        g = torch.Generator().manual_seed(cfg.seed)
        self.train()
        for _ in range(cfg.epochs):
            perm = torch.randperm(len(yt), generator=g)
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                loss = F.cross_entropy(self(Xt[idx]), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.trained.fill_(True)
        return self.eval()

    @torch.no_grad()
    def predict_proba(self, X, batch_size: int = 512) -> np.ndarray:
        if not bool(self.trained):
            raise StateError("MSP classifier has not been trained")
        self.eval()
        X = torch.as_tensor(np.asarray(X, np.float32))
        return torch.cat([torch.softmax(self(X[i:i + batch_size]), -1) for i in range(0, len(X), batch_size)]).numpy()


def msp_scores(probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs).max(axis=-1)


def baseline_msp(probs: np.ndarray, threshold: float) -> np.ndarray:
    """True (Seen) iff the maximum softmax probability reaches the threshold."""
    return msp_scores(probs) >= threshold


# --- KNN ---------------------------------------------------------------

def supcon_loss(z: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean supervised contrastive loss over anchors with at least one positive."""
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    sim = (z @ z.T / tau).masked_fill(eye, float("-inf"))
    logp = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    cnt = pos.sum(1)
    keep = cnt > 0
    per = -(logp.masked_fill(~pos, 0.0)).sum(1)[keep] / cnt[keep]
    return per.mean()


def train_knn_model(X, y, iot_cfg: IoTEncoderConfig, embed_dim: int, cfg: TrainConfig,
                    noise_std: float = 0.1) -> IoTModel:
    """Supervised contrastive embedding where each window contributes two noisy views."""
    torch.manual_seed(cfg.seed)
    model = IoTModel(iot_cfg, embed_dim)
    Xt = torch.as_tensor(np.asarray(X, np.float32))
    yt = torch.as_tensor(np.asarray(y))
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    sampler = ClassBalancedBatches(np.asarray(y), cfg.batch_size, cfg.seed)
    model.train()
    for _ in range(cfg.epochs):
        for idx in sampler:
            xb = Xt[idx]
            views = torch.cat([xb + noise_std * torch.randn(xb.shape, generator=g),
                               xb + noise_std * torch.randn(xb.shape, generator=g)])
            lb = torch.cat([yt[idx], yt[idx]])
            loss = supcon_loss(model(views), lb, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


def knn_scores(E_query: np.ndarray, E_train: np.ndarray, k: int) -> np.ndarray:
    return kth_distance(np.atleast_2d(E_query), E_train, k)


def baseline_knn(E_query: np.ndarray, E_train: np.ndarray, k: int, threshold: float) -> np.ndarray:
    """True (Seen) iff the k-th NN distance to the pooled train set is within the threshold."""
    return knn_scores(E_query, E_train, k) <= threshold


# --- MCM ---------------------------------------------------------------

def mcm_scores(E: np.ndarray, seen_prototypes: np.ndarray, temperature: float) -> np.ndarray:
    sims = np.atleast_2d(E) @ np.asarray(seen_prototypes).T / temperature
    sims = sims - sims.max(axis=1, keepdims=True)
    p = np.exp(sims)
    return (p / p.sum(axis=1, keepdims=True)).max(axis=1)


def baseline_mcm(E: np.ndarray, seen_prototypes: np.ndarray, threshold: float, temperature: float = 1.0) -> np.ndarray:
    """True (Seen) iff the max softmax-scaled similarity to seen template prototypes reaches the threshold."""
    return mcm_scores(E, seen_prototypes, temperature) >= threshold
