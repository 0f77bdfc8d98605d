"""Edge/cloud inference: detect, then specialist or unseen-prototype matching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import ClusterStore, detect
from .errors import ConfigError, ValidationError
from .iot import IoTModel, Specialist

EDGE, CLOUD = "edge_seen", "cloud_unseen"


class Standardizer:
    """Per-channel z-scoring with statistics from the fold's training windows."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, np.float32).reshape(1, -1, 1)
        self.std = np.asarray(std, np.float32).reshape(1, -1, 1)

    @classmethod
    def fit(cls, X: np.ndarray, eps: float = 1e-6) -> "Standardizer":
        X = np.asarray(X, np.float64)
        return cls(X.mean(axis=(0, 2)), X.std(axis=(0, 2)) + eps)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, np.float32)
        single = X.ndim == 2
        out = (X[None] if single else X) - self.mean
        out = (out / self.std).astype(np.float32)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"mean": self.mean.ravel().tolist(), "std": self.std.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def zsl_predict(e_det: np.ndarray, prototypes: np.ndarray, unseen_classes: Sequence[int]) -> np.ndarray | int:
    """argmax over c in U of e . t(c); numpy argmax breaks ties at the lowest index.

    ``prototypes`` is the full [N_classes, d] matrix indexed by class id.
    """
    unseen = np.asarray(sorted(int(c) for c in unseen_classes))
    if len(unseen) == 0:
        raise ConfigError("zero-shot prediction needs at least one unseen class")
    E = np.atleast_2d(np.asarray(e_det, dtype=np.float64))
    sims = E @ np.asarray(prototypes, dtype=np.float64)[unseen].T
    out = unseen[np.argmax(sims, axis=1)]
    return int(out[0]) if np.ndim(e_det) == 1 else out


def gzsl_predict_all(e: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Open-set detection disabled: argmax over every class prototype."""
    E = np.atleast_2d(np.asarray(e, dtype=np.float64))
    return np.argmax(E @ np.asarray(prototypes, dtype=np.float64).T, axis=1)


@dataclass
class SystemState:
    model: IoTModel
    prototypes: np.ndarray
    seen_classes: list[int]
    unseen_classes: list[int]
    specialist: Specialist
    detector: ClusterStore
    standardizer: Standardizer | None = None


def classify_batch(X: np.ndarray, state: SystemState, embeddings: np.ndarray | None = None):
    """Route a batch of raw windows; returns (routes, labels, embeddings)."""
    X = np.asarray(X, np.float32)
    if X.ndim != 3:
        raise ValidationError(f"expected a batch of windows [N, C, T], got {X.shape}")
    Xs = state.standardizer(X) if state.standardizer is not None else X
    if embeddings is None:
        embeddings = state.model.embed(Xs)
    seen = detect(embeddings, state.detector) if len(X) else np.zeros(0, bool)
    labels = np.empty(len(X), np.int64)
    if seen.any():
        feats = state.model.embed_features(Xs[seen])
        labels[seen] = state.specialist.predict(feats)
    if (~seen).any():
        labels[~seen] = zsl_predict(embeddings[~seen], state.prototypes, state.unseen_classes)
    routes = np.where(seen, EDGE, CLOUD)
    return routes, labels, embeddings


def classify(x: np.ndarray, state: SystemState) -> tuple[str, int]:
    routes, labels, _ = classify_batch(np.asarray(x)[None], state)
    return str(routes[0]), int(labels[0])


def route_report(routes: Sequence[str], true_labels: Sequence[int], unseen_classes: Sequence[int]) -> dict:
    """Edge/cloud counts and fractions, split by whether the true class is seen."""
    routes = np.asarray(routes)
    truth_unseen = np.isin(np.asarray(true_labels), list(unseen_classes))
    rep = {}
    for name, mask in (("seen", ~truth_unseen), ("unseen", truth_unseen), ("all", np.ones_like(truth_unseen))):
        n = int(mask.sum())
        cloud = int((routes[mask] == CLOUD).sum())
        rep[name] = {"n": n, "edge": n - cloud, "cloud": cloud, "cloud_fraction": cloud / n if n else 0.0}
    return rep


def write_records(path: str | Path, ids, routes, labels, truth) -> None:
    with open(path, "w") as f:
        for i, r, p, t in zip(ids, routes, labels, truth):
            f.write(json.dumps({"window": int(i), "route": str(r), "pred": int(p), "true": int(t)}) + "\n")
