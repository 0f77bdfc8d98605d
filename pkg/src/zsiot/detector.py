"""Per-class k-th nearest neighbour distances with calibrated thresholds."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StateError, ValidationError

logger = logging.getLogger(__name__)

SEEN, UNSEEN = "Seen", "Unseen"


@dataclass
class ClusterStore:
    classes: list[int]
    clusters: list[np.ndarray]  # per class [N_i, d]
    k: list[int]
    thresholds: list[float] | None = None
    retention: float | None = None
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for c, E, k in zip(self.classes, self.clusters, self.k):
            if not 1 <= k <= len(E):
                raise ValidationError(f"class {c}: k={k} outside [1, {len(E)}]")

    @property
    def calibrated(self) -> bool:
        return self.thresholds is not None

    def save(self, path: str | Path) -> None:
        if not self.calibrated:
            raise StateError("refusing to save an uncalibrated detector")
        arrays = {f"cluster_{i}": E for i, E in enumerate(self.clusters)}
        header = {"classes": self.classes, "k": self.k, "thresholds": self.thresholds,
                  "retention": self.retention, "fingerprint": self.fingerprint, "meta": self.meta}
        buf = io.BytesIO()
        np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path, fingerprint: str | None = None) -> "ClusterStore":
        with np.load(Path(path), allow_pickle=False) as z:
            h = json.loads(str(z["header"]))
            clusters = [z[f"cluster_{i}"] for i in range(len(h["classes"]))]
        if fingerprint is not None and h["fingerprint"] != fingerprint:
            raise StateError(f"detector at {path} was built for model {h['fingerprint'][:12]}, "
                             f"checkpoint is {fingerprint[:12]}; re-run calibrate")
        return cls(h["classes"], clusters, h["k"], h["thresholds"], h["retention"], h["fingerprint"], h["meta"])


def state_fingerprint(state_dict) -> str:
    """Hash of a module state dict, used to tie the detector to a checkpoint."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state_dict[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def build_clusters(train_embeddings: np.ndarray, labels: np.ndarray, k_fraction: float = 0.08,
                   classes=None) -> ClusterStore:
    E = np.asarray(train_embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels)) if classes is None else [int(c) for c in classes]
    clusters, ks = [], []
    for c in classes:
        members = E[labels == c]
        if len(members) == 0:
            raise ValidationError(f"seen class {c} has no training embeddings")
        clusters.append(members)
        ks.append(max(1, int(round(k_fraction * len(members)))))
    return ClusterStore(classes, clusters, ks)


def kth_distance(e_test: np.ndarray, cluster: np.ndarray, k: int) -> np.ndarray:
    """k-th smallest Euclidean distance from each query to the cluster members.

    ``e_test`` may be one vector [d] or a batch [B, d].
    """
    q = np.atleast_2d(np.asarray(e_test, dtype=np.float64))
    C = np.asarray(cluster, dtype=np.float64)
    d = np.sqrt(np.maximum(((q[:, None, :] - C[None, :, :]) ** 2).sum(-1), 0.0))
    out = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out if np.ndim(e_test) == 2 else out[0]


def score_matrix(store: ClusterStore, E: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """[B, n_classes] matrix of d_i^(k_i) for every query."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    out = np.empty((len(E), len(store.classes)))
    for s in range(0, len(E), chunk):
        for i, (C, k) in enumerate(zip(store.clusters, store.k)):
            out[s:s + chunk, i] = kth_distance(E[s:s + chunk], C, k)
    return out


def ceil_quantile(scores: np.ndarray, p: float) -> float:
    """Smallest score with at least a fraction p of scores <= it."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if len(s) == 0:
        raise ValidationError("no scores to take a quantile of")
    idx = max(1, math.ceil(p * len(s) - 1e-9))
    return float(s[min(idx, len(s)) - 1])


def calibrate(store: ClusterStore, val_embeddings: np.ndarray, val_labels: np.ndarray, p: float = 0.8) -> ClusterStore:
    """lambda_i = ceiling-index p-quantile of own-cluster scores of class-i validation samples."""
    if not 0 < p <= 1:
        raise ValidationError("retention must be in (0, 1]")
    E = np.asarray(val_embeddings)
    labels = np.asarray(val_labels)
    lam = []
    for C, k, c in zip(store.clusters, store.k, store.classes):
        members = E[labels == c]
        if len(members) == 0:
            logger.warning("class %d absent from the calibration set; using training-set quantile", c)
            # leave-one-out is not applied: the member itself contributes distance 0
            members = C
        lam.append(ceil_quantile(kth_distance(members, C, k), p))
    return ClusterStore(store.classes, store.clusters, store.k, lam, p, store.fingerprint, dict(store.meta))


def detect(e_test: np.ndarray, store: ClusterStore):
    """Seen iff at least one class has d_i^(k_i) <= lambda_i.

    A single vector returns "Seen"/"Unseen"; a batch returns a boolean array
    (True = Seen).
    """
    if not store.calibrated:
        raise StateError("detector is not calibrated")
    scores = score_matrix(store, e_test)
    q = (scores <= np.asarray(store.thresholds)[None, :]).sum(1)
    seen = q >= 1
    if np.ndim(e_test) == 1:
        return SEEN if seen[0] else UNSEEN
    return seen
