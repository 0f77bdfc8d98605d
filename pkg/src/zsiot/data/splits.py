"""K-fold seen/unseen class splits and the 8:1:1 seen partition."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class FoldSplit:
    fold_index: int
    seen_classes: list[int]
    unseen_classes: list[int]
    rng_seed: int
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test_seen: list[int] = field(default_factory=list)
    test_unseen: list[int] = field(default_factory=list)

    @property
    def test(self) -> list[int]:
        return self.test_seen + self.test_unseen

    def check(self, n_classes: int | None = None) -> None:
        s, u = set(self.seen_classes), set(self.unseen_classes)
        if s & u:
            raise ValidationError(f"fold {self.fold_index}: seen and unseen classes overlap")
        if n_classes is not None and s | u != set(range(n_classes)):
            raise ValidationError(f"fold {self.fold_index}: classes do not cover the class list")
        parts = [set(self.train), set(self.val), set(self.test_seen), set(self.test_unseen)]
        for a in range(len(parts)):
            for b in range(a + 1, len(parts)):
                if parts[a] & parts[b]:
                    raise ValidationError(f"fold {self.fold_index}: partitions overlap")

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FoldSplit":
        return cls(**json.loads(Path(path).read_text()))


def _fold_seed(seed: int, k: int) -> int:
    return int(np.random.default_rng([seed, k]).integers(2**31 - 1))


def make_fold_splits(class_list: Sequence, n_unseen: int, K: int, seed: int) -> list[FoldSplit]:
    n = len(class_list)
    if not 1 <= n_unseen < n:
        raise ValidationError(f"n_unseen must be in [1, {n}), got {n_unseen}")
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    folds = []
    for k in range(K):
        fs = _fold_seed(seed, k)
        rng = np.random.default_rng(fs)
        unseen = sorted(int(c) for c in rng.choice(n, size=n_unseen, replace=False))
        seen = [c for c in range(n) if c not in unseen]
        folds.append(FoldSplit(k, seen, unseen, fs))
    return folds


def _ratio_counts(n: int) -> tuple[int, int, int]:
    n_val = int(np.floor(0.1 * n + 0.5))
    n_test = int(np.floor(0.1 * n + 0.5))
    if n_val + n_test > n:
        n_test = max(0, n - n_val)
    return n - n_val - n_test, n_val, n_test


def partition_and_balance(fold: FoldSplit, labels: np.ndarray, subjects: np.ndarray | None = None,
                          subject_wise: bool = False) -> FoldSplit:
    """Fill train/val/test index lists of ``fold`` in place and return it.

    Seen windows are split 8:1:1 per class (or per subject when ``subject_wise``);
    the test set is balanced by subsampling the larger of the seen-test and unseen pools.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(fold.rng_seed)
    unseen_pool = np.flatnonzero(np.isin(labels, fold.unseen_classes))
    if len(unseen_pool) == 0:
        raise ValidationError(f"fold {fold.fold_index}: no windows of unseen classes")

    train, val, test = [], [], []
    if subject_wise:
        if subjects is None:
            raise ValidationError("subject-wise split requested without subject ids")
        subjects = np.asarray(subjects)
        seen_idx = np.flatnonzero(np.isin(labels, fold.seen_classes))
        subj = np.unique(subjects[seen_idx])
        subj = subj[rng.permutation(len(subj))]
        n_tr, n_va, _ = _ratio_counts(len(subj))
        groups = (set(subj[:n_tr]), set(subj[n_tr:n_tr + n_va]), set(subj[n_tr + n_va:]))
        for i in seen_idx:
            for part, g in zip((train, val, test), groups):
                if subjects[i] in g:
                    part.append(int(i))
    else:
        for c in fold.seen_classes:
            idx = np.flatnonzero(labels == c)
            if len(idx) == 0:
                raise ValidationError(f"fold {fold.fold_index}: seen class {c} has no windows")
            if len(idx) < 10:
                logger.warning("seen class %d has only %d windows; 8:1:1 split is approximate", c, len(idx))
            idx = idx[rng.permutation(len(idx))]
            n_tr, n_va, _ = _ratio_counts(len(idx))
            train.extend(idx[:n_tr].tolist())
            val.extend(idx[n_tr:n_tr + n_va].tolist())
            test.extend(idx[n_tr + n_va:].tolist())

    test = np.array(sorted(test), dtype=np.int64)
    m = min(len(test), len(unseen_pool))
    if len(test) > m:
        test = np.sort(rng.choice(test, size=m, replace=False))
    unseen = unseen_pool if len(unseen_pool) == m else np.sort(rng.choice(unseen_pool, size=m, replace=False))

    fold.train = sorted(int(i) for i in train)
    fold.val = sorted(int(i) for i in val)
    fold.test_seen = [int(i) for i in test]
    fold.test_unseen = [int(i) for i in unseen]
    return fold
