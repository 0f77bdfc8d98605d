"""Sliding-window segmentation and the in-memory window archive."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ValidationError

logger = logging.getLogger(__name__)

MODALITIES = ("imu", "mmwave", "wifi")


@dataclass
class SensorWindow:
    data: np.ndarray  # [channels, timesteps]
    label: int
    modality: str = "imu"
    subject_id: str | None = None


@dataclass
class DatasetSpec:
    name: str
    class_list: list[str]
    sample_rate: float
    window_seconds: float
    overlap_fraction: float
    modality: str = "imu"
    channel_layout: dict = field(default_factory=dict)
    root_path: str = ""

    def __post_init__(self):
        if len(set(self.class_list)) != len(self.class_list):
            raise ValidationError(f"duplicate class names in {self.name}")
        if any(not c.strip() for c in self.class_list):
            raise ValidationError(f"empty class name in {self.name}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValidationError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.window_len < 1:
            raise ValidationError("window shorter than one sample")

    @property
    def window_len(self) -> int:
        return int(round(self.window_seconds * self.sample_rate))

    @property
    def n_channels(self) -> int | None:
        return self.channel_layout.get("channels")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_list": list(self.class_list),
            "sample_rate": self.sample_rate,
            "window_seconds": self.window_seconds,
            "overlap_fraction": self.overlap_fraction,
            "modality": self.modality,
            "channel_layout": dict(self.channel_layout),
            "root_path": str(self.root_path),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


def window_stride(window_len: int, overlap_fraction: float) -> int:
    if overlap_fraction < 0 or overlap_fraction >= 1:
        raise ValidationError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if window_len < 1:
        raise ValidationError(f"window_len must be >= 1, got {window_len}")
    return max(1, int(round(window_len * (1.0 - overlap_fraction))))


def window_offsets(n_steps: int, window_len: int, overlap_fraction: float) -> np.ndarray:
    """Start offsets of every fully contained window; empty if the series is too short."""
    stride = window_stride(window_len, overlap_fraction)
    if n_steps < window_len:
        return np.zeros(0, dtype=np.int64)
    count = (n_steps - window_len) // stride + 1
    return np.arange(count, dtype=np.int64) * stride


def fill_missing(window: np.ndarray, max_missing: float = 0.2) -> np.ndarray | None:
    """Linearly interpolate NaN/Inf samples per channel.

    Returns None when more than ``max_missing`` of the values are missing.
    """
    bad = ~np.isfinite(window)
    if not bad.any():
        return window
    if bad.mean() > max_missing:
        return None
    out = np.array(window, dtype=np.float64, copy=True)
    t = np.arange(out.shape[1])
    for c in range(out.shape[0]):
        m = bad[c]
        if not m.any():
            continue
        if m.all():
            out[c] = 0.0
            continue
        out[c, m] = np.interp(t[m], t[~m], out[c, ~m])
    return out.astype(window.dtype, copy=False)


def window_series(
    series: np.ndarray,
    window_len: int,
    overlap_fraction: float,
    label: int = -1,
    modality: str = "imu",
    subject_id: str | None = None,
    max_missing: float = 0.2,
) -> list[SensorWindow]:
    series = np.asarray(series)
    if series.ndim != 2:
        raise ValidationError(f"series must be [channels, T], got shape {series.shape}")
    out = []
    for off in window_offsets(series.shape[1], window_len, overlap_fraction):
        w = fill_missing(series[:, off:off + window_len], max_missing)
        if w is None:
            continue
        out.append(SensorWindow(np.ascontiguousarray(w), label, modality, subject_id))
    return out


@dataclass
class Recording:
    """One continuous labelled stretch of sensor data, [channels, T]."""

    series: np.ndarray
    label: int
    subject_id: str | None = None


class WindowSet:
    """Array-backed collection of windows from one dataset."""

    def __init__(self, data: np.ndarray, labels: np.ndarray, spec: DatasetSpec,
                 subjects: Sequence[str] | None = None):
        data = np.asarray(data, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if data.ndim != 3:
            raise ValidationError(f"window data must be [N, C, T], got {data.shape}")
        if len(data) != len(labels):
            raise ValidationError("data/label length mismatch")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(spec.class_list)):
            raise ValidationError("label outside the dataset class list")
        if not np.isfinite(data).all():
            raise ValidationError("non-finite values in window data")
        self.data = data
        self.labels = labels
        self.spec = spec
        self.subjects = np.asarray(subjects if subjects is not None else [""] * len(labels), dtype=str)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SensorWindow:
        return SensorWindow(self.data[i], int(self.labels[i]), self.spec.modality, str(self.subjects[i]) or None)

    @property
    def class_list(self) -> list[str]:
        return self.spec.class_list

    @classmethod
    def from_recordings(cls, recordings: Iterable[Recording], spec: DatasetSpec,
                        max_missing: float = 0.2) -> "WindowSet":
        data, labels, subjects = [], [], []
        for rec in recordings:
            for w in window_series(rec.series, spec.window_len, spec.overlap_fraction,
                                   rec.label, spec.modality, rec.subject_id, max_missing):
                data.append(w.data)
                labels.append(w.label)
                subjects.append(rec.subject_id or "")
        if not data:
            logger.warning("no windows produced for %s", spec.name)
            c = spec.n_channels or 0
            return cls(np.zeros((0, c, spec.window_len), np.float32), np.zeros(0, np.int64), spec, [])
        return cls(np.stack(data), np.array(labels), spec, subjects)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.savez(buf, data=self.data, labels=self.labels, subjects=self.subjects,
                 spec=np.array(json.dumps(self.spec.to_dict(), sort_keys=True)))
        path.write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "WindowSet":
        with np.load(Path(path), allow_pickle=False) as z:
            spec = DatasetSpec.from_dict(json.loads(str(z["spec"])))
            return cls(z["data"], z["labels"], spec, z["subjects"])


def expected_window_count(n_steps: int, window_len: int, overlap_fraction: float) -> int:
    """Closed-form count of fully contained windows."""
    if n_steps < window_len:
        return 0
    stride = window_stride(window_len, overlap_fraction)
    return math.floor((n_steps - window_len) / stride) + 1
