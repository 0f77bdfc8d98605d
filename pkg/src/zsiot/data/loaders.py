"""Adapters from vendor dataset formats to labelled [channels, T] recordings.

Directory convention: ``<root>/<dataset>/raw/...`` for inputs and
``<root>/<dataset>/cache/windows.bin`` for the windowed archive.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .windows import DatasetSpec, Recording, WindowSet

logger = logging.getLogger(__name__)

USC_HAD_CLASSES = [
    "walking forward", "walking left", "walking right", "walking upstairs",
    "walking downstairs", "running forward", "jumping up", "sitting", "standing",
    "sleeping", "elevator up", "elevator down",
]

# PAMAP2 protocol activity ids -> names
PAMAP2_ACTIVITIES = {
    1: "lying", 2: "sitting", 3: "standing", 4: "walking", 5: "running", 6: "cycling",
    7: "nordic walking", 12: "ascending stairs", 13: "descending stairs",
    16: "vacuum cleaning", 17: "ironing", 24: "rope jumping",
}
PAMAP2_CLASSES = list(PAMAP2_ACTIVITIES.values())
# acc(+-16g) xyz and gyro xyz of the hand, chest and ankle units
PAMAP2_COLUMNS = [c for base in (3, 20, 37) for c in (*range(base + 1, base + 4), *range(base + 7, base + 10))]

MMFI_CLASSES = [
    "stretching and relaxing", "horizontal chest expansion", "vertical chest expansion",
    "twisting left", "twisting right", "marking time", "left limb extension",
    "right limb extension", "lunging toward left front", "lunging toward right front",
    "both limbs extension", "squatting", "raising left hand", "raising right hand",
    "lunging toward left side", "lunging toward right side", "waving left hand",
    "waving right hand", "picking up things", "throwing toward left side",
    "throwing toward right side", "kicking toward left with right leg",
    "kicking toward right with left leg", "body extension left", "body extension right",
    "jumping up", "bowing",
]
MMFI_POINTS = 32
MMFI_POINT_FEATURES = 5
MMFI_SUBCARRIERS = 114
MMFI_ANTENNAS = 3


def raw_dir(root: str | Path, name: str) -> Path:
    return Path(root) / name / "raw"


def cache_path(root: str | Path, name: str) -> Path:
    return Path(root) / name / "cache" / "windows.bin"


def usc_had_spec(root="") -> DatasetSpec:
    return DatasetSpec("usc-had", list(USC_HAD_CLASSES), sample_rate=100.0, window_seconds=1.28,
                       overlap_fraction=0.5, modality="imu",
                       channel_layout={"channels": 6, "names": ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"]},
                       root_path=str(root))


def pamap2_spec(root="") -> DatasetSpec:
    names = [f"{u}_{s}_{a}" for u in ("hand", "chest", "ankle") for s in ("acc", "gyro") for a in "xyz"]
    return DatasetSpec("pamap2", list(PAMAP2_CLASSES), sample_rate=100.0, window_seconds=1.71,
                       overlap_fraction=0.1, modality="imu",
                       channel_layout={"channels": 18, "names": names}, root_path=str(root))


def mmfi_spec(modality: str, root="") -> DatasetSpec:
    if modality == "mmwave":
        return DatasetSpec("mmfi-mmwave", list(MMFI_CLASSES), sample_rate=10.0, window_seconds=1.0,
                           overlap_fraction=0.1, modality="mmwave",
                           channel_layout={"channels": MMFI_POINTS * MMFI_POINT_FEATURES,
                                           "points": MMFI_POINTS, "point_features": MMFI_POINT_FEATURES},
                           root_path=str(root))
    if modality == "wifi":
        return DatasetSpec("mmfi-wifi", list(MMFI_CLASSES), sample_rate=100.0, window_seconds=0.6,
                           overlap_fraction=0.1, modality="wifi",
                           channel_layout={"channels": MMFI_ANTENNAS * MMFI_SUBCARRIERS,
                                           "antennas": MMFI_ANTENNAS, "subcarriers": MMFI_SUBCARRIERS},
                           root_path=str(root))
    raise ConfigError(f"MM-Fi has no modality {modality!r}")


def load_usc_had(root: str | Path) -> tuple[list[Recording], DatasetSpec]:
    from scipy.io import loadmat

    base = raw_dir(root, "usc-had")
    files = sorted(base.glob("**/a*t*.mat"))
    if not files:
        raise ConfigError(f"no USC-HAD .mat files under {base}")
    recs = []
    for f in files:
        m = re.match(r"a(\d+)t(\d+)\.mat$", f.name)
        if not m:
            continue
        act = int(m.group(1))
        mat = loadmat(f)
        readings = np.asarray(mat["sensor_readings"], dtype=np.float32)  # [T, 6]
        subject = f.parent.name
        recs.append(Recording(readings.T.copy(), act - 1, subject))
    return recs, usc_had_spec(root)


def load_pamap2(root: str | Path) -> tuple[list[Recording], DatasetSpec]:
    base = raw_dir(root, "pamap2")
    files = sorted(base.glob("**/subject*.dat"))
    if not files:
        raise ConfigError(f"no PAMAP2 subject*.dat files under {base}")
    ids = list(PAMAP2_ACTIVITIES)
    recs = []
    for f in files:
        table = np.loadtxt(f, dtype=np.float64)
        act = table[:, 1].astype(int)
        # contiguous runs of a single protocol activity
        change = np.flatnonzero(np.diff(act)) + 1
        for seg in np.split(np.arange(len(act)), change):
            a = act[seg[0]]
            if a not in PAMAP2_ACTIVITIES:
                continue
            series = table[np.ix_(seg, PAMAP2_COLUMNS)].T.astype(np.float32)
            recs.append(Recording(series, ids.index(a), f.stem))
    return recs, pamap2_spec(root)


def _mmfi_base(root: str | Path, name: str) -> Path:
    base = raw_dir(root, name)
    if not base.exists():
        base = raw_dir(root, "mmfi")
    return base


def _mmwave_frame(path: Path) -> np.ndarray:
    pts = np.fromfile(path, dtype=np.float64).reshape(-1, MMFI_POINT_FEATURES)
    out = np.zeros((MMFI_POINTS, MMFI_POINT_FEATURES), dtype=np.float32)
    n = min(len(pts), MMFI_POINTS)
    out[:n] = pts[:n]
    return out.reshape(-1)


def _wifi_frame(path: Path) -> np.ndarray:
    from scipy.io import loadmat

    amp = np.asarray(loadmat(path)["CSIamp"], dtype=np.float32)  # [antennas, subcarriers, packets]
    amp[~np.isfinite(amp)] = np.nan
    return amp.reshape(MMFI_ANTENNAS * MMFI_SUBCARRIERS, -1)


def load_mmfi(root: str | Path, modality: str) -> tuple[list[Recording], DatasetSpec]:
    spec = mmfi_spec(modality, root)
    base = _mmfi_base(root, spec.name)
    sub = "mmwave" if modality == "mmwave" else "wifi-csi"
    seq_dirs = sorted(p for p in base.glob(f"**/A[0-9][0-9]/{sub}") if p.is_dir())
    if not seq_dirs:
        raise ConfigError(f"no MM-Fi {sub} sequences under {base}")
    recs = []
    for d in seq_dirs:
        action = int(d.parent.name[1:]) - 1
        subject = d.parent.parent.name
        if modality == "mmwave":
            frames = [_mmwave_frame(f) for f in sorted(d.glob("*.bin"))]
            if not frames:
                continue
            series = np.stack(frames, axis=1)
        else:
            frames = [_wifi_frame(f) for f in sorted(d.glob("*.mat"))]
            if not frames:
                continue
            series = np.concatenate(frames, axis=1)
        recs.append(Recording(series, action, subject))
    return recs, spec


LOADERS = {
    "usc-had": load_usc_had,
    "pamap2": load_pamap2,
    "mmfi-mmwave": lambda root: load_mmfi(root, "mmwave"),
    "mmfi-wifi": lambda root: load_mmfi(root, "wifi"),
}


def prepare_dataset(name: str, root: str | Path, refresh: bool = False, **synthetic_kw) -> WindowSet:
    """Load, window and cache a dataset; subsequent calls read the cache."""
    cp = cache_path(root, name)
    if synthetic_kw:
        # generator settings are part of the cache identity
        tag = hashlib.sha256(json.dumps(synthetic_kw, sort_keys=True).encode()).hexdigest()[:10]
        cp = cp.with_name(f"windows-{tag}.bin")
    if cp.exists() and not refresh:
        return WindowSet.load(cp)
    if name.startswith("synthetic"):
        from .synthetic import make_synthetic_recordings

        modality = name.split("-", 1)[1] if "-" in name else "imu"
        recs, spec = make_synthetic_recordings(modality, **synthetic_kw)
        spec.name = name
    elif name in LOADERS:
        recs, spec = LOADERS[name](root)
    else:
        raise ConfigError(f"unknown dataset {name!r}; known: {sorted(LOADERS)} or synthetic-<modality>")
    ws = WindowSet.from_recordings(recs, spec)
    logger.info("%s: %d windows of shape %s", name, len(ws), ws.data.shape[1:])
    ws.save(cp)
    return ws
