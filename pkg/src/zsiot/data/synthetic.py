"""Compositional synthetic activity corpus for three sensing modalities.

Each class is a (gait, direction) pair. The gait fixes the tempo, amplitude and
waveform of the vertical motion; the direction fixes which horizontal axis
oscillates and the sign of a lean bias. Class names and hard-prompt
descriptions are built from the same attribute words, so a text encoder that
composes word meanings can describe unseen combinations.
"""

from __future__ import annotations

import numpy as np

from .windows import DatasetSpec, Recording

GAITS = {
    # freq Hz, vertical amplitude, waveform
    "walking": (1.8, 1.0, "sine"),
    "running": (3.0, 2.0, "sine"),
    "jumping": (1.2, 2.6, "pulse"),
}
DIRECTIONS = {
    # horizontal axis index (0 = sideways, 1 = forward), lean sign
    "forward": (1, +1.0),
    "backward": (1, -1.0),
    "left": (0, -1.0),
    "right": (0, +1.0),
}
GAIT_TEXT = {
    "walking": "moderate periodic vertical acceleration with a steady medium rhythm",
    "running": "large fast periodic vertical acceleration with a high step frequency",
    "jumping": "strong vertical impulses with sharp upward spikes and pauses",
}
DIRECTION_TEXT = {
    "forward": "a positive acceleration bias along the forward axis",
    "backward": "a negative acceleration bias along the forward axis",
    "left": "a sideways acceleration bias toward the left",
    "right": "a sideways acceleration bias toward the right",
}

SYNTHETIC_CLASSES = [f"{g} {d}" for g in GAITS for d in DIRECTIONS]

MODALITY_LAYOUT = {
    # sample rate, window seconds, overlap, channels
    "imu": (50.0, 1.28, 0.5, 6),
    "mmwave": (20.0, 1.6, 0.1, 32),
    "wifi": (50.0, 0.64, 0.1, 30),
}


def synthetic_descriptions() -> dict[str, str]:
    return {f"{g} {d}": f"{g.capitalize()} {d}: {GAIT_TEXT[g]} and {DIRECTION_TEXT[d]}."
            for g in GAITS for d in DIRECTIONS}


def synthetic_spec(modality: str = "imu") -> DatasetSpec:
    rate, win, ov, ch = MODALITY_LAYOUT[modality]
    return DatasetSpec(f"synthetic-{modality}", list(SYNTHETIC_CLASSES), sample_rate=rate,
                       window_seconds=win, overlap_fraction=ov, modality=modality,
                       channel_layout={"channels": ch})


def _motion(gait: str, direction: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Latent 3-axis body acceleration [3, T] for one recording."""
    freq, amp, wave = GAITS[gait]
    axis, sign = DIRECTIONS[direction]
    freq *= rng.uniform(0.9, 1.1)
    amp *= rng.uniform(0.85, 1.15)
    phase = rng.uniform(0, 2 * np.pi)
    arg = 2 * np.pi * freq * t + phase
    if wave == "sine":
        vert = amp * np.sin(arg)
    else:
        vert = amp * (np.maximum(np.sin(arg), 0.0) ** 4 * 2.5 - 0.5)
    acc = np.zeros((3, len(t)))
    acc[2] = vert
    acc[axis] = 0.6 * amp * np.sin(arg + np.pi / 3) + 0.8 * sign
    acc[1 - axis] = 0.1 * np.sin(0.5 * arg)
    return acc


def _to_modality(acc: np.ndarray, modality: str, rate: float, mix: dict, rng) -> np.ndarray:
    if modality == "imu":
        rot = np.gradient(acc, axis=1) * rate / 10.0
        gyro = np.stack([rot[1], -rot[0], 0.5 * acc[0]])
        return np.concatenate([acc, gyro])
    if modality == "mmwave":
        # 8 reflection points x (x, y, z, doppler)
        base = mix["points"]  # [8, 3]
        vel = np.gradient(acc, axis=1) * rate / 20.0
        feats = []
        for p in range(base.shape[0]):
            gain = mix["gains"][p]
            pos = base[p][:, None] + 0.3 * gain * acc
            dop = gain * (vel[0] * base[p, 0] + vel[1] * base[p, 1] + vel[2])
            feats.append(np.concatenate([pos, dop[None]]))
        return np.concatenate(feats)
    if modality == "wifi":
        h = mix["static"][:, None] + mix["mix"] @ acc  # [30, T] complex
        return np.abs(h)
    raise ValueError(modality)


def make_synthetic_recordings(modality: str = "imu", n_subjects: int = 4, seconds: float = 30.0,
                              noise: float = 0.3, seed: int = 0) -> tuple[list[Recording], DatasetSpec]:
    spec = synthetic_spec(modality)
    rate = spec.sample_rate
    layout_rng = np.random.default_rng(1234)
    mix = {
        "points": layout_rng.normal(size=(8, 3)),
        "gains": layout_rng.uniform(0.5, 1.5, size=8),
        "static": 3.0 + layout_rng.normal(size=30) + 1j * layout_rng.normal(size=30),
        "mix": (layout_rng.normal(size=(30, 3)) + 1j * layout_rng.normal(size=(30, 3))) * 0.5,
    }
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    recs = []
    for s in range(n_subjects):
        for ci, name in enumerate(spec.class_list):
            gait, direction = name.split()
            acc = _motion(gait, direction, t, rng)
            x = _to_modality(acc, modality, rate, mix, rng)
            x = x + noise * rng.normal(size=x.shape)
            recs.append(Recording(x.astype(np.float32), ci, f"subject{s}"))
    return recs, spec
