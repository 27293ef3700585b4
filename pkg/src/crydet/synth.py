"""Synthetic cry / non-cry audio for desk-scale runs.

Cry clips are amplitude-modulated harmonic bursts with a 350-550 Hz
fundamental.  Other clips are band-filtered noise, steady tones outside
the cry band, or both.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from crydet.audio.manifest import ManifestEntry, write_manifest
from crydet.audio.wav import AudioClip, write_wav

RATE = 8000


def _envelope(n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    env = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        length = int(rng.uniform(0.25, 0.6) * rate)
        start = int(rng.integers(0, max(1, n - length)))
        length = min(length, n - start)
        env[start : start + length] = np.maximum(env[start : start + length], np.hanning(length))
    return env


def cry_clip(rng: np.random.Generator, duration: float = 1.0, rate: int = RATE) -> np.ndarray:
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    f0 = rng.uniform(350.0, 550.0)
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 7) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / rate
    harmonics = sum((0.6**h) * np.sin((h + 1) * phase + rng.uniform(0, 2 * np.pi)) for h in range(4))
    am = 0.7 + 0.3 * np.sin(2 * np.pi * rng.uniform(4, 8) * t)
    x = harmonics * am * _envelope(n, rate, rng)
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.3, 0.9)
    return x + 0.01 * rng.standard_normal(n)


def _band_noise(rng: np.random.Generator, n: int, rate: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (np.abs(x).max() + 1e-12)


def other_clip(rng: np.random.Generator, duration: float = 1.0, rate: int = RATE) -> np.ndarray:
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    kind = rng.integers(0, 3)
    if kind == 0:
        lo = rng.uniform(50.0, 2500.0)
        x = _band_noise(rng, n, rate, lo, lo + rng.uniform(200.0, 1200.0))
    else:
        # tones below or above the cry fundamental range
        f = rng.uniform(80.0, 250.0) if rng.random() < 0.5 else rng.uniform(1200.0, 3000.0)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if kind == 2:
            x = 0.6 * x + 0.4 * _band_noise(rng, n, rate, 100.0, 3500.0)
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.05, 0.8)
    return x + 0.01 * rng.standard_normal(n)


def make_clip(label: str, rng: np.random.Generator, duration: float = 1.0, rate: int = RATE) -> AudioClip:
    x = cry_clip(rng, duration, rate) if label == "cry" else other_clip(rng, duration, rate)
    return AudioClip(np.clip(x, -1.0, 1.0), rate)


def split_labels(n: int, rng: np.random.Generator, ratios=(8, 1, 1)) -> list[str]:
    """Random train/val/test assignment with the given ratio."""
    total = np.sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    return [splits[i] for i in rng.permutation(n)]


def make_clip_dataset(out_dir, n_cry: int = 200, n_other: int = 200, seed: int = 0,
                      duration: float = 1.0, rate: int = RATE) -> Path:
    """Write labelled WAV clips plus ``manifest.csv``; split 8:1:1 within each class."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for label, count in (("cry", n_cry), ("other", n_other)):
        for i, split in enumerate(split_labels(count, rng)):
            path = out / f"{label}_{i:04d}.wav"
            write_wav(path, make_clip(label, rng, duration, rate))
            entries.append(ManifestEntry(path, label, split))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


@dataclass(frozen=True)
class SyntheticBag:
    path: Path
    label: str
    cry_index: int  # planted 1 s segment, -1 for normal files


def make_bag_files(out_dir, n_abnormal: int, n_normal: int, seed: int = 0, segments: int = 5,
                   rate: int = RATE, split: str = "train") -> tuple[Path, list[SyntheticBag]]:
    """Multi-second files; abnormal ones hold exactly one cry second at a random position."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    bags = []
    for label, count in (("cry", n_abnormal), ("other", n_normal)):
        for i in range(count):
            planted = int(rng.integers(0, segments)) if label == "cry" else -1
            parts = [
                make_clip("cry" if j == planted else "other", rng, 1.0, rate).samples for j in range(segments)
            ]
            path = out / f"bag_{label}_{i:04d}.wav"
            write_wav(path, AudioClip(np.concatenate(parts), rate))
            bags.append(SyntheticBag(path, label, planted))
    manifest = out / "manifest.csv"
    write_manifest(manifest, [ManifestEntry(b.path, b.label, split) for b in bags])
    return manifest, bags
