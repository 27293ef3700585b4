"""Log-Mel spectrogram front end with the two fixed parameter profiles."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from crydet.audio.wav import AudioClip
from crydet.errors import ContractError, ProfileMismatchError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MelProfile:
    name: str
    sample_rate: int
    n_mels: int
    fft_window_s: float
    fft_hop_s: float
    fmin: float
    fmax: float
    log_offset: float
    example_window_s: float
    example_hop_s: float
    target_shape: tuple[int, int]

    def __post_init__(self):
        nyquist = self.sample_rate / 2.0
        if self.fmax > nyquist:
            log.info("profile %s: fmax %.0f Hz above Nyquist, clamped to %.0f Hz", self.name, self.fmax, nyquist)
            object.__setattr__(self, "fmax", nyquist)
        if not 0 <= self.fmin < self.fmax:
            raise ContractError(f"need 0 <= fmin < fmax, got {self.fmin}, {self.fmax}")
        if min(self.target_shape) <= 0:
            raise ContractError("target_shape entries must be positive")
        if self.fft_window_s <= self.fft_hop_s:
            raise ContractError("FFT window must be longer than the hop")

    @property
    def window_samples(self) -> int:
        return int(round(self.fft_window_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.fft_hop_s * self.sample_rate))

    @property
    def fft_size(self) -> int:
        return 1 << (self.window_samples - 1).bit_length()

    @property
    def example_samples(self) -> int:
        return int(round(self.example_window_s * self.sample_rate))

    def scaled(self, factor: float, name: str | None = None) -> "MelProfile":
        """Same output shape for examples ``factor`` times longer."""
        return replace(
            self,
            name=name or f"{self.name}x{factor:g}",
            fft_window_s=self.fft_window_s * factor,
            fft_hop_s=self.fft_hop_s * factor,
            example_window_s=self.example_window_s * factor,
            example_hop_s=self.example_hop_s * factor,
        )


BLAZENET_1S = MelProfile(
    name="blazenet",
    sample_rate=8000,
    n_mels=64,
    fft_window_s=0.064,
    fft_hop_s=0.01475,
    fmin=0.0,
    fmax=8000.0,
    log_offset=0.01,
    example_window_s=1.0,
    example_hop_s=1.0,
    target_shape=(64, 64),
)

BLAZENET_5S = BLAZENET_1S.scaled(5.0, name="blazenet5s")

EMBEDDING_1S = MelProfile(
    name="embedding",
    sample_rate=16000,
    n_mels=64,
    fft_window_s=0.025,
    fft_hop_s=0.010,
    fmin=125.0,
    fmax=7500.0,
    log_offset=0.01,
    example_window_s=1.0,
    example_hop_s=0.96,
    target_shape=(96, 64),
)

PROFILES = {p.name: p for p in (BLAZENET_1S, BLAZENET_5S, EMBEDDING_1S)}


@dataclass(frozen=True, eq=False)
class Spectrogram:
    data: np.ndarray
    profile: MelProfile

    def __post_init__(self):
        if self.data.shape != tuple(self.profile.target_shape):
            raise ContractError(f"spectrogram shape {self.data.shape} != {self.profile.target_shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("spectrogram has non-finite entries")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, fft_size // 2 + 1), peak height 1."""
    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(x: np.ndarray, window: int, hop: int, fft_size: int) -> np.ndarray:
    """Unpadded magnitude STFT, shape (1 + (len - window) // hop, fft_size // 2 + 1)."""
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    return np.abs(np.fft.rfft(frames * periodic_hann(window), n=fft_size, axis=1))


def log_mel(frame: AudioClip, profile: MelProfile) -> Spectrogram:
    """Log-Mel spectrogram of one example window, shape ``profile.target_shape``."""
    if frame.sample_rate != profile.sample_rate:
        raise ProfileMismatchError(
            f"profile {profile.name} expects {profile.sample_rate} Hz, got {frame.sample_rate} Hz"
        )
    if len(frame) != profile.example_samples:
        raise ProfileMismatchError(
            f"profile {profile.name} expects {profile.example_samples} samples, got {len(frame)}"
        )
    mag = stft_magnitude(frame.samples, profile.window_samples, profile.hop_samples, profile.fft_size)
    fb = mel_filterbank(profile.sample_rate, profile.fft_size, profile.n_mels, profile.fmin, profile.fmax)
    out = np.log(mag @ fb.T + profile.log_offset)
    n_frames = profile.target_shape[0]
    if out.shape[0] < n_frames:
        raise ProfileMismatchError(f"profile {profile.name} yields {out.shape[0]} frames, needs {n_frames}")
    # 10 ms hop gives 98 frames per second on the embedding path; keep the first 96.
    return Spectrogram(out[:n_frames], profile)
