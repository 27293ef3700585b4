"""RIFF/WAVE decoding, encoding and sample-rate conversion."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from crydet.errors import ContractError, DecodeError, UnsupportedFormatError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ContractError("AudioClip needs a non-empty 1-D sample array")
        if int(self.sample_rate) <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ContractError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _parse_fmt(chunk: bytes) -> tuple[int, int, int, int]:
    if len(chunk) < 16:
        raise DecodeError("fmt chunk shorter than 16 bytes")
    tag, channels, rate, _byte_rate, _block_align, bits = struct.unpack("<HHIIHH", chunk[:16])
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(chunk) < 40:
            raise DecodeError("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk")
        # First two bytes of the SubFormat GUID carry the actual format tag.
        tag = struct.unpack("<H", chunk[24:26])[0]
    return tag, channels, rate, bits


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string into a mono :class:`AudioClip`.

    Supports 8/16/24/32-bit integer PCM and 32-bit float, one or two
    channels.  Stereo is averaged to mono.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        size = struct.unpack("<I", data[pos + 4 : pos + 8])[0]
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            if len(body) < size:
                raise DecodeError("data chunk truncated")
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise DecodeError("missing fmt chunk")
    if payload is None:
        raise DecodeError("missing data chunk")

    tag, channels, rate, bits = fmt
    if tag == WAVE_FORMAT_PCM and bits in (8, 16, 24, 32):
        pass
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedFormatError(f"unsupported codec: format tag 0x{tag:04x}, {bits} bits")
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"unsupported channel count {channels}")
    if rate <= 0:
        raise DecodeError("sample rate must be positive")

    width = bits // 8
    usable = len(payload) - len(payload) % (width * channels)
    raw = payload[:usable]
    if not raw:
        raise DecodeError("data chunk holds no complete frame")

    if tag == WAVE_FORMAT_IEEE_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        x = np.clip(np.nan_to_num(x), -1.0, 1.0)
    elif bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v & 0x800000, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)

    x = x.reshape(-1, channels).mean(axis=1)
    return AudioClip(x, rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Encode a clip as 16-bit mono PCM."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    return header + pcm


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def write_wav(path, clip: AudioClip) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


def _lowpass_kernel(cutoff: float, half_width: int) -> np.ndarray:
    # cutoff is a fraction of the source Nyquist frequency.
    n = np.arange(-half_width, half_width + 1, dtype=np.float64)
    h = cutoff * np.sinc(cutoff * n)
    h *= np.hanning(2 * half_width + 3)[1:-1]
    return h / h.sum()


def resample(clip: AudioClip, target_rate: int, half_width: int = 32) -> AudioClip:
    """Change the sample rate with a windowed-sinc low-pass and linear interpolation.

    The low-pass only runs when downsampling.  Output length is
    ``round(len * target_rate / source_rate)``.
    """
    if target_rate <= 0:
        raise ContractError(f"target_rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src)

    x = clip.samples
    if target_rate < src:
        kernel = _lowpass_kernel(0.95 * target_rate / src, half_width)
        x = np.convolve(x, kernel, mode="same")

    n_out = max(1, int(round(x.size * target_rate / src)))
    pos = np.arange(n_out, dtype=np.float64) * (src / target_rate)
    y = np.interp(pos, np.arange(x.size, dtype=np.float64), x)
    return AudioClip(np.clip(y, -1.0, 1.0), target_rate)


def frame_clip(clip: AudioClip, frame_s: float, hop_s: float) -> list[AudioClip]:
    """Cut a clip into fixed-length frames; a short trailing remainder is dropped."""
    if frame_s <= 0 or hop_s <= 0:
        raise ContractError("frame_s and hop_s must be positive")
    flen = int(round(frame_s * clip.sample_rate))
    hop = int(round(hop_s * clip.sample_rate))
    n = clip.samples.size
    if n < flen:
        return []
    count = 1 + (n - flen) // hop
    return [AudioClip(clip.samples[i * hop : i * hop + flen], clip.sample_rate) for i in range(count)]
