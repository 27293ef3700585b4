"""CRYF per-frame feature files and the bag metadata CSV."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from crydet.errors import FormatError, ManifestError

CRYF_MAGIC = b"CRYF"
_HEADER = struct.Struct("<4sII")
BAGS_HEADER = ["source", "label", "n_frames"]


def encode_features(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise FormatError(f"feature array must be 2-D, got shape {frames.shape}")
    n, d = frames.shape
    return _HEADER.pack(CRYF_MAGIC, n, d) + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_features(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("CRYF file shorter than its header")
    magic, n, d = _HEADER.unpack_from(data)
    if magic != CRYF_MAGIC:
        raise FormatError(f"bad CRYF magic {magic!r}")
    expected = _HEADER.size + 4 * n * d
    if len(data) != expected:
        raise FormatError(f"CRYF payload is {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float32)


def write_features(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(frames))


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


@dataclass(frozen=True)
class BagRecord:
    source: str
    label: str
    n_frames: int

    @property
    def y(self) -> int:
        return 1 if self.label == "cry" else 0


def write_bags(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAGS_HEADER)
        for r in records:
            w.writerow([r.source, r.label, r.n_frames])


def read_bags(path) -> list[BagRecord]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != BAGS_HEADER:
        raise ManifestError(f"{path}: header must be '{','.join(BAGS_HEADER)}'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            source, label, n = row
            n = int(n)
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: malformed row {row}") from e
        if label not in ("cry", "other"):
            raise ManifestError(f"{path}:{lineno}: unknown label '{label}'")
        out.append(BagRecord(source, label, n))
    return out
