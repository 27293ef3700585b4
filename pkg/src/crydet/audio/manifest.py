"""Dataset manifest CSV (``path,label,split``)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from crydet.errors import ManifestError

LABELS = ("cry", "other")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    split: str

    @property
    def is_cry(self) -> bool:
        return self.label == "cry"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def require_splits(self, *names: str) -> None:
        for name in names:
            if not self.split(name):
                raise ManifestError(f"manifest split '{name}' is empty")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
        raise ManifestError(f"{path}: header must be 'path,label,split'")

    entries = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        raw_path, label, split = (c.strip() for c in row)
        if label not in LABELS:
            raise ManifestError(f"{path}:{lineno}: unknown label '{label}' (line {lineno})")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split '{split}' (line {lineno})")
        p = Path(raw_path)
        if not p.is_absolute():
            p = base / p
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path '{raw_path}'")
        seen.add(p)
        entries.append(ManifestEntry(p, label, split))
    return DatasetManifest(tuple(entries))


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for e in entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([p.as_posix(), e.label, e.split])
