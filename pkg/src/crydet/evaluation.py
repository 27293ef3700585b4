"""Per-segment metrics: accuracy at a threshold, F1-max, ROC / AUC, report files.

The positive class is cry (label 1) everywhere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from crydet.errors import ContractError, ManifestError


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if s.shape != y.shape:
            raise ContractError(f"{s.size} scores but {y.size} labels")
        if not np.all(np.isfinite(s)):
            raise ContractError("scores must be finite")
        if not np.all((y == 0) | (y == 1)):
            raise ContractError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.scores.size


@dataclass
class MetricsReport:
    accuracy_at_default: float
    threshold: float
    f1_max: float
    f1_max_threshold: float
    accuracy_at_f1_max: float
    auc: float
    n: int
    n_positive: int
    roc: list[tuple[float, float, float]] = field(default_factory=list)  # (fpr, tpr, threshold)


def _nonempty(s: ScoredSet) -> None:
    if len(s) == 0:
        raise ContractError("metric over an empty score set")


def accuracy_at(s: ScoredSet, threshold: float = 0.5) -> float:
    """Fraction of items where ``score >= threshold`` agrees with the label."""
    _nonempty(s)
    pred = s.scores >= threshold
    return float(np.mean(pred == (s.labels == 1)))


def f1_at(s: ScoredSet, threshold: float) -> float:
    pred = s.scores >= threshold
    pos = s.labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def f1_max(s: ScoredSet) -> tuple[float, float]:
    """Best F1 over {0, 1} and the midpoints between sorted distinct scores.

    Returns ``(f1, threshold)``; on ties the lowest threshold wins.
    """
    _nonempty(s)
    if not np.any(s.labels == 1):
        raise ContractError("F1 needs at least one positive")
    best, best_t = -1.0, 0.0
    for t in candidate_thresholds(s.scores):
        f = f1_at(s, t)
        if f > best:
            best, best_t = f, float(t)
    return best, best_t


def roc_auc(s: ScoredSet) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` from (0, 0) to (1, 1) and trapezoid AUC.

    Each point classifies ``score >= threshold`` as positive; the first point
    uses threshold +inf.
    """
    _nonempty(s)
    pos = s.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes")
    order = np.argsort(-s.scores, kind="stable")
    ss, yy = s.scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(ss)), ss.size - 1]  # last index of every distinct score
    tps = np.cumsum(yy)[last]
    fps = np.cumsum(~yy)[last]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thr = np.r_[np.inf, ss[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist(), thr.tolist())), auc


def evaluate(s: ScoredSet, threshold: float = 0.5) -> MetricsReport:
    f1, f1_thr = f1_max(s)
    roc, auc = roc_auc(s)
    return MetricsReport(
        accuracy_at_default=accuracy_at(s, threshold),
        threshold=threshold,
        f1_max=f1,
        f1_max_threshold=f1_thr,
        accuracy_at_f1_max=accuracy_at(s, f1_thr),
        auc=auc,
        n=len(s),
        n_positive=int(np.sum(s.labels == 1)),
        roc=roc,
    )


METRICS_FILE = "metrics.json"
ROC_FILE = "roc.csv"


def emit_report(report: MetricsReport, out_dir) -> tuple[Path, Path]:
    """Write ``metrics.json`` (scalars) and ``roc.csv`` (fpr,tpr,threshold at 6 decimals)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scalars = {k: v for k, v in asdict(report).items() if k != "roc"}
    mpath, rpath = out / METRICS_FILE, out / ROC_FILE
    mpath.write_text(json.dumps(scalars, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(rpath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in sorted(report.roc, key=lambda p: (p[0], p[1])):
            w.writerow([f"{fpr:.6f}", f"{tpr:.6f}", "inf" if np.isinf(thr) else f"{thr:.6f}"])
    return mpath, rpath


def read_report(out_dir) -> MetricsReport:
    out = Path(out_dir)
    scalars = json.loads((out / METRICS_FILE).read_text(encoding="utf-8"))
    with open(out / ROC_FILE, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    roc = [(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in rows]
    return MetricsReport(roc=roc, **scalars)


def read_scores(path) -> ScoredSet:
    """Read an ``id,score,label`` CSV; labels may be 0/1 or cry/other."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "score", "label"]:
            raise ManifestError(f"{path}: header must be 'id,score,label'")
        ids, scores, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ident, score, label = row
                scores.append(float(score))
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: malformed row {row}") from e
            label = {"cry": "1", "other": "0"}.get(label, label)
            if label not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: label must be 0/1 or cry/other")
            ids.append(ident)
            labels.append(int(label))
    return ScoredSet(np.array(scores), np.array(labels, dtype=np.int64), tuple(ids), str(path))


def write_scores(path, s: ScoredSet) -> None:
    ids = s.ids or tuple(str(i) for i in range(len(s)))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "label"])
        for i, sc, y in zip(ids, s.scores, s.labels):
            w.writerow([i, repr(float(sc)), int(y)])
