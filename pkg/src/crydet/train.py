"""Backbone and anomaly-head training loops, and top-t data mining."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from crydet import diffcore as dc
from crydet.audio.cryf import BagRecord, read_bags, read_features
from crydet.audio.manifest import DatasetManifest, ManifestEntry
from crydet.audio.mel import BLAZENET_1S, MelProfile, log_mel
from crydet.audio.wav import frame_clip, read_wav, resample
from crydet.diffcore import Tensor
from crydet.errors import ContractError, DimensionError, ManifestError, TrainingError
from crydet.mil import BagScores, FeatureBag, LossConfig, bag_loss, interpolate_segments
from crydet.model import (
    AnomalyHead,
    BlazeNet,
    ModelWeights,
    build_blazenet,
    build_head,
    cry_probability,
    spectrogram_batch,
)

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch_or_step", "loss", "val_acc", "lr"]


@dataclass(frozen=True)
class BackboneHyper:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 60
    decay_factor: float = 0.1
    decay_every: int = 20
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.momentum < 0 or self.batch < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ContractError("backbone hyperparameters must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class AnomalyHyper:
    lr: float = 1e-3
    steps: int = 20000
    batch: int = 128
    segments: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    dropout: float = 0.7
    eval_every: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch < 2 or self.segments < 1 or self.eval_every < 1:
            raise ContractError("anomaly hyperparameters must be positive")
        if self.batch % 2:
            raise ContractError("batch must be even: half abnormal, half normal")
        if self.loss.k > self.segments:
            raise ContractError(f"top-k {self.loss.k} exceeds segment count {self.segments}")


class TrainingLog:
    """Rows of ``epoch_or_step,loss,val_acc,lr``; optionally mirrored to a CSV file."""

    def __init__(self, path=None):
        self.rows: list[tuple[int, float, float, float]] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)

    def add(self, step: int, loss: float, val_acc: float, lr: float) -> None:
        self.rows.append((step, loss, val_acc, lr))
        if self.path:
            with open(self.path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [step, f"{loss:.6f}", "" if np.isnan(val_acc) else f"{val_acc:.6f}", f"{lr:.6g}"]
                )


def _check_finite(loss: Tensor, where: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at {where}")
    return value


# ----------------------------------------------------------------------
# backbone


def clip_frames(path, profile: MelProfile = BLAZENET_1S, hop_s: float | None = None) -> np.ndarray:
    """Log-Mel arrays for every example window of a WAV file, shape (frames, *target_shape)."""
    clip = resample(read_wav(path), profile.sample_rate)
    hop = profile.example_hop_s if hop_s is None else hop_s
    frames = frame_clip(clip, profile.example_window_s, hop)
    if not frames:
        return np.zeros((0, *profile.target_shape), dtype=np.float32)
    return np.stack([log_mel(f, profile).data for f in frames]).astype(np.float32)


def spectrogram_dataset(entries: Sequence[ManifestEntry], profile: MelProfile = BLAZENET_1S):
    """Frame every file at the profile's example window; each frame inherits the file label."""
    xs, ys = [], []
    for e in entries:
        frames = clip_frames(e.path, profile)
        if frames.shape[0] == 0:
            log.warning("%s shorter than one example window, skipped", e.path)
            continue
        xs.append(frames)
        ys.extend([1 if e.is_cry else 0] * frames.shape[0])
    if not xs:
        return np.zeros((0, *profile.target_shape), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.asarray(ys, dtype=np.int64)


def backbone_scores(net: BlazeNet, x: np.ndarray, batch: int = 64) -> np.ndarray:
    """Cry probabilities for an (N, 64, 64) array."""
    out = [cry_probability(net.forward(spectrogram_batch(x[i : i + batch]))[1].data) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def backbone_features(net: BlazeNet, x: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [net.forward(spectrogram_batch(x[i : i + batch]))[0].data for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, 224), dtype=np.float32)


@dataclass
class TrainResult:
    weights: ModelWeights
    log: TrainingLog
    best_val_acc: float = float("nan")
    best_at: int = -1


def train_backbone_arrays(x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
                          hyper: BackboneHyper = BackboneHyper(), log_path=None, net: BlazeNet | None = None) -> TrainResult:
    """Cross-entropy training with SGD + momentum and a step learning-rate decay.

    Returns the weights of the epoch with the best validation accuracy at 0.5
    (earliest epoch on ties); with no epochs, the initialization.
    """
    if len(x_train) == 0:
        raise ContractError("empty training split")
    net = net or build_blazenet(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    history = TrainingLog(log_path)
    best = TrainResult(net.weights(), history)
    params = net.params
    state = dc.OptimizerState("sgd_momentum")

    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        order = rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for start in range(0, len(order), hyper.batch):
            idx = order[start : start + hyper.batch]
            _, logits = net.forward(spectrogram_batch(x_train[idx]))
            loss = dc.softmax_cross_entropy(logits, y_train[idx])
            value = _check_finite(loss, f"epoch {epoch}")
            dc.zero_grad(params.values())
            grads = dc.backward(loss, params)
            dc.sgd_momentum_step(params, grads, lr, hyper.momentum, state)
            total += value * len(idx)
            seen += len(idx)
        val_acc = float(np.mean((backbone_scores(net, x_val) >= 0.5) == (y_val == 1))) if len(x_val) else float("nan")
        history.add(epoch, total / seen, val_acc, lr)
        log.info("epoch %d loss %.4f val_acc %.4f lr %.2g", epoch, total / seen, val_acc, lr)
        if np.isnan(val_acc) or np.isnan(best.best_val_acc) or val_acc > best.best_val_acc:
            best = TrainResult(net.weights(), history, val_acc, epoch)
    return best


def train_backbone(manifest: DatasetManifest, hyper: BackboneHyper = BackboneHyper(),
                   profile: MelProfile = BLAZENET_1S, log_path=None) -> TrainResult:
    manifest.require_splits("train", "val")
    x_tr, y_tr = spectrogram_dataset(manifest.split("train"), profile)
    x_va, y_va = spectrogram_dataset(manifest.split("val"), profile)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ManifestError("train and val splits must contain at least one full example window")
    return train_backbone_arrays(x_tr, y_tr, x_va, y_va, hyper, log_path)


# ----------------------------------------------------------------------
# anomaly head


def dual_iterator(abnormal: Sequence, normal: Sequence, batch: int, seed: int = 0) -> Iterator[tuple[list, list]]:
    """Endless stream of (batch/2 abnormal, batch/2 normal) draws.

    Each side walks its own permutation and reshuffles when exhausted, so
    pairings are random even when the two sides differ in size.
    """
    if not abnormal or not normal:
        raise ContractError("both abnormal and normal datasets must be non-empty")
    if batch < 2 or batch % 2:
        raise ContractError(f"batch must be a positive even number, got {batch}")
    half = batch // 2
    seq_a, seq_n = np.random.SeedSequence(seed).spawn(2)

    def side(items, ss):
        rng = np.random.default_rng(ss)
        while True:
            for i in rng.permutation(len(items)):
                yield items[i]

    it_a, it_n = side(abnormal, seq_a), side(normal, seq_n)
    while True:
        yield [next(it_a) for _ in range(half)], [next(it_n) for _ in range(half)]


def _bag_scores(head: AnomalyHead, bags: list[FeatureBag], segments: int, rng, training: bool) -> BagScores:
    x = np.stack([interpolate_segments(b.segment_features, segments) for b in bags]).astype(np.float32)
    b, s, d = x.shape
    out = head.forward(Tensor(x.reshape(b * s, d)), rng=rng, training=training)
    return BagScores(dc.reshape(out.score, (b, s)), dc.reshape(out.magnitude, (b, s)))


def frame_scores(head: AnomalyHead, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode per-frame (score, magnitude) for an (F, D) array."""
    if len(features) == 0:
        return np.zeros(0), np.zeros(0)
    out = head.forward(Tensor(np.asarray(features, dtype=np.float32)))
    return out.score.data.astype(np.float64), out.magnitude.data.astype(np.float64)


def bag_accuracy(head: AnomalyHead, bags: Sequence[FeatureBag], threshold: float = 0.5) -> float:
    """Bag-level accuracy: a bag is predicted cry when any frame scores at or above the threshold."""
    hits = [(frame_scores(head, b.segment_features)[0].max() >= threshold) == (b.label == 1) for b in bags]
    return float(np.mean(hits))


def train_anomaly(bags: Sequence[FeatureBag], hyper: AnomalyHyper = AnomalyHyper(), input_dim: int | None = None,
                  val_bags: Sequence[FeatureBag] | None = None, log_path=None) -> TrainResult:
    """Weakly supervised head training on paired abnormal/normal batches with Adam.

    Every step draws a balanced batch, interpolates each bag to ``segments``
    rows and minimizes the configured bag loss.  With validation bags the
    best checkpoint (bag accuracy at 0.5, earliest on ties) is returned,
    otherwise the final weights.
    """
    abnormal = [b for b in bags if b.label == 1]
    normal = [b for b in bags if b.label == 0]
    dims = {b.segment_features.shape[1] for b in bags}
    if len(dims) > 1:
        raise DimensionError(f"bags have mixed feature dimensions {sorted(dims)}")
    dim = dims.pop() if dims else input_dim
    input_dim = input_dim or dim
    if dim != input_dim:
        raise DimensionError(f"features are {dim}-d but the head expects {input_dim}")

    head = build_head(input_dim, seed=hyper.seed, dropout=hyper.dropout)
    history = TrainingLog(log_path)
    best = TrainResult(head.weights(), history)
    if hyper.steps == 0:
        return best

    rng = np.random.default_rng(np.random.SeedSequence(hyper.seed).spawn(3)[2])
    params = head.params
    state = dc.OptimizerState("adam")
    running = 0.0
    stream = dual_iterator(abnormal, normal, hyper.batch, hyper.seed)
    for step in range(1, hyper.steps + 1):
        batch_a, batch_n = next(stream)
        scores_a = _bag_scores(head, batch_a, hyper.segments, rng, True)
        scores_n = _bag_scores(head, batch_n, hyper.segments, rng, True)
        loss = bag_loss(scores_a, scores_n, hyper.loss)
        running += _check_finite(loss, f"step {step}")
        dc.zero_grad(params.values())
        grads = dc.backward(loss, params)
        dc.adam_step(params, grads, hyper.lr, state=state)

        if step % hyper.eval_every == 0 or step == hyper.steps:
            n = hyper.eval_every if step % hyper.eval_every == 0 else step % hyper.eval_every
            val_acc = bag_accuracy(head, val_bags) if val_bags else float("nan")
            history.add(step, running / n, val_acc, hyper.lr)
            log.info("step %d loss %.4f val_acc %.4f", step, running / n, val_acc)
            running = 0.0
            if val_bags and (np.isnan(best.best_val_acc) or val_acc > best.best_val_acc):
                best = TrainResult(head.weights(), history, val_acc, step)

    if not val_bags:
        return TrainResult(head.weights(), history, float("nan"), hyper.steps)
    return best


def load_bag_dir(path) -> list[FeatureBag]:
    """Read ``bags.csv`` and the CRYF files it lists (paths relative to the directory)."""
    root = Path(path)
    records: list[BagRecord] = read_bags(root / "bags.csv")
    bags = []
    for r in records:
        feats = read_features(root / r.source)
        if feats.shape[0] != r.n_frames:
            raise ManifestError(f"{r.source}: bags.csv says {r.n_frames} frames, file has {feats.shape[0]}")
        if feats.shape[0] == 0:
            log.warning("%s has no frames, skipped", r.source)
            continue
        bags.append(FeatureBag(feats, r.y, r.source))
    return bags


# ----------------------------------------------------------------------
# data mining


MINED_HEADER = ["source", "frame_start_s", "score", "label", "origin"]


@dataclass(frozen=True)
class MinedRecord:
    source: str
    frame_start_s: float
    score: float
    label: str
    origin: str


def mine_topt(head: AnomalyHead, bags: Sequence[FeatureBag], t: int = 2, frame_hop_s: float = 1.0) -> list[MinedRecord]:
    """Keep the t highest-scoring 1 s frames of every file, scored in inference mode.

    Frames inherit the file label; frames of non-cry files are hard negatives.
    Ties keep the earlier frame.
    """
    if t < 1:
        raise ContractError("t must be >= 1")
    records = []
    for bag in bags:
        scores, _ = frame_scores(head, bag.segment_features)
        if len(scores) < t:
            log.warning("%s has %d frames, fewer than t=%d; keeping all", bag.source, len(scores), t)
        keep = np.argsort(-scores, kind="stable")[:t]
        label, origin = ("cry", "positive-bag") if bag.label == 1 else ("other", "negative-bag")
        records.extend(MinedRecord(bag.source, float(i * frame_hop_s), float(scores[i]), label, origin) for i in keep)
    return records


def write_mined(path, records: Sequence[MinedRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MINED_HEADER)
        for r in records:
            w.writerow([r.source, f"{r.frame_start_s:.3f}", f"{r.score:.6f}", r.label, r.origin])


def read_mined(path) -> list[MinedRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != MINED_HEADER:
            raise ManifestError(f"{path}: header must be '{','.join(MINED_HEADER)}'")
        return [MinedRecord(s, float(f), float(sc), lab, o) for s, f, sc, lab, o in reader]
