"""Bags, top-k selection and the MIL objectives.

Loss functions take score / magnitude tensors shaped ``(S,)`` for one bag or
``(B, S)`` for a batch of bags and return a scalar tensor (mean over pairs in
the batched case).  Top-k selection is non-differentiable: indices are picked
from the magnitude values and gradients flow through the picked entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crydet import diffcore as dc
from crydet.diffcore import Tensor
from crydet.errors import ContractError

BCE_EPS = 1e-7
VARIANTS = ("score_mil", "rtfm")


@dataclass(frozen=True)
class FeatureBag:
    segment_features: np.ndarray  # (S, D)
    label: int  # 1 abnormal (cry), 0 normal
    source: str = ""

    def __post_init__(self):
        f = np.asarray(self.segment_features, dtype=np.float32)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ContractError(f"bag needs an (S, D) array with S >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ContractError("bag features must be finite")
        if self.label not in (0, 1):
            raise ContractError(f"bag label must be 0 or 1, got {self.label}")
        object.__setattr__(self, "segment_features", f)


@dataclass(frozen=True)
class BagScores:
    scores: Tensor  # (S,) or (B, S), in (0, 1)
    magnitudes: Tensor  # same shape, >= 0


@dataclass(frozen=True)
class LossConfig:
    margin: float = 100.0
    alpha: float = 1e-4
    lambda1: float = 8e-4
    lambda2: float = 8e-4
    k: int = 2
    variant: str = "rtfm"

    def __post_init__(self):
        if self.margin <= 0:
            raise ContractError("margin must be positive")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if min(self.alpha, self.lambda1, self.lambda2) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown loss variant {self.variant!r}")


def interpolate_segments(frame_features: np.ndarray, segments: int) -> np.ndarray:
    """Resample F per-frame feature rows to ``segments`` rows by linear interpolation.

    Row j is taken at position j*(F-1)/(S-1).  One segment is the mean of all
    frames; a single frame is replicated.
    """
    x = np.asarray(frame_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or segments < 1:
        raise ContractError(f"need (F, D) features with F >= 1 and S >= 1, got {x.shape}, S={segments}")
    f = x.shape[0]
    if segments == 1:
        return x.mean(axis=0, keepdims=True)
    if f == 1:
        return np.repeat(x, segments, axis=0)
    pos = np.arange(segments) * (f - 1) / (segments - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, f - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * x[lo] + w * x[hi]


def topk_by_magnitude(magnitudes, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, largest first; ties go to the lower index."""
    m = np.asarray(magnitudes.data if isinstance(magnitudes, Tensor) else magnitudes)
    if k < 1 or k > m.shape[-1]:
        raise ContractError(f"top-k needs 1 <= k <= {m.shape[-1]}, got k={k}")
    return np.argsort(-m, axis=-1, kind="stable")[..., :k]


def _pair_mean(x: Tensor) -> Tensor:
    return x if x.data.ndim == 0 else dc.mean(x)


def _adjacent(scores: Tensor) -> tuple[Tensor, Tensor]:
    s = scores.shape[-1]
    idx = np.broadcast_to(np.arange(s), scores.shape)
    return dc.take(scores, idx[..., 1:], axis=-1), dc.take(scores, idx[..., :-1], axis=-1)


def mil_ranking_loss(scores_a: Tensor, scores_n: Tensor) -> Tensor:
    """Hinge on the gap between the top abnormal score and the top normal score."""
    gap = 1.0 - dc.max(scores_a, axis=-1) + dc.max(scores_n, axis=-1)
    return _pair_mean(dc.relu(gap))


def smoothness(scores_a: Tensor) -> Tensor:
    """Sum of squared differences between adjacent segment scores."""
    if scores_a.shape[-1] < 2:
        return _pair_mean(dc.mul(dc.sum(scores_a, axis=-1), 0.0))
    nxt, prev = _adjacent(scores_a)
    return _pair_mean(dc.sum(dc.square(nxt - prev), axis=-1))


def sparsity(scores_a: Tensor) -> Tensor:
    """Sum of squared segment scores."""
    return _pair_mean(dc.sum(dc.square(scores_a), axis=-1))


def score_mil_loss(scores_a: Tensor, scores_n: Tensor, cfg: LossConfig) -> Tensor:
    loss = mil_ranking_loss(scores_a, scores_n)
    return loss + cfg.lambda1 * smoothness(scores_a) + cfg.lambda2 * sparsity(scores_a)


def _topk_mean(values: Tensor, magnitudes: Tensor, k: int) -> Tensor:
    idx = topk_by_magnitude(magnitudes, k)
    return dc.mean(dc.take(values, idx, axis=-1), axis=-1)


def magnitude_loss(mags_a: Tensor, mags_n: Tensor, cfg: LossConfig) -> Tensor:
    """max(0, m - (s_a - s_n)) with s_x the squared mean of the top-k magnitudes of bag x."""
    s_a = dc.square(_topk_mean(mags_a, mags_a, cfg.k))
    s_n = dc.square(_topk_mean(mags_n, mags_n, cfg.k))
    return _pair_mean(dc.relu(cfg.margin - (s_a - s_n)))


def topk_score_bce(scores: Tensor, mags: Tensor, y: int, k: int) -> Tensor:
    """Binary cross-entropy of the mean score over the top-k-magnitude segments."""
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y}")
    s = dc.clip(_topk_mean(scores, mags, k), BCE_EPS, 1.0 - BCE_EPS)
    bce = -dc.log(s) if y == 1 else -dc.log(1.0 - s)
    return _pair_mean(bce)


def rtfm_loss(bag_a: BagScores, bag_n: BagScores, cfg: LossConfig) -> Tensor:
    """Top-k BCE on both bags + alpha * magnitude hinge + abnormal-bag regularizers."""
    loss = topk_score_bce(bag_a.scores, bag_a.magnitudes, 1, cfg.k)
    loss = loss + topk_score_bce(bag_n.scores, bag_n.magnitudes, 0, cfg.k)
    loss = loss + cfg.alpha * magnitude_loss(bag_a.magnitudes, bag_n.magnitudes, cfg)
    return loss + cfg.lambda1 * smoothness(bag_a.scores) + cfg.lambda2 * sparsity(bag_a.scores)


def bag_loss(bag_a: BagScores, bag_n: BagScores, cfg: LossConfig) -> Tensor:
    if cfg.variant == "score_mil":
        return score_mil_loss(bag_a.scores, bag_n.scores, cfg)
    return rtfm_loss(bag_a, bag_n, cfg)
