"""Contrastive margin loss with in-batch hard negative mining, Smooth L1, and
their weighted multitask combination.

The contrastive form is the classic margin pair loss: ``d**2`` for a positive
pair and ``max(0, m - d)**2`` for a negative one. Swapping in another pair
loss only requires replacing :func:`contrastive_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, MiningError

DIST_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    smooth_l1_beta: float = 1.0
    # weight of the contrastive term; Smooth L1 gets 1 - weight
    multitask_weight: float = 0.5

    def __post_init__(self):
        if not self.margin >= 0:
            raise InvalidArgumentError(f"margin must be >= 0, got {self.margin}")
        if not self.smooth_l1_beta > 0:
            raise InvalidArgumentError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        if not 0 <= self.multitask_weight <= 1:
            raise InvalidArgumentError(f"multitask_weight must lie in [0, 1], got {self.multitask_weight}")


def pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def contrastive_loss(d: float, is_positive: bool, margin: float = 1.0) -> tuple[float, float]:
    """Loss and its derivative with respect to the distance ``d``."""
    if is_positive:
        return d * d, 2.0 * d
    gap = max(0.0, margin - d)
    return gap * gap, -2.0 * gap


def distance_matrix(emb: np.ndarray) -> np.ndarray:
    """All pairwise Euclidean distances, accumulated in float64."""
    e = np.asarray(emb, dtype=np.float64)
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mine_hard_negatives(embeddings: np.ndarray, pair_ids) -> list[tuple[int, int]]:
    """For every anchor, the closest batch member from a different pair.

    Ties go to the lowest index. Raises :class:`MiningError` when no anchor
    has a valid negative.
    """
    pair_ids = np.asarray(pair_ids)
    if len(pair_ids) < 2 or len(np.unique(pair_ids)) < 2:
        raise MiningError("hard negative mining needs at least two distinct pair ids in the batch")
    if len(pair_ids) != len(embeddings):
        raise InvalidArgumentError(f"{len(embeddings)} embeddings but {len(pair_ids)} pair ids")
    dist = distance_matrix(embeddings)
    dist[pair_ids[:, None] == pair_ids[None, :]] = np.inf
    return [(i, int(np.argmin(dist[i]))) for i in range(len(pair_ids))]


def random_negatives(pair_ids, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniformly drawn negatives from outside the anchor's pair (ablation mode)."""
    pair_ids = np.asarray(pair_ids)
    if len(np.unique(pair_ids)) < 2:
        raise MiningError("random negative sampling needs at least two distinct pair ids")
    out = []
    for i, pid in enumerate(pair_ids):
        candidates = np.flatnonzero(pair_ids != pid)
        out.append((i, int(candidates[rng.integers(len(candidates))])))
    return out


def contrastive_batch(emb: np.ndarray, positives, negatives, margin: float):
    """Mean contrastive loss over positive and negative index pairs, plus d loss / d emb.

    Returns ``(mean_loss, grad, pos_distances, neg_distances)``.
    """
    e = np.asarray(emb, dtype=np.float64)
    grad = np.zeros_like(e)
    terms = len(positives) + len(negatives)
    if terms == 0:
        raise InvalidArgumentError("contrastive batch has no pairs")
    total = 0.0
    pos_d, neg_d = [], []
    for pairs, positive, dists in ((positives, True, pos_d), (negatives, False, neg_d)):
        for i, j in pairs:
            diff = e[i] - e[j]
            d = float(np.sqrt(diff @ diff))
            dists.append(d)
            loss, dl_dd = contrastive_loss(d, positive, margin)
            total += loss
            if positive:
                # d(d**2)/d e_i = 2 (e_i - e_j), well defined at d = 0
                g = 2.0 * diff
            elif d > DIST_EPS:
                g = dl_dd * diff / d
            else:
                continue
            grad[i] += g / terms
            grad[j] -= g / terms
    return total / terms, grad, pos_d, neg_d


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean Smooth L1 over all elements and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"shape mismatch: {pred.shape} vs {target.shape}")
    x = pred - target
    ax = np.abs(x)
    quad = ax < beta
    per = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.clip(x / beta, -1.0, 1.0) / x.size
    return float(per.mean()), grad


def multitask_loss(contrastive_mean: float, smooth_l1_mean: float, weight: float) -> float:
    if not 0 <= weight <= 1:
        raise InvalidArgumentError(f"multitask weight must lie in [0, 1], got {weight}")
    return weight * contrastive_mean + (1.0 - weight) * smooth_l1_mean
